//! The VIB objective, cross-entropy for the baseline, Adam, and the
//! dev-decay training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{self, DataError, ImageDataset};
use crate::diff::{Graph, Tensor, TensorError, Var};
use crate::model::{BaselineModel, BaselineVars, Model, ModelError, VibModel, VibVars};
use crate::parallel;
use crate::rng::{self, purpose};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: loss {loss}, class term {class_term}, rate term {rate_term}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        class_term: f64,
        rate_term: f64,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

type Result<V> = std::result::Result<V, TrainError>;

/// Loss nodes of one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// `class_term + β · rate_term`.
    pub loss: Var,
    /// Batch mean of `−(1/S) Σ_s log q(y|z_s)`.
    pub class_term: Var,
    /// Batch mean of the Monte Carlo rate.
    pub rate_term: Var,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> std::result::Result<(), TensorError> {
    if labels.len() != batch {
        return Err(TensorError::shape("loss labels", &[labels.len()], &[batch]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(TensorError::invalid("loss labels", format!("label {} outside {} classes", bad, classes)));
    }
    Ok(())
}

/// The negated variational bound for a batch `x: [B, input]` with labels
/// `y` and reparameterization noise `eps: [B·S, d]` (instance-major).
pub fn vib_loss<T: Scalar>(
    g: &Graph<T>,
    model: &VibVars,
    x: Var,
    labels: &[usize],
    eps: Var,
    samples: usize,
    beta: T,
) -> std::result::Result<LossTerms, ModelError> {
    let b = g.shape(x)[0];
    if b == 0 {
        return Err(TensorError::invalid("vib_loss", "empty batch").into());
    }
    check_labels(labels, b, model.decoder.classes)?;
    let pass = model.pass(g, x, eps, samples)?;
    let repeated: Vec<usize> = labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, samples))
        .collect();
    let picked = g.pick(pass.log_probs, &repeated)?;
    let class_term = g.neg(g.mean(picked)?);
    let rate_term = g.mean(pass.rate.rate)?;
    let loss = g.add(class_term, g.scale(rate_term, beta))?;
    Ok(LossTerms {
        loss,
        class_term,
        rate_term,
    })
}

/// Mean cross-entropy of the baseline logits.
pub fn baseline_loss<T: Scalar>(
    g: &Graph<T>,
    model: &BaselineVars,
    x: Var,
    labels: &[usize],
) -> std::result::Result<Var, ModelError> {
    let logits = model.logits(g, x)?;
    let shape = g.shape(logits);
    if shape[0] == 0 {
        return Err(TensorError::invalid("baseline_loss", "empty batch").into());
    }
    check_labels(labels, shape[0], shape[1])?;
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.pick(lp, labels)?;
    Ok(g.neg(g.mean(picked)?))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&mut Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> std::result::Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::invalid(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
    let t = state.t as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dev_decay_factor: f64,
    pub dev_decay_patience: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1e-3,
            lr0: 1e-3,
            batch_size: 128,
            max_epochs: 20,
            dev_decay_factor: 0.1,
            dev_decay_patience: 3,
            train_samples: 12,
            eval_samples: 32,
            seed: 0,
            dev_fraction: 0.1,
            min_lr: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return err(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return err(format!("learning rate must be positive, got {}", self.lr0));
        }
        if !(self.dev_decay_factor > 0.0 && self.dev_decay_factor < 1.0) {
            return err(format!("decay factor must lie in (0, 1), got {}", self.dev_decay_factor));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return err(format!("dev fraction must lie in (0, 1), got {}", self.dev_fraction));
        }
        if self.batch_size == 0 || self.train_samples == 0 || self.eval_samples == 0 {
            return err("batch size and sample counts must be positive".into());
        }
        if self.dev_decay_patience == 0 {
            return err("patience must be at least one epoch".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_class_term: f64,
    pub train_rate_term: f64,
    pub dev_accuracy: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,train_loss,train_class_term,train_rate_term,dev_accuracy";

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(
            s,
            "{},{:e},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.lr, r.train_loss, r.train_class_term, r.train_rate_term, r.dev_accuracy
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Snapshot with the best dev accuracy (the initial model if no epoch ran).
    pub model: Model<T>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub train_size: usize,
    pub dev_size: usize,
}

/// Instances per evaluation chunk.
pub const EVAL_CHUNK: usize = 256;

/// Most probable class, ties to the lowest index.
pub fn argmax<T: Scalar>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Fraction of labeled instances whose most probable class is correct.
pub fn accuracy<T: Scalar>(model: &Model<T>, ds: &ImageDataset<T>, eval_samples: usize, seed: u64) -> Result<f64> {
    let labels = ds.class_labels()?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let c = model.class_count();
    let counts = parallel::map_chunks(ds.len(), EVAL_CHUNK, |s, e| -> Result<usize> {
        let x = ds.range(s, e);
        let probs = match model {
            Model::Vib(m) => m.evaluate(&x, eval_samples, seed, s as u64)?.probs,
            Model::Baseline(m) => m.predict_batch(&x, T::one())?,
        };
        Ok(probs
            .data()
            .chunks(c)
            .zip(&labels[s..e])
            .filter(|(p, &y)| argmax(p) == y)
            .count())
    });
    let mut correct = 0;
    for n in counts {
        correct += n?;
    }
    Ok(correct as f64 / labels.len() as f64)
}

struct StepResult {
    loss: f64,
    class_term: f64,
    rate_term: f64,
}

fn vib_step<T: Scalar>(
    model: &mut VibModel<T>,
    adam: &mut AdamState<T>,
    x: Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: T,
    at: (usize, usize),
) -> Result<StepResult> {
    let b = labels.len();
    let (s, d) = (cfg.train_samples, model.config.latent_dim);
    let mut noise_rng = rng::stream(cfg.seed, purpose::TRAIN_NOISE, &[at.0 as u64, at.1 as u64]);
    let eps = Tensor::new(vec![b * s, d], rng::standard_normals(&mut noise_rng, b * s * d))?;
    let g = Graph::new();
    let (vars, leaves) = model.bind(&g, true)?;
    let xv = g.constant(x);
    let ev = g.constant(eps);
    let terms = vib_loss(&g, &vars, xv, labels, ev, s, T::lit(cfg.beta))?;
    let result = StepResult {
        loss: g.value(terms.loss).item().as_f64(),
        class_term: g.value(terms.class_term).item().as_f64(),
        rate_term: g.value(terms.rate_term).item().as_f64(),
    };
    check_finite(&result, at)?;
    g.backward(terms.loss)?;
    let grads: Vec<Tensor<T>> = leaves.iter().map(|&v| g.grad_or_zeros(v)).collect();
    adam_step(&mut model.params_mut(), &grads, adam, lr)?;
    Ok(result)
}

fn baseline_step<T: Scalar>(
    model: &mut BaselineModel<T>,
    adam: &mut AdamState<T>,
    x: Tensor<T>,
    labels: &[usize],
    lr: T,
    at: (usize, usize),
) -> Result<StepResult> {
    let g = Graph::new();
    let (vars, leaves) = model.bind(&g, true);
    let xv = g.constant(x);
    let loss = baseline_loss(&g, &vars, xv, labels)?;
    let value = g.value(loss).item().as_f64();
    let result = StepResult {
        loss: value,
        class_term: value,
        rate_term: 0.0,
    };
    check_finite(&result, at)?;
    g.backward(loss)?;
    let grads: Vec<Tensor<T>> = leaves.iter().map(|&v| g.grad_or_zeros(v)).collect();
    adam_step(&mut model.params_mut(), &grads, adam, lr)?;
    Ok(result)
}

fn check_finite(r: &StepResult, (epoch, batch): (usize, usize)) -> Result<()> {
    if r.loss.is_finite() && r.class_term.is_finite() && r.rate_term.is_finite() {
        return Ok(());
    }
    Err(TrainError::NonFinite {
        epoch,
        batch,
        loss: r.loss,
        class_term: r.class_term,
        rate_term: r.rate_term,
    })
}

/// Trains on `data`, holding out a seeded dev split for the learning-rate
/// schedule and snapshot selection.
///
/// Each epoch shuffles the training split, takes Adam steps over
/// minibatches with fresh noise keyed by `(seed, epoch, batch)`, then
/// measures dev accuracy. After `patience` epochs without improvement the
/// learning rate is multiplied by the decay factor; training ends after
/// `max_epochs` or once the rate drops below `min_lr`.
pub fn train<T: Scalar>(model: Model<T>, data: &ImageDataset<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.pixels() != model.input_dim() {
        return Err(TrainError::Config(format!(
            "images have {} pixels but the model expects {}",
            data.pixels(),
            model.input_dim()
        )));
    }
    let classes = data.class_count();
    if classes > model.class_count() {
        return Err(TrainError::Config(format!(
            "data has {} classes but the model has {}",
            classes,
            model.class_count()
        )));
    }
    let (train_set, dev_set) = data::split(data, cfg.dev_fraction, cfg.seed)?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(TrainError::Config("training and dev splits must both be nonempty".into()));
    }
    let train_labels = train_set.class_labels()?;
    let dev_seed = rng::derive_seed(cfg.seed, purpose::DEV_EVAL, &[]);

    let mut model = model;
    let mut adam = match &mut model {
        Model::Vib(m) => AdamState::new(&m.params_mut()),
        Model::Baseline(m) => AdamState::new(&m.params_mut()),
    };
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut lr = cfg.lr0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        if lr < cfg.min_lr {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, purpose::SHUFFLE, &[epoch as u64]));
        let (mut loss, mut class_term, mut rate_term) = (0.0, 0.0, 0.0);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.batch(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let at = (epoch, batch);
            let step = match &mut model {
                Model::Vib(m) => vib_step(m, &mut adam, x, &labels, cfg, T::lit(lr), at)?,
                Model::Baseline(m) => baseline_step(m, &mut adam, x, &labels, T::lit(lr), at)?,
            };
            let w = idx.len() as f64;
            loss += step.loss * w;
            class_term += step.class_term * w;
            rate_term += step.rate_term * w;
        }
        let n = train_set.len() as f64;
        let dev_accuracy = accuracy(&model, &dev_set, cfg.eval_samples, dev_seed)?;
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss / n,
            train_class_term: class_term / n,
            train_rate_term: rate_term / n,
            dev_accuracy,
        });
        if dev_accuracy > best_acc {
            best_acc = dev_accuracy;
            best = model.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.dev_decay_patience {
                lr *= cfg.dev_decay_factor;
                stale = 0;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        train_size: train_set.len(),
        dev_size: dev_set.len(),
    })
}
