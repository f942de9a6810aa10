//! The VIB classifier and the deterministic baseline.
//!
//! Both share an MLP trunk (`affine → relu` per hidden layer). The VIB head
//! maps the trunk output to the mean and unconstrained Cholesky entries of a
//! full-covariance Gaussian over a `d`-dimensional code; the decoder is a
//! mixture of softmaxes over the code and the marginal is a Gaussian
//! mixture. The baseline head is a plain logistic classifier.
//!
//! Weight matrices are stored `[in, out]`, so an affine layer computes
//! `x · W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Graph, Tensor, TensorError, Var};
use crate::distributions::{
    decoder_log_probs, rate_samples, CategoricalMixtureDecoder, FullCovGaussian, GaussianMixture,
};
use crate::rng::{self, purpose};
use crate::scalar::{softplus_inverse, Scalar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite activations after {layer}")]
    NonFinite { layer: String },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("cannot access {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("unsupported model file version {0}")]
    Version(u64),
    #[error("inconsistent model: {0}")]
    Validation(String),
}

type Result<V> = std::result::Result<V, ModelError>;

/// How the decoder's mixture weights depend on the code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecoderWeights {
    /// `softmax(z·W + c)`.
    #[default]
    Affine,
    /// `softmax(c)`, independent of `z`.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub marginal_components: usize,
    pub decoder_components: usize,
    pub class_count: usize,
    pub beta: f64,
    pub decoder_weights: DecoderWeights,
}

impl Default for VibConfig {
    fn default() -> Self {
        VibConfig {
            input_dim: 784,
            hidden: vec![256, 256],
            latent_dim: 3,
            marginal_components: 200,
            decoder_components: 5,
            class_count: 10,
            beta: 1e-3,
            decoder_weights: DecoderWeights::Affine,
        }
    }
}

impl VibConfig {
    /// Width of the encoder head: mean plus lower-triangular entries.
    pub fn head_dim(&self) -> usize {
        let d = self.latent_dim;
        d + d * (d + 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("marginal_components", self.marginal_components),
            ("decoder_components", self.decoder_components),
            ("class_count", self.class_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Validation(format!("{} must be positive", name)));
            }
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::Validation("hidden widths must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ModelError::Validation(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub class_count: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            input_dim: 784,
            hidden: vec![256, 256],
            class_count: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

fn glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(bound * (2.0 * rng.random::<f64>() - 1.0)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

impl<T: Scalar> Linear<T> {
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: glorot(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Puts model tensors on a graph in a fixed visiting order, which is also
/// the order of gradients and optimizer state.
pub struct Binder<'g, T> {
    graph: &'g Graph<T>,
    trainable: bool,
    leaves: Vec<Var>,
}

impl<'g, T: Scalar> Binder<'g, T> {
    pub fn new(graph: &'g Graph<T>, trainable: bool) -> Self {
        Binder {
            graph,
            trainable,
            leaves: Vec::new(),
        }
    }

    pub fn bind(&mut self, t: &Tensor<T>) -> Var {
        let v = if self.trainable {
            self.graph.param(t.clone())
        } else {
            self.graph.constant(t.clone())
        };
        self.leaves.push(v);
        v
    }

    fn linear(&mut self, l: &Linear<T>) -> LinearVars {
        LinearVars {
            weight: self.bind(&l.weight),
            bias: self.bind(&l.bias),
        }
    }

    pub fn into_leaves(self) -> Vec<Var> {
        self.leaves
    }
}

fn trunk_init<T: Scalar>(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Vec<Linear<T>> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut fan_in = input_dim;
    for &h in hidden {
        layers.push(Linear::glorot(fan_in, h, rng));
        fan_in = h;
    }
    layers
}

fn trunk_forward<T: Scalar>(g: &Graph<T>, layers: &[LinearVars], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let a = g.affine(h, l.weight, l.bias)?;
        h = g.relu(a);
        if !g.value(h).all_finite() {
            return Err(ModelError::NonFinite {
                layer: format!("trunk layer {}", i),
            });
        }
    }
    Ok(h)
}

fn check_input<T: Scalar>(x: &Tensor<T>, input_dim: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != input_dim {
        return Err(TensorError::shape("input", x.shape(), &[input_dim]).into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet<T> {
    pub trunk: Vec<Linear<T>>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalParams<T> {
    /// `[M]`.
    pub weight_logits: Tensor<T>,
    /// `[M, d]`.
    pub means: Tensor<T>,
    /// Pre-softplus Cholesky diagonals, `[M, d]`.
    pub raw_diag: Tensor<T>,
    /// Strictly-lower Cholesky entries, `[M, d(d-1)/2]`.
    pub off_diag: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    /// `[d, K]`; absent for constant mixture weights.
    pub mix_weight: Option<Tensor<T>>,
    /// `[K]`.
    pub mix_bias: Tensor<T>,
    /// `[d, K·C]`.
    pub comp_weight: Tensor<T>,
    /// `[K·C]`.
    pub comp_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibModel<T> {
    pub config: VibConfig,
    pub encoder: EncoderNet<T>,
    pub marginal: MarginalParams<T>,
    pub decoder: DecoderParams<T>,
}

/// A [`VibModel`] bound to a graph.
#[derive(Debug, Clone)]
pub struct VibVars {
    pub trunk: Vec<LinearVars>,
    pub head: LinearVars,
    pub marginal: GaussianMixture,
    pub decoder: CategoricalMixtureDecoder,
    pub latent_dim: usize,
}

/// One stochastic forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct VibPass {
    pub encoding: FullCovGaussian,
    /// Codes, rate terms and marginal densities per sample.
    pub rate: crate::distributions::RateSamples,
    /// `log q(y|z_s)`, `[B·S, C]`.
    pub log_probs: Var,
}

impl VibVars {
    /// Encoding distributions for inputs `x: [B, input_dim]`.
    pub fn encode<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<FullCovGaussian> {
        let h = trunk_forward(g, &self.trunk, x)?;
        let out = g.affine(h, self.head.weight, self.head.bias)?;
        if !g.value(out).all_finite() {
            return Err(ModelError::NonFinite {
                layer: "encoder head".into(),
            });
        }
        let d = self.latent_dim;
        let mean = g.narrow(out, 0, d)?;
        let raw_diag = g.narrow(out, d, d)?;
        let off = g.narrow(out, 2 * d, d * (d - 1) / 2)?;
        Ok(FullCovGaussian::from_unconstrained(g, mean, raw_diag, off)?)
    }

    /// Encodes `x`, draws `S` codes per instance from `eps: [B·S, d]`, and
    /// evaluates rate and decoder on them.
    pub fn pass<T: Scalar>(&self, g: &Graph<T>, x: Var, eps: Var, samples: usize) -> Result<VibPass> {
        let encoding = self.encode(g, x)?;
        let rate = rate_samples(g, &encoding, &self.marginal, eps, samples)?;
        let log_probs = decoder_log_probs(g, &self.decoder, rate.z)?;
        Ok(VibPass {
            encoding,
            rate,
            log_probs,
        })
    }
}

/// Plain-value encoder output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding<T> {
    /// `[B, d]`.
    pub mean: Tensor<T>,
    /// `[B, d, d]`, lower triangular.
    pub chol: Tensor<T>,
}

/// Results of a Monte Carlo evaluation pass over a batch.
#[derive(Debug, Clone)]
pub struct McEvaluation<T> {
    pub samples: usize,
    /// `(1/S) Σ_s q(y|z_s)`, `[B, C]`.
    pub probs: Tensor<T>,
    /// Rate estimate per instance `[B]`.
    pub rate: Vec<T>,
    /// `log m(z_s)`, `[B·S]`.
    pub marginal_log_prob: Vec<T>,
    /// `log q(y|z_s)`, `[B·S, C]`.
    pub log_probs: Tensor<T>,
}

impl<T: Scalar> VibModel<T> {
    /// Glorot-uniform weights and zero biases for all affine maps; marginal
    /// means from `N(0, I)` with unit Cholesky diagonals, no off-diagonal
    /// terms and uniform weights.
    pub fn init(config: VibConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, purpose::INIT, &[]);
        let (d, m, k, c) = (
            config.latent_dim,
            config.marginal_components,
            config.decoder_components,
            config.class_count,
        );
        let trunk = trunk_init(config.input_dim, &config.hidden, &mut r);
        let last = config.hidden.last().copied().unwrap_or(config.input_dim);
        let head = Linear::glorot(last, config.head_dim(), &mut r);
        let means = Tensor::new(vec![m, d], rng::standard_normals(&mut r, m * d))?;
        let marginal = MarginalParams {
            weight_logits: Tensor::zeros(&[m]),
            means,
            raw_diag: Tensor::full(&[m, d], softplus_inverse(T::one())),
            off_diag: Tensor::zeros(&[m, d * (d - 1) / 2]),
        };
        let mix_weight = match config.decoder_weights {
            DecoderWeights::Affine => Some(glorot(d, k, &mut r)),
            DecoderWeights::Constant => None,
        };
        let decoder = DecoderParams {
            mix_weight,
            mix_bias: Tensor::zeros(&[k]),
            comp_weight: glorot(d, k * c, &mut r),
            comp_bias: Tensor::zeros(&[k * c]),
        };
        let model = VibModel {
            config,
            encoder: EncoderNet { trunk, head },
            marginal,
            decoder,
        };
        model.validate()?;
        Ok(model)
    }

    /// Name and tensor of every parameter, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.trunk.iter().enumerate() {
            out.push((format!("encoder.trunk.{}.weight", i), &l.weight));
            out.push((format!("encoder.trunk.{}.bias", i), &l.bias));
        }
        out.push(("encoder.head.weight".into(), &self.encoder.head.weight));
        out.push(("encoder.head.bias".into(), &self.encoder.head.bias));
        let mg = &self.marginal;
        out.push(("marginal.weight_logits".into(), &mg.weight_logits));
        out.push(("marginal.means".into(), &mg.means));
        out.push(("marginal.raw_diag".into(), &mg.raw_diag));
        out.push(("marginal.off_diag".into(), &mg.off_diag));
        let dc = &self.decoder;
        if let Some(w) = &dc.mix_weight {
            out.push(("decoder.mix_weight".into(), w));
        }
        out.push(("decoder.mix_bias".into(), &dc.mix_bias));
        out.push(("decoder.comp_weight".into(), &dc.comp_weight));
        out.push(("decoder.comp_bias".into(), &dc.comp_bias));
        out
    }

    /// Mutable parameters in binding order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.encoder.trunk {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.encoder.head.weight);
        out.push(&mut self.encoder.head.bias);
        let mg = &mut self.marginal;
        out.push(&mut mg.weight_logits);
        out.push(&mut mg.means);
        out.push(&mut mg.raw_diag);
        out.push(&mut mg.off_diag);
        let dc = &mut self.decoder;
        if let Some(w) = &mut dc.mix_weight {
            out.push(w);
        }
        out.push(&mut dc.mix_bias);
        out.push(&mut dc.comp_weight);
        out.push(&mut dc.comp_bias);
        out
    }

    /// Expected parameter shapes implied by the configuration.
    pub fn expected_shapes(config: &VibConfig) -> Vec<(String, Vec<usize>)> {
        let (d, m, k, c) = (
            config.latent_dim,
            config.marginal_components,
            config.decoder_components,
            config.class_count,
        );
        let mut out = Vec::new();
        let mut fan_in = config.input_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            out.push((format!("encoder.trunk.{}.weight", i), vec![fan_in, h]));
            out.push((format!("encoder.trunk.{}.bias", i), vec![h]));
            fan_in = h;
        }
        out.push(("encoder.head.weight".into(), vec![fan_in, config.head_dim()]));
        out.push(("encoder.head.bias".into(), vec![config.head_dim()]));
        out.push(("marginal.weight_logits".into(), vec![m]));
        out.push(("marginal.means".into(), vec![m, d]));
        out.push(("marginal.raw_diag".into(), vec![m, d]));
        out.push(("marginal.off_diag".into(), vec![m, d * (d - 1) / 2]));
        if config.decoder_weights == DecoderWeights::Affine {
            out.push(("decoder.mix_weight".into(), vec![d, k]));
        }
        out.push(("decoder.mix_bias".into(), vec![k]));
        out.push(("decoder.comp_weight".into(), vec![d, k * c]));
        out.push(("decoder.comp_bias".into(), vec![k * c]));
        out
    }

    /// Checks that every parameter agrees with the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::expected_shapes(&self.config);
        let actual = self.named_params();
        if expected.len() != actual.len() {
            return Err(ModelError::Validation(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != at.shape() {
                return Err(ModelError::Validation(format!(
                    "{} should have shape {:?}, found {} with shape {:?}",
                    en,
                    es,
                    an,
                    at.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Result<(VibVars, Vec<Var>)> {
        let mut b = Binder::new(g, trainable);
        let trunk: Vec<LinearVars> = self.encoder.trunk.iter().map(|l| b.linear(l)).collect();
        let head = b.linear(&self.encoder.head);
        let mg = &self.marginal;
        let weight_logits = b.bind(&mg.weight_logits);
        let means = b.bind(&mg.means);
        let raw_diag = b.bind(&mg.raw_diag);
        let off = b.bind(&mg.off_diag);
        let comps = FullCovGaussian::from_unconstrained(g, means, raw_diag, off)?;
        let marginal = GaussianMixture::new(g, weight_logits, comps)?;
        let dc = &self.decoder;
        let mix_weight = dc.mix_weight.as_ref().map(|w| b.bind(w));
        let decoder = CategoricalMixtureDecoder {
            mix_weight,
            mix_bias: b.bind(&dc.mix_bias),
            comp_weight: b.bind(&dc.comp_weight),
            comp_bias: b.bind(&dc.comp_bias),
            components: self.config.decoder_components,
            classes: self.config.class_count,
        };
        let vars = VibVars {
            trunk,
            head,
            marginal,
            decoder,
            latent_dim: self.config.latent_dim,
        };
        Ok((vars, b.into_leaves()))
    }

    /// Encoder means and Cholesky factors for `x: [B, input_dim]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Encoding<T>> {
        check_input(x, self.config.input_dim)?;
        let g = Graph::new();
        let (vars, _) = self.bind(&g, false)?;
        let xv = g.constant(x.clone());
        let enc = vars.encode(&g, xv)?;
        Ok(Encoding {
            mean: (*g.value(enc.mean)).clone(),
            chol: (*g.value(enc.chol)).clone(),
        })
    }

    /// Monte Carlo evaluation of `x: [B, input_dim]` with explicit noise
    /// `eps: [B·S, d]`.
    pub fn evaluate_with_noise(&self, x: &Tensor<T>, eps: &Tensor<T>, samples: usize) -> Result<McEvaluation<T>> {
        check_input(x, self.config.input_dim)?;
        let b = x.shape()[0];
        let c = self.config.class_count;
        let g = Graph::new();
        let (vars, _) = self.bind(&g, false)?;
        let xv = g.constant(x.clone());
        let ev = g.constant(eps.clone());
        let pass = vars.pass(&g, xv, ev, samples)?;
        let p = g.exp(pass.log_probs);
        let p = g.reshape(p, &[b, samples, c])?;
        let p = g.sum(p, Some(1))?;
        let p = g.scale(p, T::one() / T::from_count(samples));
        Ok(McEvaluation {
            samples,
            probs: (*g.value(p)).clone(),
            rate: g.value(pass.rate.rate).data().to_vec(),
            marginal_log_prob: g.value(pass.rate.marginal_log_prob).data().to_vec(),
            log_probs: (*g.value(pass.log_probs)).clone(),
        })
    }

    /// Monte Carlo evaluation where instance `i` of the batch draws its noise
    /// from the evaluation stream keyed by `(seed, first_index + i)`.
    pub fn evaluate(&self, x: &Tensor<T>, samples: usize, seed: u64, first_index: u64) -> Result<McEvaluation<T>> {
        if samples == 0 {
            return Err(ModelError::Validation("need at least one sample".into()));
        }
        let b = x.shape().first().copied().unwrap_or(0);
        let d = self.config.latent_dim;
        let mut noise = Vec::with_capacity(b * samples * d);
        for i in 0..b {
            noise.extend(rng::eval_noise::<T>(seed, first_index + i as u64, samples, d));
        }
        let eps = Tensor::new(vec![b * samples, d], noise)?;
        self.evaluate_with_noise(x, &eps, samples)
    }

    /// Class probabilities for a single flattened input, averaged over
    /// `samples` codes drawn from the evaluation stream of `seed`.
    pub fn predict(&self, x: &[T], samples: usize, seed: u64) -> Result<Vec<T>> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.evaluate(&xt, samples, seed, 0)?.probs.into_data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel<T> {
    pub config: BaselineConfig,
    pub trunk: Vec<Linear<T>>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct BaselineVars {
    pub trunk: Vec<LinearVars>,
    pub head: LinearVars,
}

impl BaselineVars {
    /// Class logits `[B, C]`.
    pub fn logits<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let h = trunk_forward(g, &self.trunk, x)?;
        let out = g.affine(h, self.head.weight, self.head.bias)?;
        if !g.value(out).all_finite() {
            return Err(ModelError::NonFinite {
                layer: "classifier head".into(),
            });
        }
        Ok(out)
    }
}

impl<T: Scalar> BaselineModel<T> {
    pub fn init(config: BaselineConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.class_count == 0 || config.hidden.contains(&0) {
            return Err(ModelError::Validation("dimensions must be positive".into()));
        }
        let mut r = rng::stream(seed, purpose::INIT, &[]);
        let trunk = trunk_init(config.input_dim, &config.hidden, &mut r);
        let last = config.hidden.last().copied().unwrap_or(config.input_dim);
        let head = Linear::glorot(last, config.class_count, &mut r);
        Ok(BaselineModel { config, trunk, head })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{}.weight", i), &l.weight));
            out.push((format!("trunk.{}.bias", i), &l.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn expected_shapes(config: &BaselineConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = config.input_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            out.push((format!("trunk.{}.weight", i), vec![fan_in, h]));
            out.push((format!("trunk.{}.bias", i), vec![h]));
            fan_in = h;
        }
        out.push(("head.weight".into(), vec![fan_in, config.class_count]));
        out.push(("head.bias".into(), vec![config.class_count]));
        out
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> (BaselineVars, Vec<Var>) {
        let mut b = Binder::new(g, trainable);
        let trunk = self.trunk.iter().map(|l| b.linear(l)).collect();
        let head = b.linear(&self.head);
        (BaselineVars { trunk, head }, b.into_leaves())
    }

    /// Logits `[B, C]` for `x: [B, input_dim]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.config.input_dim)?;
        let g = Graph::new();
        let (vars, _) = self.bind(&g, false);
        let xv = g.constant(x.clone());
        let l = vars.logits(&g, xv)?;
        Ok((*g.value(l)).clone())
    }

    /// `softmax(logits / T)` per row.
    pub fn predict_batch(&self, x: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
        let logits = self.logits(x)?;
        tempered_softmax(&logits, temperature)
    }

    pub fn predict(&self, x: &[T], temperature: T) -> Result<Vec<T>> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.predict_batch(&xt, temperature)?.into_data())
    }
}

/// Row-wise `softmax(logits / T)` for `logits: [B, C]`.
pub fn tempered_softmax<T: Scalar>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if temperature.is_nan() || temperature <= T::zero() {
        return Err(ModelError::Temperature(temperature.as_f64()));
    }
    let c = *logits.shape().last().unwrap_or(&0);
    let mut out = Vec::with_capacity(logits.len());
    if c > 0 {
        for row in logits.data().chunks(c) {
            let scaled: Vec<T> = row.iter().map(|&l| l / temperature).collect();
            let m = scaled.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = scaled.iter().map(|&s| (s - m).exp()).collect();
            let z: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
    }
    Ok(Tensor::new(logits.shape().to_vec(), out)?)
}

/// Either kind of trained model.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model<T> {
    Vib(VibModel<T>),
    Baseline(BaselineModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Vib(_) => "vib",
            Model::Baseline(_) => "baseline",
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Vib(m) => m.config.input_dim,
            Model::Baseline(m) => m.config.input_dim,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Model::Vib(m) => m.config.class_count,
            Model::Baseline(m) => m.config.class_count,
        }
    }
}
