//! Random gradient-check problems for every graph op, every density and the
//! full VIB loss. Non-scalar outputs are reduced with fixed random weights.

use rand::Rng;
use vib_core::diff::{Graph, Pairing, Tensor, TensorError, Var};
use vib_core::distributions::{
    decoder_log_probs, gaussian_log_prob, mixture_log_prob, rate_estimate, reparam_sample,
    CategoricalMixtureDecoder, FullCovGaussian, GaussianMixture,
};
use vib_core::model::{LinearVars, VibConfig, VibModel, VibVars};
use vib_core::training::vib_loss;

pub type Objective = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

pub struct GradCase {
    pub name: &'static str,
    pub params: Vec<Tensor<f64>>,
    pub f: Objective,
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform on `[-hi, hi]`, redrawing anything within `gap` of zero.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = hi * (2.0 * rng.random::<f64>() - 1.0);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weights of magnitude in `[0.5, 1.5]` with random signs, so no output
/// entry is reduced away.
fn weights(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.5 + rng.random::<f64>();
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ y` with `w` fixed at construction.
fn reducer(w: Tensor<f64>) -> impl Fn(&Graph<f64>, Var) -> Result<Var, TensorError> {
    move |g, y| {
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv)?;
        g.sum(prod, None)
    }
}

/// Lower-triangular factors `[P, d, d]` with diagonal in `[0.5, 2]`; the
/// entries above the diagonal are random too, since ops must ignore them.
fn factors(rng: &mut impl Rng, p: usize, d: usize) -> Tensor<f64> {
    let mut t = uniform(rng, &[p, d, d], -1.0, 1.0);
    for k in 0..p {
        for i in 0..d {
            t.data_mut()[k * d * d + i * d + i] = 0.5 + 1.5 * rng.random::<f64>();
        }
    }
    t
}

macro_rules! case {
    ($name:expr, [$($p:expr),*], $out:expr, |$g:ident, $v:ident| $body:expr) => {{
        let red = reducer($out);
        GradCase {
            name: $name,
            params: vec![$($p),*],
            f: Box::new(move |$g: &Graph<f64>, $v: &[Var]| {
                let y = $body?;
                red($g, y)
            }),
        }
    }};
}

trait OkVar {
    fn ok(self) -> Result<Var, TensorError>;
}

impl OkVar for Var {
    fn ok(self) -> Result<Var, TensorError> {
        Ok(self)
    }
}

/// One random instance of every differentiable graph op.
pub fn op_cases(rng: &mut impl Rng) -> Vec<GradCase> {
    fn a(rng: &mut impl Rng) -> Tensor<f64> {
        uniform(rng, &[3, 4], -2.0, 2.0)
    }
    fn out34(rng: &mut impl Rng) -> Tensor<f64> {
        weights(rng, &[3, 4])
    }
    vec![
        case!("add", [a(rng), a(rng)], out34(rng), |g, v| g.add(v[0], v[1])),
        case!("add (broadcast)", [a(rng), uniform(rng, &[4], -2.0, 2.0)], out34(rng), |g, v| g.add(v[0], v[1])),
        case!("sub", [a(rng), a(rng)], out34(rng), |g, v| g.sub(v[0], v[1])),
        case!("sub (broadcast)", [a(rng), uniform(rng, &[4], -2.0, 2.0)], out34(rng), |g, v| g.sub(v[0], v[1])),
        case!("mul", [a(rng), a(rng)], out34(rng), |g, v| g.mul(v[0], v[1])),
        case!("mul (broadcast)", [a(rng), uniform(rng, &[4], -2.0, 2.0)], out34(rng), |g, v| g.mul(v[0], v[1])),
        case!("neg", [a(rng)], out34(rng), |g, v| g.neg(v[0]).ok()),
        case!("scale", [a(rng)], out34(rng), |g, v| g.scale(v[0], -1.7).ok()),
        case!("shift", [a(rng)], out34(rng), |g, v| g.shift(v[0], 0.3).ok()),
        case!("relu", [away_from_zero(rng, &[3, 4], 2.0, 1e-3)], out34(rng), |g, v| g.relu(v[0]).ok()),
        case!("softplus", [uniform(rng, &[3, 4], -4.0, 4.0)], out34(rng), |g, v| g.softplus(v[0]).ok()),
        case!("exp", [a(rng)], out34(rng), |g, v| g.exp(v[0]).ok()),
        case!("log", [uniform(rng, &[3, 4], 0.2, 3.0)], out34(rng), |g, v| g.log(v[0]).ok()),
        case!("square", [a(rng)], out34(rng), |g, v| g.square(v[0]).ok()),
        case!("matmul", [a(rng), uniform(rng, &[4, 2], -2.0, 2.0)], weights(rng, &[3, 2]), |g, v| g.matmul(v[0], v[1])),
        case!(
            "affine",
            [a(rng), uniform(rng, &[4, 2], -2.0, 2.0), uniform(rng, &[2], -2.0, 2.0)],
            weights(rng, &[3, 2]),
            |g, v| g.affine(v[0], v[1], v[2])
        ),
        case!(
            "batch_matvec",
            [uniform(rng, &[2, 3, 4], -2.0, 2.0), uniform(rng, &[2, 4], -2.0, 2.0)],
            weights(rng, &[2, 3]),
            |g, v| g.batch_matvec(v[0], v[1])
        ),
        case!(
            "tril_from",
            [uniform(rng, &[2, 3], 0.5, 2.0), uniform(rng, &[2, 3], -1.0, 1.0)],
            weights(rng, &[2, 3, 3]),
            |g, v| g.tril_from(v[0], v[1])
        ),
        case!(
            "mahalanobis (paired)",
            [uniform(rng, &[2, 3], -2.0, 2.0), uniform(rng, &[2, 3], -2.0, 2.0), factors(rng, 2, 3)],
            weights(rng, &[2]),
            |g, v| g.mahalanobis(v[0], v[1], v[2], Pairing::Paired)
        ),
        case!(
            "mahalanobis (all pairs)",
            [uniform(rng, &[4, 3], -2.0, 2.0), uniform(rng, &[2, 3], -2.0, 2.0), factors(rng, 2, 3)],
            weights(rng, &[4, 2]),
            |g, v| g.mahalanobis(v[0], v[1], v[2], Pairing::AllPairs)
        ),
        case!("sum (axis 0)", [a(rng)], weights(rng, &[4]), |g, v| g.sum(v[0], Some(0))),
        case!("sum (axis 1)", [a(rng)], weights(rng, &[3]), |g, v| g.sum(v[0], Some(1))),
        case!("sum (all)", [a(rng)], weights(rng, &[]), |g, v| g.sum(v[0], None)),
        case!("mean", [a(rng)], weights(rng, &[]), |g, v| g.mean(v[0])),
        case!("logsumexp (axis 0)", [a(rng)], weights(rng, &[4]), |g, v| g.logsumexp(v[0], 0)),
        case!("logsumexp (axis 1)", [a(rng)], weights(rng, &[3]), |g, v| g.logsumexp(v[0], 1)),
        case!("log_softmax (axis 0)", [a(rng)], out34(rng), |g, v| g.log_softmax(v[0], 0)),
        case!("log_softmax (axis 1)", [a(rng)], out34(rng), |g, v| g.log_softmax(v[0], 1)),
        case!("reshape", [a(rng)], weights(rng, &[2, 6]), |g, v| g.reshape(v[0], &[2, 6])),
        case!("narrow", [a(rng)], weights(rng, &[3, 2]), |g, v| g.narrow(v[0], 1, 2)),
        case!("gather_rows", [a(rng)], weights(rng, &[4, 4]), |g, v| g.gather_rows(v[0], &[2, 0, 2, 1])),
        case!("pick", [a(rng)], weights(rng, &[3]), |g, v| g.pick(v[0], &[3, 0, 1])),
        case!("repeat_last", [a(rng)], weights(rng, &[3, 4, 2]), |g, v| g.repeat_last(v[0], 2)),
    ]
}

/// Mean, raw diagonal and off-diagonal parameters of `p` Gaussians in `d`
/// dimensions.
fn gaussian_params(rng: &mut impl Rng, p: usize, d: usize) -> [Tensor<f64>; 3] {
    [
        uniform(rng, &[p, d], -1.5, 1.5),
        uniform(rng, &[p, d], -1.0, 1.0),
        uniform(rng, &[p, d * (d - 1) / 2], -0.8, 0.8),
    ]
}

/// Logits, means, raw diagonals and off-diagonals of `m` broad components
/// near the origin. Query points must stay near them as well: a component
/// with negligible responsibility everywhere has gradients around 1e-8,
/// below what central differences resolve against an O(10) objective.
fn overlapping_mixture(rng: &mut impl Rng, m: usize, d: usize) -> [Tensor<f64>; 4] {
    [
        uniform(rng, &[m], -1.0, 1.0),
        uniform(rng, &[m, d], -0.8, 0.8),
        uniform(rng, &[m, d], 0.0, 1.0),
        uniform(rng, &[m, d * (d - 1) / 2], -0.5, 0.5),
    ]
}

fn decoder_case(rng: &mut impl Rng, constant_weights: bool) -> GradCase {
    let (n, d, k, c) = (4, 2, 3, 4);
    let mut params = vec![
        uniform(rng, &[n, d], -2.0, 2.0),
        uniform(rng, &[k], -1.0, 1.0),
        uniform(rng, &[d, k * c], -1.5, 1.5),
        uniform(rng, &[k * c], -1.0, 1.0),
    ];
    if !constant_weights {
        params.push(uniform(rng, &[d, k], -1.5, 1.5));
    }
    let red = reducer(weights(rng, &[n, c]));
    GradCase {
        name: if constant_weights {
            "decoder_log_probs (constant weights)"
        } else {
            "decoder_log_probs (affine weights)"
        },
        params,
        f: Box::new(move |g, v| {
            let dec = CategoricalMixtureDecoder {
                mix_weight: v.get(4).copied(),
                mix_bias: v[1],
                comp_weight: v[2],
                comp_bias: v[3],
                components: k,
                classes: c,
            };
            red(g, decoder_log_probs(g, &dec, v[0])?)
        }),
    }
}

/// One random instance of each density, the reparameterized sample and the
/// Monte Carlo rate; the noise of the rate is a fixed constant.
pub fn distribution_cases(rng: &mut impl Rng) -> Vec<GradCase> {
    let (p, d, m) = (2, 3, 3);
    let [mu, raw, off] = gaussian_params(rng, p, d);
    let gauss = case!(
        "gaussian_log_prob",
        [mu, raw, off, uniform(rng, &[p, d], -2.0, 2.0)],
        weights(rng, &[p]),
        |g, v| {
            let e = FullCovGaussian::from_unconstrained(g, v[0], v[1], v[2])?;
            gaussian_log_prob(g, &e, v[3])
        }
    );
    let [mu, raw, off] = gaussian_params(rng, p, d);
    let sample = case!(
        "reparam_sample",
        [mu, raw, off, uniform(rng, &[p, d], -2.0, 2.0)],
        weights(rng, &[p, d]),
        |g, v| {
            let e = FullCovGaussian::from_unconstrained(g, v[0], v[1], v[2])?;
            reparam_sample(g, &e, v[3])
        }
    );
    let [l, mu, raw, off] = overlapping_mixture(rng, m, d);
    let mixture = case!(
        "mixture_log_prob",
        [l, mu, raw, off, uniform(rng, &[4, d], -1.2, 1.2)],
        weights(rng, &[4]),
        |g, v| {
            let comps = FullCovGaussian::from_unconstrained(g, v[1], v[2], v[3])?;
            let mix = GaussianMixture::new(g, v[0], comps)?;
            mixture_log_prob(g, &mix, v[4])
        }
    );
    let samples = 5;
    let eps = uniform(rng, &[p * samples, d], -1.5, 1.5);
    let [emu, eraw, eoff] = [
        uniform(rng, &[p, d], -0.5, 0.5),
        uniform(rng, &[p, d], -1.0, 0.0),
        uniform(rng, &[p, d * (d - 1) / 2], -0.3, 0.3),
    ];
    let [l, mmu, mraw, moff] = overlapping_mixture(rng, m, d);
    let rate = case!(
        "rate_estimate",
        [emu, eraw, eoff, l, mmu, mraw, moff],
        weights(rng, &[p]),
        |g, v| {
            let enc = FullCovGaussian::from_unconstrained(g, v[0], v[1], v[2])?;
            let comps = FullCovGaussian::from_unconstrained(g, v[4], v[5], v[6])?;
            let mix = GaussianMixture::new(g, v[3], comps)?;
            let e = g.constant(eps.clone());
            rate_estimate(g, &enc, &mix, e, samples)
        }
    );
    vec![gauss, sample, mixture, decoder_case(rng, false), decoder_case(rng, true), rate]
}

/// Rebuilds the VIB graph from freshly bound parameters in
/// `VibModel::named_params` order.
pub fn vars_from_params(g: &Graph<f64>, config: &VibConfig, v: &[Var]) -> Result<VibVars, TensorError> {
    let layers = config.hidden.len();
    let linear = |i: usize| LinearVars {
        weight: v[2 * i],
        bias: v[2 * i + 1],
    };
    let trunk = (0..layers).map(linear).collect();
    let head = linear(layers);
    let at = 2 * layers + 2;
    let comps = FullCovGaussian::from_unconstrained(g, v[at + 1], v[at + 2], v[at + 3])?;
    let marginal = GaussianMixture::new(g, v[at], comps)?;
    let (mix_weight, rest) = match v.len() - at - 4 {
        4 => (Some(v[at + 4]), at + 5),
        3 => (None, at + 4),
        n => return Err(TensorError::invalid("vars_from_params", format!("{} decoder tensors", n))),
    };
    let decoder = CategoricalMixtureDecoder {
        mix_weight,
        mix_bias: v[rest],
        comp_weight: v[rest + 1],
        comp_bias: v[rest + 2],
        components: config.decoder_components,
        classes: config.class_count,
    };
    Ok(VibVars {
        trunk,
        head,
        marginal,
        decoder,
        latent_dim: config.latent_dim,
    })
}

pub fn tiny_vib_config() -> VibConfig {
    VibConfig {
        input_dim: 6,
        hidden: vec![5],
        latent_dim: 2,
        marginal_components: 2,
        decoder_components: 2,
        class_count: 3,
        beta: 0.1,
        ..VibConfig::default()
    }
}

/// The full loss of a tiny VIB model (d=2, M=2, K=2, C=3, batch 4, S=3) at
/// random parameters with fixed inputs, labels and noise.
pub fn vib_loss_case(rng: &mut impl Rng) -> GradCase {
    let config = tiny_vib_config();
    let mut model = VibModel::<f64>::init(config.clone(), rng.random()).unwrap();
    // Nontrivial biases everywhere.
    for t in model.params_mut() {
        for x in t.data_mut() {
            *x += 0.3 * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    let (batch, samples) = (4, 3);
    // Redraw inputs until no trunk pre-activation sits near the relu kink.
    let x = loop {
        let x = uniform(rng, &[batch, config.input_dim], 0.0, 1.0);
        if min_preactivation_gap(&model, &x) > 1e-3 {
            break x;
        }
    };
    let labels: Vec<usize> = (0..batch).map(|i| i % config.class_count).collect();
    let eps = uniform(rng, &[batch * samples, config.latent_dim], -2.0, 2.0);
    let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let beta = config.beta;
    GradCase {
        name: "vib_loss",
        params,
        f: Box::new(move |g, v| {
            let vars = vars_from_params(g, &config, v)?;
            let xv = g.constant(x.clone());
            let ev = g.constant(eps.clone());
            let terms = vib_loss(g, &vars, xv, &labels, ev, samples, beta).map_err(|e| match e {
                vib_core::model::ModelError::Tensor(t) => t,
                other => TensorError::invalid("vib_loss", other.to_string()),
            })?;
            Ok(terms.loss)
        }),
    }
}

fn min_preactivation_gap(model: &VibModel<f64>, x: &Tensor<f64>) -> f64 {
    let g = Graph::new();
    let (vars, _) = model.bind(&g, false).unwrap();
    let mut h = g.constant(x.clone());
    let mut gap = f64::INFINITY;
    for layer in &vars.trunk {
        let pre = g.affine(h, layer.weight, layer.bias).unwrap();
        gap = g.value(pre).data().iter().fold(gap, |m, v| m.min(v.abs()));
        h = g.relu(pre);
    }
    gap
}
