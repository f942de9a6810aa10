//! Differentiable densities for the encoder, the latent marginal and the
//! decoder.
//!
//! Every distribution lives on a [`Graph`] as a handful of [`Var`]s, so the
//! same code path serves training (tracked parameters) and evaluation
//! (constants). A [`FullCovGaussian`] is a *batch* of `P` Gaussians stored
//! row-wise; a single distribution is the `P = 1` case. Sampling noise is
//! always passed in; nothing here owns a random generator. All log
//! densities are in nats.

use crate::diff::{Graph, Pairing, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Smallest Cholesky diagonal entry, added after the softplus.
pub const CHOL_FLOOR: f64 = 1e-6;

type Result<V> = std::result::Result<V, TensorError>;

/// `P` Gaussians in `d` dimensions: means `[P, d]`, positive Cholesky
/// diagonals `[P, d]` and assembled lower-triangular factors `[P, d, d]`.
#[derive(Debug, Clone, Copy)]
pub struct FullCovGaussian {
    pub mean: Var,
    pub diag: Var,
    pub chol: Var,
    pub count: usize,
    pub dim: usize,
}

impl FullCovGaussian {
    /// From means, a strictly positive diagonal and strictly-lower entries
    /// (row-major, `d(d-1)/2` per Gaussian).
    pub fn from_factors<T: Scalar>(g: &Graph<T>, mean: Var, diag: Var, off: Var) -> Result<Self> {
        let shape = g.shape(mean);
        if shape.len() != 2 || g.shape(diag) != shape {
            return Err(TensorError::Shape {
                op: "gaussian",
                lhs: shape,
                rhs: g.shape(diag),
            });
        }
        let chol = g.tril_from(diag, off)?;
        Ok(FullCovGaussian {
            mean,
            diag,
            chol,
            count: shape[0],
            dim: shape[1],
        })
    }

    /// Diagonal from unconstrained values via `softplus(raw) + CHOL_FLOOR`.
    pub fn from_unconstrained<T: Scalar>(
        g: &Graph<T>,
        mean: Var,
        raw_diag: Var,
        off: Var,
    ) -> Result<Self> {
        let sp = g.softplus(raw_diag);
        let diag = g.shift(sp, T::lit(CHOL_FLOOR));
        Self::from_factors(g, mean, diag, off)
    }

    /// Constant Gaussian from a mean and a full lower-triangular factor
    /// given row-major; entries above the diagonal are ignored.
    pub fn constant<T: Scalar>(g: &Graph<T>, mean: &[T], chol: &[T]) -> Result<Self> {
        let d = mean.len();
        if chol.len() != d * d {
            return Err(TensorError::shape("gaussian", &[d], &[chol.len()]));
        }
        let diag: Vec<T> = (0..d).map(|i| chol[i * d + i]).collect();
        let off: Vec<T> = (0..d)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| chol[i * d + j])
            .collect();
        let w = off.len();
        let mean = g.constant(Tensor::new(vec![1, d], mean.to_vec())?);
        let diag = g.constant(Tensor::new(vec![1, d], diag)?);
        let off = g.constant(Tensor::new(vec![1, w], off)?);
        Self::from_factors(g, mean, diag, off)
    }

    /// Rows `idx` of this batch as a new batch.
    pub fn gather<T: Scalar>(&self, g: &Graph<T>, idx: &[usize]) -> Result<Self> {
        Ok(FullCovGaussian {
            mean: g.gather_rows(self.mean, idx)?,
            diag: g.gather_rows(self.diag, idx)?,
            chol: g.gather_rows(self.chol, idx)?,
            count: idx.len(),
            dim: self.dim,
        })
    }

    /// `Σ_i ln L_ii` per Gaussian, shape `[P]`.
    pub fn half_log_det<T: Scalar>(&self, g: &Graph<T>) -> Result<Var> {
        let l = g.log(self.diag);
        g.sum(l, Some(1))
    }
}

fn log_normalizer<T: Scalar>(dim: usize) -> T {
    T::lit(-0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn check_points<T: Scalar>(g: &Graph<T>, z: Var, dim: usize) -> Result<usize> {
    let s = g.shape(z);
    if s.len() != 2 || s[1] != dim {
        return Err(TensorError::shape("log_prob", &s, &[dim]));
    }
    Ok(s[0])
}

/// `log N(z_n; μ_n, L_n L_nᵀ)` for each row `n`; `z: [P, d]` → `[P]`.
pub fn gaussian_log_prob<T: Scalar>(g: &Graph<T>, gauss: &FullCovGaussian, z: Var) -> Result<Var> {
    check_points(g, z, gauss.dim)?;
    let q = g.mahalanobis(z, gauss.mean, gauss.chol, Pairing::Paired)?;
    let logdet = gauss.half_log_det(g)?;
    let half_q = g.scale(q, T::lit(-0.5));
    let t = g.sub(half_q, logdet)?;
    Ok(g.shift(t, log_normalizer(gauss.dim)))
}

/// `μ_n + L_n ε_n` for `eps: [P, d]`.
pub fn reparam_sample<T: Scalar>(g: &Graph<T>, gauss: &FullCovGaussian, eps: Var) -> Result<Var> {
    let scaled = g.batch_matvec(gauss.chol, eps)?;
    g.add(gauss.mean, scaled)
}

/// Mixture of `M` full-covariance Gaussians with softmax weights.
#[derive(Debug, Clone, Copy)]
pub struct GaussianMixture {
    /// `[M]`.
    pub weight_logits: Var,
    pub components: FullCovGaussian,
}

impl GaussianMixture {
    pub fn new<T: Scalar>(g: &Graph<T>, weight_logits: Var, components: FullCovGaussian) -> Result<Self> {
        if g.shape(weight_logits) != [components.count] {
            return Err(TensorError::shape(
                "mixture",
                &g.shape(weight_logits),
                &[components.count],
            ));
        }
        Ok(GaussianMixture {
            weight_logits,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.dim
    }
}

/// `ln w_k + log N_k(z_n)` for all pairs, shape `[N, M]`.
pub fn mixture_component_log_probs<T: Scalar>(
    g: &Graph<T>,
    m: &GaussianMixture,
    z: Var,
) -> Result<Var> {
    let c = &m.components;
    check_points(g, z, c.dim)?;
    let q = g.mahalanobis(z, c.mean, c.chol, Pairing::AllPairs)?;
    let logdet = c.half_log_det(g)?;
    let half_q = g.scale(q, T::lit(-0.5));
    let t = g.sub(half_q, logdet)?;
    let comp = g.shift(t, log_normalizer(c.dim));
    let logw = g.log_softmax(m.weight_logits, 0)?;
    g.add(comp, logw)
}

/// `log Σ_k w_k N_k(z_n)` for `z: [N, d]` → `[N]`.
pub fn mixture_log_prob<T: Scalar>(g: &Graph<T>, m: &GaussianMixture, z: Var) -> Result<Var> {
    let terms = mixture_component_log_probs(g, m, z)?;
    g.logsumexp(terms, 1)
}

/// `q(y|z) = Σ_k π_k(z) softmax(A_k z + b_k)`.
///
/// Component logits for all `K` components come from one affine map with
/// `comp_weight: [d, K·C]`, `comp_bias: [K·C]` (component-major). The
/// mixture logits are `z·W + c` with `mix_weight: [d, K]`, or the constant
/// `c` alone when `mix_weight` is `None`.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalMixtureDecoder {
    pub mix_weight: Option<Var>,
    pub mix_bias: Var,
    pub comp_weight: Var,
    pub comp_bias: Var,
    pub components: usize,
    pub classes: usize,
}

/// Class log-probabilities `[N, C]` for latent points `z: [N, d]`.
pub fn decoder_log_probs<T: Scalar>(
    g: &Graph<T>,
    dec: &CategoricalMixtureDecoder,
    z: Var,
) -> Result<Var> {
    let n = g.shape(z)[0];
    let (k, c) = (dec.components, dec.classes);
    let mix_logits = match dec.mix_weight {
        Some(w) => g.affine(z, w, dec.mix_bias)?,
        None => {
            let zeros = g.constant(Tensor::zeros(&[n, k]));
            g.add(zeros, dec.mix_bias)?
        }
    };
    let log_mix = g.log_softmax(mix_logits, 1)?;
    let logits = g.affine(z, dec.comp_weight, dec.comp_bias)?;
    let logits = g.reshape(logits, &[n, k, c])?;
    let log_comp = g.log_softmax(logits, 2)?;
    let log_mix = g.repeat_last(log_mix, c)?;
    let joint = g.add(log_comp, log_mix)?;
    g.logsumexp(joint, 1)
}

/// Reparameterized samples from a batch of encodings and their per-sample
/// log density ratios against the marginal.
#[derive(Debug, Clone, Copy)]
pub struct RateSamples {
    /// `[B·S, d]`, instance-major.
    pub z: Var,
    /// `log e(z|x) − log m(z)` per sample, `[B·S]`.
    pub log_ratio: Var,
    /// `log m(z)` per sample, `[B·S]`.
    pub marginal_log_prob: Var,
    /// Monte Carlo rate per instance, `[B]`.
    pub rate: Var,
}

/// Draws `S` samples per encoding from `eps: [B·S, d]` (instance-major) and
/// estimates `KL[e(z|x) ‖ m(z)]` per instance by the sample mean of the log
/// density ratio.
pub fn rate_samples<T: Scalar>(
    g: &Graph<T>,
    enc: &FullCovGaussian,
    m: &GaussianMixture,
    eps: Var,
    samples: usize,
) -> Result<RateSamples> {
    if samples == 0 {
        return Err(TensorError::invalid("rate_estimate", "need at least one sample"));
    }
    if m.dim() != enc.dim {
        return Err(TensorError::shape("rate_estimate", &[enc.dim], &[m.dim()]));
    }
    let b = enc.count;
    let expected = [b * samples, enc.dim];
    if g.shape(eps) != expected {
        return Err(TensorError::shape("rate_estimate", &g.shape(eps), &expected));
    }
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, samples)).collect();
    let rep = enc.gather(g, &idx)?;
    let z = reparam_sample(g, &rep, eps)?;
    let log_e = gaussian_log_prob(g, &rep, z)?;
    let log_m = mixture_log_prob(g, m, z)?;
    let log_ratio = g.sub(log_e, log_m)?;
    let per = g.reshape(log_ratio, &[b, samples])?;
    let total = g.sum(per, Some(1))?;
    let rate = g.scale(total, T::one() / T::from_count(samples));
    Ok(RateSamples {
        z,
        log_ratio,
        marginal_log_prob: log_m,
        rate,
    })
}

/// Monte Carlo rate per instance, `[B]`.
pub fn rate_estimate<T: Scalar>(
    g: &Graph<T>,
    enc: &FullCovGaussian,
    m: &GaussianMixture,
    eps: Var,
    samples: usize,
) -> Result<Var> {
    Ok(rate_samples(g, enc, m, eps, samples)?.rate)
}
