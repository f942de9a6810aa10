//! Monte Carlo rate against Gaussians with closed-form KL.

use rand::Rng;
use vib_core::diff::{Graph, Tensor};
use vib_core::distributions::{rate_samples, FullCovGaussian, GaussianMixture};
use vib_core::rng::{standard_normals, stream};

use super::oracles::{diagonal_gaussian_kl, mean_and_stderr};

#[derive(Debug, Clone)]
pub struct RateCheck {
    pub dim: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub exact: f64,
}

impl RateCheck {
    pub fn within(&self, stderrs: f64) -> bool {
        (self.estimate - self.exact).abs() <= stderrs * self.stderr
    }
}

fn diagonal_chol(var: &[f64]) -> Vec<f64> {
    let d = var.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        l[i * d + i] = var[i].sqrt();
    }
    l
}

/// Rate of `N(μ₁, diag σ₁²)` against the single-component marginal
/// `N(μ₂, diag σ₂²)` with `samples` draws keyed by `seed`.
pub fn rate_vs_closed_form(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64], samples: usize, seed: u64) -> RateCheck {
    let d = mu1.len();
    let g = Graph::new();
    let enc = FullCovGaussian::constant(&g, mu1, &diagonal_chol(var1)).unwrap();
    let comp = FullCovGaussian::constant(&g, mu2, &diagonal_chol(var2)).unwrap();
    let logits = g.constant(Tensor::zeros(&[1]));
    let marginal = GaussianMixture::new(&g, logits, comp).unwrap();
    let mut r = stream(seed, "rate-oracle", &[]);
    let eps = Tensor::new(vec![samples, d], standard_normals::<f64>(&mut r, samples * d)).unwrap();
    let eps = g.constant(eps);
    let rs = rate_samples(&g, &enc, &marginal, eps, samples).unwrap();
    let ratios = g.value(rs.log_ratio);
    let (_, stderr) = mean_and_stderr(ratios.data());
    RateCheck {
        dim: d,
        estimate: g.value(rs.rate).item(),
        stderr,
        exact: diagonal_gaussian_kl(mu1, var1, mu2, var2),
    }
}

/// A random diagonal case: means in `[-2, 2]`, variances in `[0.25, 4]`.
pub fn random_rate_check(rng: &mut impl Rng, dim: usize, samples: usize, seed: u64) -> RateCheck {
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..dim).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect() };
    let (mu1, mu2) = (draw(-2.0, 2.0), draw(-2.0, 2.0));
    let (v1, v2) = (draw(0.25, 4.0), draw(0.25, 4.0));
    rate_vs_closed_form(&mu1, &v1, &mu2, &v2, samples, seed)
}
