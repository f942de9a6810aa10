mod common;

use common::rate::{random_rate_check, rate_vs_closed_form};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vib_core::diff::{Graph, Tensor, Var};
use vib_core::distributions::{
    decoder_log_probs, gaussian_log_prob, mixture_component_log_probs, mixture_log_prob,
    CategoricalMixtureDecoder, FullCovGaussian, GaussianMixture,
};
use vib_core::rng::{standard_normals, stream};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn constant(g: &Graph<f64>, shape: &[usize], data: Vec<f64>) -> Var {
    g.constant(Tensor::new(shape.to_vec(), data).unwrap())
}

fn random_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// A random lower-triangular factor with diagonal in `[0.5, 1.5]`.
fn random_chol(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..i {
            l[i * d + j] = rng.random::<f64>() - 0.5;
        }
        l[i * d + i] = 0.5 + rng.random::<f64>();
    }
    l
}

/// Mixture of full-covariance components given as `(mean, chol)` pairs.
fn mixture(g: &Graph<f64>, logits: &[f64], comps: &[(Vec<f64>, Vec<f64>)]) -> GaussianMixture {
    let d = comps[0].0.len();
    let means: Vec<f64> = comps.iter().flat_map(|c| c.0.clone()).collect();
    let diag: Vec<f64> = comps.iter().flat_map(|c| (0..d).map(|i| c.1[i * d + i]).collect::<Vec<_>>()).collect();
    let off: Vec<f64> = comps
        .iter()
        .flat_map(|c| (0..d).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| c.1[i * d + j]).collect::<Vec<_>>())
        .collect();
    let m = comps.len();
    let fc = FullCovGaussian::from_factors(
        g,
        constant(g, &[m, d], means),
        constant(g, &[m, d], diag),
        constant(g, &[m, d * (d - 1) / 2], off),
    )
    .unwrap();
    GaussianMixture::new(g, constant(g, &[m], logits.to_vec()), fc).unwrap()
}

/// Density of `N(μ, L Lᵀ)` at `z` by forward substitution, in plain f64.
fn naive_density(mean: &[f64], chol: &[f64], z: &[f64]) -> f64 {
    let d = mean.len();
    let mut u = vec![0.0; d];
    let mut det = 1.0;
    for i in 0..d {
        let mut s = z[i] - mean[i];
        for j in 0..i {
            s -= chol[i * d + j] * u[j];
        }
        u[i] = s / chol[i * d + i];
        det *= chol[i * d + i];
    }
    let q: f64 = u.iter().map(|x| x * x).sum();
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * det)
}

fn point(g: &Graph<f64>, z: &[f64]) -> Var {
    constant(g, &[1, z.len()], z.to_vec())
}

#[test]
fn gaussian_peaks() {
    let g = Graph::new();
    let eye3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let n3 = FullCovGaussian::constant(&g, &[0.0; 3], &eye3).unwrap();
    let lp = gaussian_log_prob(&g, &n3, point(&g, &[0.0; 3])).unwrap();
    assert!((g.value(lp).item() + 1.5 * LN_2PI).abs() < 1e-14);
    assert!((g.value(lp).item() + 2.756_815_599_614_018).abs() < 1e-12);
}

#[test]
fn gaussian_density_integrates_to_one() {
    // Importance sampling from the wider proposal N(0, 4I): E_q[p/q] = 1.
    let g = Graph::new();
    let mean = [0.3, -0.2];
    let chol = [1.0, 0.0, 0.4, 0.7];
    let target = FullCovGaussian::constant(&g, &mean, &chol).unwrap();
    let n = 100_000;
    let mut r = stream(3, "importance", &[]);
    let eps: Vec<f64> = standard_normals(&mut r, 2 * n);
    let z: Vec<f64> = eps.iter().map(|e| 2.0 * e).collect();
    let idx = vec![0; n];
    let rep = target.gather(&g, &idx).unwrap();
    let lp = gaussian_log_prob(&g, &rep, constant(&g, &[n, 2], z.clone())).unwrap();
    let w: Vec<f64> = g
        .value(lp)
        .data()
        .iter()
        .zip(z.chunks(2))
        .map(|(lp, z)| (lp - naive_density(&[0.0, 0.0], &[2.0, 0.0, 0.0, 2.0], z).ln()).exp())
        .collect();
    let (mean_w, se) = common::oracles::mean_and_stderr(&w);
    assert!((mean_w - 1.0).abs() <= 3.0 * se, "{} ± {}", mean_w, se);
}

#[test]
fn single_component_mixture_is_the_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let (mean, chol) = (random_vec(&mut rng, 3, -1.0, 1.0), random_chol(&mut rng, 3));
    let m = mixture(&g, &[0.7], &[(mean.clone(), chol.clone())]);
    let gauss = FullCovGaussian::constant(&g, &mean, &chol).unwrap();
    let z = random_vec(&mut rng, 3, -1.0, 1.0);
    let a = g.value(mixture_log_prob(&g, &m, point(&g, &z)).unwrap()).item();
    let b = g.value(gaussian_log_prob(&g, &gauss, point(&g, &z)).unwrap()).item();
    assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
}

#[test]
fn identical_components_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::new();
    let c = (random_vec(&mut rng, 3, -1.0, 1.0), random_chol(&mut rng, 3));
    let one = mixture(&g, &[0.0], std::slice::from_ref(&c));
    let two = mixture(&g, &[2.5, -1.0], &[c.clone(), c]);
    for _ in 0..20 {
        let z = point(&g, &random_vec(&mut rng, 3, -2.0, 2.0));
        let a = g.value(mixture_log_prob(&g, &one, z).unwrap()).item();
        let b = g.value(mixture_log_prob(&g, &two, z).unwrap()).item();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mixture_matches_naive_sum_and_bounds_each_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let g = Graph::new();
        let comps: Vec<(Vec<f64>, Vec<f64>)> =
            (0..3).map(|_| (random_vec(&mut rng, 3, -1.5, 1.5), random_chol(&mut rng, 3))).collect();
        let logits = random_vec(&mut rng, 3, -1.0, 1.0);
        let m = mixture(&g, &logits, &comps);
        let z = random_vec(&mut rng, 3, -2.0, 2.0);
        let lp = g.value(mixture_log_prob(&g, &m, point(&g, &z)).unwrap()).item();
        let norm: f64 = logits.iter().map(|l| l.exp()).sum();
        let terms: Vec<f64> = comps
            .iter()
            .zip(&logits)
            .map(|((mu, l), w)| w.exp() / norm * naive_density(mu, l, &z))
            .collect();
        let naive = terms.iter().sum::<f64>().ln();
        assert!((lp - naive).abs() < 1e-10, "{} vs {}", lp, naive);
        let per = g.value(mixture_component_log_probs(&g, &m, point(&g, &z)).unwrap());
        for &t in per.data() {
            assert!(lp >= t);
        }
    }
}

struct DecoderParams {
    mix_weight: Option<Vec<f64>>,
    mix_bias: Vec<f64>,
    comp_weight: Vec<f64>,
    comp_bias: Vec<f64>,
    k: usize,
    c: usize,
    d: usize,
}

impl DecoderParams {
    fn random(rng: &mut impl Rng, d: usize, k: usize, c: usize, affine: bool) -> Self {
        DecoderParams {
            mix_weight: affine.then(|| random_vec(rng, d * k, -2.0, 2.0)),
            mix_bias: random_vec(rng, k, -2.0, 2.0),
            comp_weight: random_vec(rng, d * k * c, -2.0, 2.0),
            comp_bias: random_vec(rng, k * c, -2.0, 2.0),
            k,
            c,
            d,
        }
    }

    fn log_probs(&self, z: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let (d, k, c) = (self.d, self.k, self.c);
        let dec = CategoricalMixtureDecoder {
            mix_weight: self.mix_weight.as_ref().map(|w| constant(&g, &[d, k], w.clone())),
            mix_bias: constant(&g, &[k], self.mix_bias.clone()),
            comp_weight: constant(&g, &[d, k * c], self.comp_weight.clone()),
            comp_bias: constant(&g, &[k * c], self.comp_bias.clone()),
            components: k,
            classes: c,
        };
        let out = decoder_log_probs(&g, &dec, point(&g, z)).unwrap();
        g.value(out).data().to_vec()
    }

    /// `Σ_k π_k(z) softmax(A_k z + b_k)` in probability space.
    fn direct(&self, z: &[f64]) -> Vec<f64> {
        let (d, k, c) = (self.d, self.k, self.c);
        let softmax = |v: Vec<f64>| {
            let s: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / s).collect::<Vec<f64>>()
        };
        let mix = softmax(
            (0..k)
                .map(|j| {
                    let zw: f64 = match &self.mix_weight {
                        Some(w) => (0..d).map(|i| z[i] * w[i * k + j]).sum(),
                        None => 0.0,
                    };
                    zw + self.mix_bias[j]
                })
                .collect(),
        );
        let mut p = vec![0.0; c];
        for (j, &w) in mix.iter().enumerate() {
            let logits = (0..c)
                .map(|y| (0..d).map(|i| z[i] * self.comp_weight[i * k * c + j * c + y]).sum::<f64>() + self.comp_bias[j * c + y])
                .collect();
            for (y, q) in softmax(logits).into_iter().enumerate() {
                p[y] += w * q;
            }
        }
        p
    }
}

#[test]
fn zero_decoder_is_uniform() {
    let dec = DecoderParams {
        mix_weight: Some(vec![0.0; 3]),
        mix_bias: vec![0.0],
        comp_weight: vec![0.0; 3 * 4],
        comp_bias: vec![0.0; 4],
        k: 1,
        c: 4,
        d: 3,
    };
    for lp in dec.log_probs(&[0.3, -2.0, 5.0]) {
        assert!((lp + 4f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn identical_decoder_components_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let single = DecoderParams::random(&mut rng, 2, 1, 3, true);
    // duplicate the single component, component-major
    let mut cw = vec![0.0; 2 * 6];
    for i in 0..2 {
        for y in 0..3 {
            cw[i * 6 + y] = single.comp_weight[i * 3 + y];
            cw[i * 6 + 3 + y] = single.comp_weight[i * 3 + y];
        }
    }
    let twice = DecoderParams {
        mix_weight: Some(random_vec(&mut rng, 4, -1.0, 1.0)),
        mix_bias: vec![0.4, -0.9],
        comp_weight: cw,
        comp_bias: [single.comp_bias.clone(), single.comp_bias.clone()].concat(),
        k: 2,
        c: 3,
        d: 2,
    };
    let z = [0.7, -1.1];
    for (a, b) in single.log_probs(&z).iter().zip(twice.log_probs(&z)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decoder_matches_probability_space_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for affine in [true, false] {
        for _ in 0..50 {
            let dec = DecoderParams::random(&mut rng, 2, 2, 3, affine);
            let z = random_vec(&mut rng, 2, -2.0, 2.0);
            for (lp, p) in dec.log_probs(&z).iter().zip(dec.direct(&z)) {
                assert!((lp.exp() - p).abs() < 1e-12, "{} vs {}", lp.exp(), p);
            }
        }
    }
}

#[test]
fn decoder_outputs_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let dec = DecoderParams::random(&mut rng, 3, 5, 10, i % 2 == 0);
        let z = random_vec(&mut rng, 3, -3.0, 3.0);
        let p: Vec<f64> = dec.log_probs(&z).iter().map(|l| l.exp()).collect();
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rate_against_shifted_unit_gaussian() {
    let r = rate_vs_closed_form(&[0.0], &[1.0], &[1.0], &[1.0], 100_000, 7);
    assert!((r.exact - 0.5).abs() < 1e-15);
    assert!(r.within(3.0), "{:?}", r);
}

#[test]
fn rate_against_wider_gaussian() {
    let r = rate_vs_closed_form(&[0.0], &[0.25], &[0.0], &[1.0], 100_000, 8);
    assert!((r.exact - 0.318_147_180_559_945_3).abs() < 1e-12, "{}", r.exact);
    assert!(r.within(3.0), "{:?}", r);
}

#[test]
fn rate_matches_closed_form_on_random_diagonal_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..20 {
        let dim = if i % 2 == 0 { 1 } else { 3 };
        let r = random_rate_check(&mut rng, dim, 100_000, 100 + i);
        assert!(r.within(3.0), "case {}: {:?}", i, r);
        assert!(r.exact >= 0.0);
    }
}
