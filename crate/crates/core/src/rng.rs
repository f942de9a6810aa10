//! Keyed random streams.
//!
//! Each consumer draws from its own ChaCha stream whose key is derived from
//! `(seed, purpose, indices)`, so data splits, noise images, training noise
//! and evaluation noise never share state. Changing how many samples one
//! consumer draws leaves every other stream untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub mod purpose {
    pub const SPLIT: &str = "split";
    pub const SHUFFLE: &str = "shuffle";
    pub const INIT: &str = "init";
    pub const TRAIN_NOISE: &str = "train-noise";
    pub const EVAL_NOISE: &str = "eval-noise";
    pub const DEV_EVAL: &str = "dev-eval";
    pub const UNIFORM_IMAGES: &str = "uniform-images";
}

pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"vib-rng-v1");
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// A 64-bit seed derived from a keyed stream.
pub fn derive_seed(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    stream(seed, purpose, indices).random()
}

pub fn standard_normals<T: Scalar>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Noise for instance `index` of an evaluation keyed by `seed`:
/// `samples × dim` standard normals, sample-major.
pub fn eval_noise<T: Scalar>(seed: u64, index: u64, samples: usize, dim: usize) -> Vec<T> {
    standard_normals(&mut stream(seed, purpose::EVAL_NOISE, &[index]), samples * dim)
}
