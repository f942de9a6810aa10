//! Variational Information Bottleneck classifiers and the uncertainty
//! signals derived from them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common case.

pub mod data;
pub mod diff;
pub mod distributions;
pub mod metrics;
pub mod model;
pub mod modelfile;
pub mod parallel;
pub mod rng;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type Tensor64 = diff::Tensor<f64>;
pub type Tensor32 = diff::Tensor<f32>;
pub type Graph64 = diff::Graph<f64>;
pub type Graph32 = diff::Graph<f32>;
pub type VibModel64 = model::VibModel<f64>;
pub type VibModel32 = model::VibModel<f32>;
pub type BaselineModel64 = model::BaselineModel<f64>;
pub type BaselineModel32 = model::BaselineModel<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ImageDataset64 = data::ImageDataset<f64>;
pub type ImageDataset32 = data::ImageDataset<f32>;
