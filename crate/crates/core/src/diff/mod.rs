//! Minimal reverse-mode differentiation over dense tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Graph, Pairing, Var};
pub use tensor::{Tensor, TensorError};
