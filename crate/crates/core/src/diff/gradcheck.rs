//! Central finite-difference check of graph gradients.

use super::graph::{Graph, Var};
use super::tensor::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    /// Maximum relative error over the entries of each parameter.
    pub max_rel_error: Vec<T>,
    pub tolerance: T,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> T {
        self.max_rel_error.iter().copied().fold(T::zero(), T::max)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    (a - b).abs() / a.abs().max(b.abs()).max(T::lit(1e-8))
}

fn evaluate<T: Scalar, F>(f: &F, params: &[Tensor<T>]) -> Result<T, TensorError>
where
    F: Fn(&Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&g, &vars)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(TensorError::invalid("grad_check", "function must return a scalar"));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar `f` at `params` against
/// central differences with the given `step`. `f` must be deterministic.
pub fn grad_check<T: Scalar, F>(
    f: F,
    params: &[Tensor<T>],
    step: T,
    tolerance: T,
) -> Result<GradCheckReport<T>, TensorError>
where
    F: Fn(&Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    if step <= T::zero() {
        return Err(TensorError::invalid("grad_check", "step must be positive"));
    }
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let two_h = step + step;
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst = T::zero();
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = evaluate(&f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let down = evaluate(&f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / two_h;
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error,
        tolerance,
    })
}
