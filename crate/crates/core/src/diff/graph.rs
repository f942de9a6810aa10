//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes created from [`Graph::param`] are tracked; anything computed from
//! a tracked node is tracked too, and [`Graph::backward`] fills gradients for
//! all tracked nodes reachable from the root. Constants carry no gradient.
//!
//! Broadcasting: `add`, `sub` and `mul` accept a right operand whose shape is
//! either equal to the left shape or equal to the left shape with its leading
//! axis removed, in which case it is repeated along that axis. No other op
//! broadcasts.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{Tensor, TensorError};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Graph::mahalanobis`] pairs points with Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Point `n` against Gaussian `n`; output `[N]`.
    Paired,
    /// Every point against every Gaussian; output `[N, P]`.
    AllPairs,
}

enum Op<T> {
    Leaf,
    Add(Var, Var, bool),
    Sub(Var, Var, bool),
    Mul(Var, Var, bool),
    Neg(Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var, Option<usize>),
    LogSumExp(Var, usize),
    LogSoftmax(Var, usize),
    Reshape(Var),
    Narrow(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    Pick(Var, Rc<[usize]>),
    RepeatLast(Var),
    TrilFrom(Var, Var),
    BatchMatVec(Var, Var),
    Mahalanobis(Var, Var, Var, Pairing),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

type Result<V> = std::result::Result<V, TensorError>;

/// `(outer, len, inner)` view of `shape` around `axis`.
fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Squared norm of `L⁻¹ r` by forward substitution; writes `L⁻¹ r` into `y`.
#[inline]
fn forward_solve<T: Scalar>(chol: &[T], r: &[T], y: &mut [T]) -> T {
    let d = r.len();
    let mut q = T::zero();
    for i in 0..d {
        let mut s = r[i];
        for j in 0..i {
            s -= chol[i * d + j] * y[j];
        }
        y[i] = s / chol[i * d + i];
        q += y[i] * y[i];
    }
    q
}

/// Solves `Lᵀ x = b` in place.
#[inline]
fn backward_solve<T: Scalar>(chol: &[T], b: &mut [T]) {
    let d = b.len();
    for i in (0..d).rev() {
        let mut s = b[i];
        for j in i + 1..d {
            s -= chol[j * d + i] * b[j];
        }
        b[i] = s / chol[i * d + i];
    }
}

/// `c = a · b` with explicit strides; `c` is dense `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return c;
    }
    if k == 0 {
        return c;
    }
    // SAFETY: extents are validated by the callers' shape checks and `c` is
    // a fresh buffer of m*n elements.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].tracked)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect
    /// to `v`, or `None` if `v` is untracked or unreachable.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    /// Like [`grad`](Self::grad) but zeros for unreachable tracked nodes.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    // ---- elementwise -------------------------------------------------

    fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
        if a == b {
            Ok(false)
        } else if !a.is_empty() && &a[1..] == b {
            Ok(true)
        } else {
            Err(TensorError::shape(op, a, b))
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(Var, Var, bool) -> Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bcast = Self::broadcast_kind(name, av.shape(), bv.shape())?;
        let bd = bv.data();
        let data: Vec<T> = if bcast {
            let w = bd.len();
            if w == 0 {
                Vec::new()
            } else {
                av.data()
                    .chunks(w)
                    .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                    .collect()
            }
        } else {
            av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, mk(a, b, bcast), self.tracked(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, self.tracked(&[a]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() || x.is_nan() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    /// Natural log; the caller keeps inputs positive.
    pub fn log(&self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ---- linear algebra ---------------------------------------------

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1));
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), self.tracked(&[a, b])))
    }

    /// `x · W + b` with `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(TensorError::shape("affine", sx, sw));
        }
        if bv.shape() != [sw[1]] {
            return Err(TensorError::shape("affine", sw, bv.shape()));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut data = gemm(m, k, n, xv.data(), (k, 1), wv.data(), (n, 1));
        if n > 0 {
            for row in data.chunks_mut(n) {
                for (c, &bias) in row.iter_mut().zip(bv.data()) {
                    *c += bias;
                }
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Affine(x, w, b), self.tracked(&[x, w, b])))
    }

    /// `[P, p, q] × [P, q] → [P, p]`, one matrix-vector product per row.
    pub fn batch_matvec(&self, a: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(a), self.value(x));
        let (sa, sx) = (av.shape(), xv.shape());
        if sa.len() != 3 || sx.len() != 2 || sa[0] != sx[0] || sa[2] != sx[1] {
            return Err(TensorError::shape("batch_matvec", sa, sx));
        }
        let (p, rows, cols) = (sa[0], sa[1], sa[2]);
        let mut data = vec![T::zero(); p * rows];
        for n in 0..p {
            let m = &av.data()[n * rows * cols..(n + 1) * rows * cols];
            let v = &xv.data()[n * cols..(n + 1) * cols];
            for i in 0..rows {
                let mut s = T::zero();
                for j in 0..cols {
                    s += m[i * cols + j] * v[j];
                }
                data[n * rows + i] = s;
            }
        }
        let out = Tensor::new(vec![p, rows], data)?;
        Ok(self.push(out, Op::BatchMatVec(a, x), self.tracked(&[a, x])))
    }

    /// Lower-triangular `[P, d, d]` from a positive diagonal `[P, d]` and the
    /// strictly-lower entries `[P, d(d-1)/2]` in row-major order
    /// `(1,0), (2,0), (2,1), …`.
    pub fn tril_from(&self, diag: Var, off: Var) -> Result<Var> {
        let (dv, ov) = (self.value(diag), self.value(off));
        let (sd, so) = (dv.shape(), ov.shape());
        if sd.len() != 2 || so.len() != 2 || sd[0] != so[0] || so[1] != sd[1] * (sd[1].saturating_sub(1)) / 2 {
            return Err(TensorError::shape("tril_from", sd, so));
        }
        let (p, d, w) = (sd[0], sd[1], so[1]);
        let mut data = vec![T::zero(); p * d * d];
        for n in 0..p {
            let m = &mut data[n * d * d..(n + 1) * d * d];
            let mut k = 0;
            for i in 0..d {
                for j in 0..i {
                    m[i * d + j] = ov.data()[n * w + k];
                    k += 1;
                }
                m[i * d + i] = dv.data()[n * d + i];
            }
        }
        let out = Tensor::new(vec![p, d, d], data)?;
        Ok(self.push(out, Op::TrilFrom(diag, off), self.tracked(&[diag, off])))
    }

    /// Squared Mahalanobis norms `‖L⁻¹(z − μ)‖²` for points `z: [N, d]`,
    /// means `[P, d]` and lower Cholesky factors `[P, d, d]`. Entries above
    /// the diagonal are ignored.
    pub fn mahalanobis(&self, z: Var, mean: Var, chol: Var, pairing: Pairing) -> Result<Var> {
        let (zv, mv, lv) = (self.value(z), self.value(mean), self.value(chol));
        let (sz, sm, sl) = (zv.shape(), mv.shape(), lv.shape());
        if sz.len() != 2 || sm.len() != 2 || sz[1] != sm[1] {
            return Err(TensorError::shape("mahalanobis", sz, sm));
        }
        let (n, d, p) = (sz[0], sz[1], sm[0]);
        if sl != [p, d, d] {
            return Err(TensorError::shape("mahalanobis", sm, sl));
        }
        if pairing == Pairing::Paired && n != p {
            return Err(TensorError::shape("mahalanobis", sz, sm));
        }
        let mut r = vec![T::zero(); d];
        let mut y = vec![T::zero(); d];
        let mut kernel = |i: usize, k: usize| {
            let zi = &zv.data()[i * d..(i + 1) * d];
            let mk = &mv.data()[k * d..(k + 1) * d];
            for t in 0..d {
                r[t] = zi[t] - mk[t];
            }
            forward_solve(&lv.data()[k * d * d..(k + 1) * d * d], &r, &mut y)
        };
        let (shape, data) = match pairing {
            Pairing::Paired => (vec![n], (0..n).map(|i| kernel(i, i)).collect()),
            Pairing::AllPairs => {
                let mut data = Vec::with_capacity(n * p);
                for i in 0..n {
                    for k in 0..p {
                        data.push(kernel(i, k));
                    }
                }
                (vec![n, p], data)
            }
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Mahalanobis(z, mean, chol, pairing),
            self.tracked(&[z, mean, chol]),
        ))
    }

    // ---- reductions ----------------------------------------------------

    fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
        if axis >= shape.len() {
            Err(TensorError::invalid(op, format!("axis {} out of range for {:?}", axis, shape)))
        } else {
            Ok(())
        }
    }

    /// Sum over `axis`, or over everything (scalar result) for `None`.
    pub fn sum(&self, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let out = match axis {
            None => Tensor::scalar(xv.data().iter().copied().sum()),
            Some(axis) => {
                Self::check_axis("sum", xv.shape(), axis)?;
                let (outer, len, inner) = axis_view(xv.shape(), axis);
                let mut data = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &xv.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Tensor::new(without_axis(xv.shape(), axis), data)?
            }
        };
        Ok(self.push(out, Op::Sum(x, axis), self.tracked(&[x])))
    }

    /// Mean of all entries.
    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let s = self.sum(x, None)?;
        Ok(self.scale(s, T::one() / T::from_count(n)))
    }

    /// `ln Σ exp` over `axis` using max subtraction.
    pub fn logsumexp(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        Self::check_axis("logsumexp", xv.shape(), axis)?;
        let (outer, len, inner) = axis_view(xv.shape(), axis);
        if len == 0 {
            return Err(TensorError::invalid("logsumexp", "empty axis"));
        }
        let mut data = vec![T::zero(); outer * inner];
        let src = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                data[o * inner + i] = if m == T::neg_infinity() {
                    m
                } else {
                    let s: T = (0..len).map(|l| (at(l) - m).exp()).sum();
                    m + s.ln()
                };
            }
        }
        let out = Tensor::new(without_axis(xv.shape(), axis), data)?;
        Ok(self.push(out, Op::LogSumExp(x, axis), self.tracked(&[x])))
    }

    /// `x − logsumexp(x)` along `axis`, keeping the shape.
    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        Self::check_axis("log_softmax", xv.shape(), axis)?;
        let (outer, len, inner) = axis_view(xv.shape(), axis);
        if len == 0 {
            return Err(TensorError::invalid("log_softmax", "empty axis"));
        }
        let src = xv.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[idx(l)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (src[idx(l)] - m).exp()).sum();
                let lse = m + s.ln();
                for l in 0..len {
                    data[idx(l)] = src[idx(l)] - lse;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LogSoftmax(x, axis), self.tracked(&[x])))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.tracked(&[x])))
    }

    /// Slice `start..start+len` of the last axis.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let width = *s
            .last()
            .ok_or_else(|| TensorError::invalid("narrow", "scalar input"))?;
        if start + len > width {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {}..{} exceeds last axis of {:?}", start, start + len, s),
            ));
        }
        let data: Vec<T> = if width == 0 {
            Vec::new()
        } else {
            xv.data()
                .chunks(width)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect()
        };
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Narrow(x, start), self.tracked(&[x])))
    }

    /// Rows of `x` (leading axis) selected by `idx`, repeats allowed.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.is_empty() {
            return Err(TensorError::invalid("gather_rows", "scalar input"));
        }
        let rows = s[0];
        let w = xv.len().checked_div(rows).unwrap_or(0);
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::invalid(
                    "gather_rows",
                    format!("row {} out of range for {:?}", i, s),
                ));
            }
            data.extend_from_slice(&xv.data()[i * w..(i + 1) * w]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::GatherRows(x, idx.into()), self.tracked(&[x])))
    }

    /// `out[n] = x[n, idx[n]]` for `x: [N, C]`.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(TensorError::shape("pick", s, &[idx.len()]));
        }
        let c = s[1];
        let mut data = Vec::with_capacity(idx.len());
        for (n, &k) in idx.iter().enumerate() {
            if k >= c {
                return Err(TensorError::invalid("pick", format!("class {} out of range {}", k, c)));
            }
            data.push(xv.data()[n * c + k]);
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Pick(x, idx.into()), self.tracked(&[x])))
    }

    /// Appends a trailing axis of length `n`, repeating each entry.
    pub fn repeat_last(&self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<T> = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let mut shape = xv.shape().to_vec();
        shape.push(n);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::RepeatLast(x), self.tracked(&[x])))
    }

    // ---- backward ------------------------------------------------------

    /// Propagates gradients from a one-element `root` to every tracked node.
    /// Replaces gradients from any previous call. Nodes used more than once
    /// accumulate their contributions.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].tracked {
            grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.tracked {
                backprop(&nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    contrib: impl FnOnce() -> Tensor<T>,
) {
    if !nodes[v.0].tracked {
        return;
    }
    let c = contrib();
    match &mut grads[v.0] {
        Some(g) => g.add_assign_slice(c.data()),
        slot @ None => *slot = Some(c),
    }
}

/// Sum of rows of `data` viewed as chunks of `width`.
fn reduce_rows<T: Scalar>(data: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    if width == 0 {
        return out;
    }
    for row in data.chunks(width) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |v: Var| &*nodes[v.0].value;
    let gd = g.data();
    let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data).expect("grad shape");
    let elementwise = |x: Var, f: &dyn Fn(T, T) -> T| {
        let xd = val(x).data();
        like(x, gd.iter().zip(xd).map(|(&g, &x)| f(g, x)).collect())
    };
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b, bcast) | Op::Sub(a, b, bcast) => {
            let negate = matches!(node.op, Op::Sub(..));
            accumulate(nodes, grads, a, || g.clone());
            accumulate(nodes, grads, b, || {
                let mut d = if bcast { reduce_rows(gd, val(b).len()) } else { gd.to_vec() };
                if negate {
                    d.iter_mut().for_each(|x| *x = -*x);
                }
                like(b, d)
            });
        }
        Op::Mul(a, b, bcast) => {
            let (ad, bd) = (val(a).data(), val(b).data());
            let w = bd.len().max(1);
            accumulate(nodes, grads, a, || {
                like(a, gd.iter().enumerate().map(|(i, &g)| g * bd[if bcast { i % w } else { i }]).collect())
            });
            accumulate(nodes, grads, b, || {
                let prod: Vec<T> = gd.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                like(b, if bcast { reduce_rows(&prod, bd.len()) } else { prod })
            });
        }
        Op::Neg(a) => accumulate(nodes, grads, a, || g.map(|x| -x)),
        Op::Scale(a, c) => accumulate(nodes, grads, a, || g.map(|x| x * c)),
        Op::Shift(a) | Op::Reshape(a) => accumulate(nodes, grads, a, || like(a, gd.to_vec())),
        Op::Relu(a) => accumulate(nodes, grads, a, || {
            elementwise(a, &|g, x| if x > T::zero() { g } else { T::zero() })
        }),
        Op::Softplus(a) => accumulate(nodes, grads, a, || elementwise(a, &|g, x| g * sigmoid(x))),
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, a, || like(a, gd.iter().zip(y).map(|(&g, &y)| g * y).collect()))
        }
        Op::Log(a) => accumulate(nodes, grads, a, || elementwise(a, &|g, x| g / x)),
        Op::Square(a) => accumulate(nodes, grads, a, || {
            elementwise(a, &|g, x| g * (x + x))
        }),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            accumulate(nodes, grads, a, || like(a, gemm(m, n, k, gd, (n, 1), bv.data(), (1, n))));
            accumulate(nodes, grads, b, || like(b, gemm(k, m, n, av.data(), (1, k), gd, (n, 1))));
        }
        Op::Affine(x, w, b) => {
            let (xv, wv) = (val(x), val(w));
            let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
            accumulate(nodes, grads, x, || like(x, gemm(m, n, k, gd, (n, 1), wv.data(), (1, n))));
            accumulate(nodes, grads, w, || like(w, gemm(k, m, n, xv.data(), (1, k), gd, (n, 1))));
            accumulate(nodes, grads, b, || like(b, reduce_rows(gd, n)));
        }
        Op::Sum(x, axis) => accumulate(nodes, grads, x, || {
            let xs = val(x).shape();
            match axis {
                None => Tensor::full(xs, gd[0]),
                Some(axis) => {
                    let (outer, len, inner) = axis_view(xs, axis);
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        for _ in 0..len {
                            d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    like(x, d)
                }
            }
        }),
        Op::LogSumExp(x, axis) => accumulate(nodes, grads, x, || {
            let xv = val(x);
            let (outer, len, inner) = axis_view(xv.shape(), axis);
            let out = node.value.data();
            let mut d = vec![T::zero(); xv.len()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let at = (o * len + l) * inner + i;
                        let r = o * inner + i;
                        d[at] = if out[r] == T::neg_infinity() {
                            T::zero()
                        } else {
                            gd[r] * (xv.data()[at] - out[r]).exp()
                        };
                    }
                }
            }
            like(x, d)
        }),
        Op::LogSoftmax(x, axis) => accumulate(nodes, grads, x, || {
            let y = node.value.data();
            let (outer, len, inner) = axis_view(node.value.shape(), axis);
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let total: T = (0..len).map(|l| gd[idx(l)]).sum();
                    for l in 0..len {
                        d[idx(l)] = gd[idx(l)] - y[idx(l)].exp() * total;
                    }
                }
            }
            like(x, d)
        }),
        Op::Narrow(x, start) => accumulate(nodes, grads, x, || {
            let xv = val(x);
            let width = *xv.shape().last().unwrap();
            let len = *node.value.shape().last().unwrap();
            let mut d = vec![T::zero(); xv.len()];
            if len > 0 {
                for (row, gr) in d.chunks_mut(width).zip(gd.chunks(len)) {
                    row[start..start + len].copy_from_slice(gr);
                }
            }
            like(x, d)
        }),
        Op::GatherRows(x, ref idx) => accumulate(nodes, grads, x, || {
            let xv = val(x);
            let rows = xv.shape()[0];
            let w = xv.len().checked_div(rows).unwrap_or(0);
            let mut d = vec![T::zero(); xv.len()];
            for (n, &i) in idx.iter().enumerate() {
                for t in 0..w {
                    d[i * w + t] += gd[n * w + t];
                }
            }
            like(x, d)
        }),
        Op::Pick(x, ref idx) => accumulate(nodes, grads, x, || {
            let xv = val(x);
            let c = xv.shape()[1];
            let mut d = vec![T::zero(); xv.len()];
            for (n, &k) in idx.iter().enumerate() {
                d[n * c + k] += gd[n];
            }
            like(x, d)
        }),
        Op::RepeatLast(x) => accumulate(nodes, grads, x, || {
            let n = *node.value.shape().last().unwrap();
            let d = if n == 0 {
                vec![T::zero(); val(x).len()]
            } else {
                gd.chunks(n).map(|c| c.iter().copied().sum()).collect()
            };
            like(x, d)
        }),
        Op::TrilFrom(diag, off) => {
            let d = val(diag).shape()[1];
            let p = val(diag).shape()[0];
            let w = val(off).shape()[1];
            accumulate(nodes, grads, diag, || {
                let mut out = vec![T::zero(); p * d];
                for n in 0..p {
                    for i in 0..d {
                        out[n * d + i] = gd[n * d * d + i * d + i];
                    }
                }
                like(diag, out)
            });
            accumulate(nodes, grads, off, || {
                let mut out = vec![T::zero(); p * w];
                for n in 0..p {
                    let mut k = 0;
                    for i in 0..d {
                        for j in 0..i {
                            out[n * w + k] = gd[n * d * d + i * d + j];
                            k += 1;
                        }
                    }
                }
                like(off, out)
            });
        }
        Op::BatchMatVec(a, x) => {
            let (av, xv) = (val(a), val(x));
            let (p, rows, cols) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            accumulate(nodes, grads, a, || {
                let mut out = vec![T::zero(); av.len()];
                for n in 0..p {
                    for i in 0..rows {
                        for j in 0..cols {
                            out[(n * rows + i) * cols + j] = gd[n * rows + i] * xv.data()[n * cols + j];
                        }
                    }
                }
                like(a, out)
            });
            accumulate(nodes, grads, x, || {
                let mut out = vec![T::zero(); xv.len()];
                for n in 0..p {
                    for i in 0..rows {
                        let gi = gd[n * rows + i];
                        for j in 0..cols {
                            out[n * cols + j] += av.data()[(n * rows + i) * cols + j] * gi;
                        }
                    }
                }
                like(x, out)
            });
        }
        Op::Mahalanobis(z, mean, chol, pairing) => {
            let (zv, mv, lv) = (val(z), val(mean), val(chol));
            let (n, d) = (zv.shape()[0], zv.shape()[1]);
            let p = mv.shape()[0];
            let mut gz = vec![T::zero(); zv.len()];
            let mut gm = vec![T::zero(); mv.len()];
            let mut gl = vec![T::zero(); lv.len()];
            let mut r = vec![T::zero(); d];
            let mut y = vec![T::zero(); d];
            let two = T::lit(2.0);
            let mut pair = |i: usize, k: usize, upstream: T| {
                let zi = &zv.data()[i * d..(i + 1) * d];
                let mk = &mv.data()[k * d..(k + 1) * d];
                let lk = &lv.data()[k * d * d..(k + 1) * d * d];
                for t in 0..d {
                    r[t] = zi[t] - mk[t];
                }
                forward_solve(lk, &r, &mut y);
                // dq/dy = 2y; dr = L⁻ᵀ dy; dL = −tril(dr yᵀ)
                let mut gr: Vec<T> = y.iter().map(|&v| two * upstream * v).collect();
                backward_solve(lk, &mut gr);
                for t in 0..d {
                    gz[i * d + t] += gr[t];
                    gm[k * d + t] -= gr[t];
                }
                for a in 0..d {
                    for b in 0..=a {
                        gl[k * d * d + a * d + b] -= gr[a] * y[b];
                    }
                }
            };
            match pairing {
                Pairing::Paired => (0..n).for_each(|i| pair(i, i, gd[i])),
                Pairing::AllPairs => {
                    for i in 0..n {
                        for k in 0..p {
                            pair(i, k, gd[i * p + k]);
                        }
                    }
                }
            }
            accumulate(nodes, grads, z, || like(z, gz));
            accumulate(nodes, grads, mean, || like(mean, gm));
            accumulate(nodes, grads, chol, || like(chol, gl));
        }
    }
}
