//! Dense row-major tensors.
//!
//! [`Tensor`] is the value type that lives *outside* the autodiff tape:
//! model parameters, dataset tokens, frozen statistics. A forward pass lifts
//! tensors onto a [`crate::tape::Tape`] as leaves; after `backward` the
//! accumulated gradient can be written back into the tensor's `grad` slot.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, validating that the shape is non-degenerate and
    /// matches the element count.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Param(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Param(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel], requires_grad: false, grad: None }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<S>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Param("from_rows needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Param("from_rows requires equal row lengths".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Seed-deterministic standard-normal draw scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                S::from_f64_c(z * std)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<S>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a single-element tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at `[r, c]` of a 2-D tensor.
    pub fn at2(&self, r: usize, col: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + col]
    }

    /// Mean over axis 0 of a 2-D tensor.
    pub fn col_mean(&self) -> Result<Vec<S>> {
        if self.shape.len() != 2 {
            return Err(Error::shape("col_mean", format!("expected 2-D, got {:?}", self.shape)));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); cols];
        for r in 0..rows {
            for cix in 0..cols {
                out[cix] += self.data[r * cols + cix];
            }
        }
        let n = S::from_f64_c(rows as f64);
        for v in &mut out {
            *v /= n;
        }
        Ok(out)
    }
}

// ── Raw kernels shared by the tape and by straight-line test oracles ──

/// `a [m×k] @ b [k×n] -> [m×n]`, row-major.
pub(crate) fn mat_mul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Transpose of a row-major `[m×n]` buffer.
pub(crate) fn mat_transpose<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
