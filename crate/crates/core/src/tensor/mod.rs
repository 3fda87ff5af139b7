//! Dense row-major f64 tensors and a tape-based reverse-mode autodiff.
//!
//! [`Tensor`] is a plain value with an optional gradient slot. Differentiable
//! computations are recorded on a [`Tape`] (one tape per forward pass) and
//! replayed backwards by [`Tape::backward`].

mod gradcheck;
pub mod kernels;
mod tape;

use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{grad_check, grad_check_many, GradCheck, GRAD_CHECK_FLOOR};
pub use tape::{Gradients, Tape, Var};

use crate::cost::OpCounter;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(invalid("Tensor::new", "extents must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: positive extents")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    /// Build a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("Tensor::from_rows", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix (or of the leading axes flattened, for higher ranks).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient shape must match data");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank2("transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        Tensor::new(&[c, r], kernels::transpose(&self.data, r, c))
    }

    /// Matrix product, registering its multiply-adds with `counter`.
    pub fn matmul(&self, other: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        self.expect_rank2("matmul")?;
        other.expect_rank2("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, p) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Tensor::new(&[m, p], kernels::matmul(&self.data, &other.data, m, k, p, counter))
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.expect_rank2("softmax_rows")?;
        Tensor::new(&self.shape, kernels::softmax_rows(&self.data, self.shape[0], self.shape[1]))
    }

    pub fn gelu(&self) -> Tensor {
        self.map(crate::math::gelu)
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = self.cols();
        check_layer_norm_shapes(d, gain, bias)?;
        let (out, _, _) = kernels::layer_norm(&self.data, d, &gain.data, &bias.data);
        Tensor::new(&self.shape, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_rank2(&self, op: &'static str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(invalid(op, alloc::format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok(())
    }
}

pub(crate) fn check_layer_norm_shapes(d: usize, gain: &Tensor, bias: &Tensor) -> Result<()> {
    if d == 0 {
        return Err(invalid("layer_norm", "normalized extent must be positive"));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: vec![d],
            right: vec![gain.len(), bias.len()],
        });
    }
    Ok(())
}
