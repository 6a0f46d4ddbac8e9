//! Dense f64 tensors and a reverse-mode tape.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use tape::{Grads, Tape, Var};

use crate::error::{shape_err, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(1.0);
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Sums `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(self.clone());
        let b = tape.constant(other.clone());
        let c = tape.matmul(a, b)?;
        Ok(tape.value(c))
    }

    /// Softmax along `axis` with max subtraction; non-finite input is an error.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return shape_err(format!("axis {axis} out of range for {:?}", self.shape));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let n = self.shape[axis];
        if n == 0 {
            return shape_err("softmax over an empty axis");
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[idx(j)];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[idx(j)] = *b;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}
