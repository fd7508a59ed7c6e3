//! Dense 4-D tensors, the hand-differentiated kernels the detector needs, a
//! reverse-mode tape ([`Graph`]) and a central-difference gradient checker.
//!
//! Every tensor is `(batch, channels, height, width)` in row-major order and
//! holds `f64` values. Vectors and matrices are 4-D tensors with trailing
//! unit extents; ops never broadcast.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{central_difference, grad_check, grad_check_at, relative_error, GradCheckReport};
pub use graph::{inject_backward_fault, Graph, OpKind, Var};

use crate::error::{Error, Result};

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "tensor",
                format!("{:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(numel(shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            grad: None,
        }
    }

    /// A `1×len×1×1` column, the layout used for biases and flat vectors.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: [1, data.len(), 1, 1],
            data,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape("tensor", "gradient length differs from data"));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}
