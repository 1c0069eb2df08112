//! Dense row-major tensors with a tape-based reverse-mode autodiff.
//!
//! Everything is laid out as matrices: a tensor of shape `[.., n]` is
//! viewed as `rows × n` where `rows` is the product of the leading axes.
//! Ops are coarse (whole matmuls, fused layer norm, fused masked softmax)
//! so a forward pass over one article records on the order of a hundred
//! nodes.

mod kernels;
mod optim;
mod params;
mod tape;

pub use kernels::{gelu, gelu_grad, sigmoid, softplus};
pub use optim::{Adam, AdamConfig, FreezeSet};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Backward, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Additive bias applied to masked scores before the softmax.
pub const MASK_BIAS: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Matrix product of `a: [m×k]` and `b: [k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    kernels::mm(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Softmax over the last axis with masked entries forced to exactly zero.
///
/// `mask` is either one flag per column (broadcast over rows) or one flag
/// per element; `true` means the entry participates.
pub fn masked_softmax<T: Scalar>(scores: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let cols = scores.cols();
    if mask.len() != cols && mask.len() != scores.len() {
        return Err(Error::Dimension {
            op: "masked_softmax",
            left: scores.shape.clone(),
            right: vec![mask.len()],
        });
    }
    let mut out = scores.data.clone();
    kernels::masked_softmax_rows(&mut out, cols, mask)?;
    Tensor::new(scores.shape.clone(), out)
}

/// Layer normalisation over the last axis (ε = 1e-5 inside the root).
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let d = x.cols();
    if d < 2 || gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape.clone(),
            right: vec![gain.len(), bias.len()],
        });
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let (mean, inv_std) = kernels::moments(row);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gain[j] + bias[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}
