//! Dense f32 tensors and the reverse-mode autodiff graph built on them.
//!
//! Layout conventions: 4-D activations are NHWC, convolution kernels are
//! `[kh, kw, c_in, c_out]`, dense weights are `[in, out]`. All data is
//! contiguous row-major.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;


pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};

/// Convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size is `ceil(in / stride)`; zero padding split evenly
    /// with the extra row/column at the bottom/right.
    Same,
    /// No padding; output is `(in - k) / stride + 1`.
    Valid,
}

/// Immutable dense tensor: shape plus row-major f32 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/data length disagreement and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        if shape.contains(&0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("zero dimension in shape {:?}", shape),
            });
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs whose invariants are upheld by
    /// construction (shape computed alongside data, inputs already checked).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }
}

/// Rejects NaN/Inf anywhere in the slice, naming the offending operator.
pub fn check_finite(data: &[f32], context: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    Ok(())
}
