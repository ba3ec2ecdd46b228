//! Dense 64-bit float tensors. The numeric substrate for everything else:
//! model weights, activations, attention maps and saliency grids.

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` in row-major order.
///
/// `grad_enabled` marks whether the tensor participates in gradient
/// computation when placed on a [`crate::tape::Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_enabled: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: format!("{shape:?} ({numel} elements, all dims > 0)"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data, grad_enabled: false })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![0.0; numel], grad_enabled: false }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![value; numel], grad_enabled: false }
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], grad_enabled: false }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_rows",
                expected: "at least one row".into(),
                got: "0 rows".into(),
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::from_rows",
                    expected: format!("{cols} columns"),
                    got: format!("row {i} has {} columns", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new([rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn with_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    /// Dimensions of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                context: "Tensor::dims2",
                expected: "rank-2 tensor".into(),
                got: format!("{other:?}"),
            }),
        }
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        let (_, c) = (self.shape[0], self.shape[1]);
        self.data[row * c + col]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() requires exactly one element, tensor has {}",
                self.numel()
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
