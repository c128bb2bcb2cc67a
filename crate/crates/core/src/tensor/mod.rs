//! N-dimensional f64 arrays and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable value: a shape plus row-major contiguous
//! f64 storage behind an `Arc`. Cloning is cheap and tensors are safe to
//! share read-only across threads. Differentiable computation happens on
//! [`Var`] handles recorded on a [`Graph`] tape; a graph is confined to
//! the thread that built it.

mod graph;
mod kernels;

pub use graph::{Graph, ReduceKind, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable n-dimensional array of f64, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the element count matches the shape.
    /// Extents must be positive.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive by construction
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a one-element tensor.
    ///
    /// Panics when the tensor holds more than one value; use only where
    /// scalarness is structurally guaranteed.
    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on tensor of len {}", self.data.len());
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Mutable access for optimizers; clones the storage if shared.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// Stable identity of the underlying storage, used to bind the same
    /// parameter tensor to one graph leaf.
    pub(crate) fn storage_id(&self) -> usize {
        self.data.as_ptr() as usize
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}
