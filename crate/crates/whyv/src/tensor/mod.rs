//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major contiguous storage, a
//! Wengert tape recorded per forward pass, and hand-derived VJPs for every
//! op. Everything runs in 64-bit so gradient checks against central
//! differences can be held to tight tolerances.

use thiserror::Error;

pub(crate) mod fastmath;
pub mod check;
pub mod graph;
pub mod ops;
pub mod scan;

pub use check::finite_diff_check;
pub use graph::{Gradients, Graph, NodeId, Value};
pub use ops::{OpAttrs, OpKind};
pub use scan::gru_scan;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalarRoot(Vec<usize>),
    #[error("root value is not tracked on this graph")]
    UntrackedRoot,
    #[error("computation tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadEps(f64),
    #[error("op `{op}` requires attribute `{attr}`")]
    MissingAttr { op: &'static str, attr: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Uninitialized f64 buffer for outputs that are fully overwritten before
/// any read; skips the memset that `vec![0.0; n]` would pay on every op.
/// Every bit pattern is a valid f64, and each call site writes the whole
/// buffer before reading it.
pub(crate) fn uninit_vec(n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    #[allow(clippy::uninit_vec)]
    unsafe {
        v.set_len(n);
    }
    v
}

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the extents match the data length
    /// and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor_new" });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs already known to be consistent.
    /// Finiteness is checked at the graph chokepoint instead.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalarRoot(self.shape.clone()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise in-place accumulation; shapes must match exactly.
    pub(crate) fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "grad_accumulate",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_extents() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![0], vec![]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.25).item().unwrap(), 4.25);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }
}
