//! Dense multi-dimensional value buffer with an associated gradient buffer.

use crate::error::{NumError, Result};
use crate::scalar::Scalar;

/// A dense row-major value array plus a gradient array of the same shape.
///
/// Invariants: the product of the shape extents equals the number of values,
/// the gradient always has the same length, and values are finite after any
/// completed operation.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuffer<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
}

impl<T: Scalar> TensorBuffer<T> {
    /// All-zero tensor. Panics on a zero extent (programmer error).
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "tensor shape must have positive extents, got {shape:?}"
        );
        let len = shape.iter().product();
        TensorBuffer {
            shape: shape.to_vec(),
            values: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    /// Builds a tensor from explicit values, validating shape and finiteness.
    pub fn from_values(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(NumError::ShapeMismatch {
                op: "from_values",
                details: format!("shape {shape:?} has a non-positive extent"),
            });
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(NumError::ShapeMismatch {
                op: "from_values",
                details: format!("shape {shape:?} implies {len} values, got {}", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite { op: "from_values" });
        }
        let grad = vec![T::zero(); len];
        Ok(TensorBuffer {
            shape: shape.to_vec(),
            values,
            grad,
        })
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: T) -> Self {
        TensorBuffer {
            shape: vec![1],
            values: vec![v],
            grad: vec![T::zero()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = T::zero();
        }
    }

    /// Bitwise equality of the value buffers (shape included).
    pub fn values_bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }
}
