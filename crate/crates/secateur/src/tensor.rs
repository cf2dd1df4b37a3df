//! Dense row-major tensors and optimizer-carrying parameter state.
//!
//! Storage is 32-bit; reductions elsewhere in the runtime accumulate in
//! 64-bit before narrowing back, which keeps finite-difference gradient
//! checks honest at desk scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major, f32 storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                dimension: "element count",
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Dimension `i` of the shape, or 1 past the end (convenient for
    /// treating vectors as single-row matrices).
    pub fn dim(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(1)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable parameter: its value, the accumulated gradient, and
/// first/second moment estimates for the adaptive updater.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub value: Tensor,
    pub gradient: Tensor,
    pub moment1: Tensor,
    pub moment2: Tensor,
    pub step: u64,
}

impl ParamState {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape.clone();
        ParamState {
            value,
            gradient: Tensor::zeros(&shape),
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn zero_gradient(&mut self) {
        for g in &mut self.gradient.data {
            *g = 0.0;
        }
    }

    /// Drop optimizer history (used when the training phase changes so
    /// stale momentum cannot keep moving frozen weights).
    pub fn reset_moments(&mut self) {
        for m in &mut self.moment1.data {
            *m = 0.0;
        }
        for v in &mut self.moment2.data {
            *v = 0.0;
        }
        self.step = 0;
    }
}
