//! Dense f64 arrays with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; a [`Var`] is a cheap handle into it. Every op
//! records enough to compute its exact adjoint, and [`Tape::backward`] walks
//! the tape in reverse. Learnable weights are kept outside the tape in a
//! [`ParamSet`] so frozen models can be shared across threads, each thread
//! binding them onto its own tape.

mod checkpoint;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointError, StoredTensor};
pub use optim::{cosine_lr, AdamW, AdamWState};
pub use params::{Bound, Init, ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("convolution kernel length {0} must be odd")]
    EvenKernel(usize),
    #[error("model width {width} not divisible by {heads} heads")]
    HeadDivisibility { width: usize, heads: usize },
    #[error("optimizer state does not match parameter {0}")]
    StateShapeMismatch(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Plain n-d array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
