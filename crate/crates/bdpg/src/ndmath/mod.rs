//! Minimal dense-array math with reverse-mode differentiation.
//!
//! Everything here is sized for small multilayer perceptrons: arrays are
//! at most 2-D (a scalar is `[1, 1]`, a vector `[n]` is treated as one
//! row), graphs are recorded on a [`Tape`] and differentiated backwards
//! from a scalar loss. Parameters live in a [`ParamStore`] and are stored
//! as 32-bit floats; tape node values are held in 64-bit precision so
//! gradient checks against central finite differences stay tight.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod store;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{collect_grads, finite_difference_grad, grad_relative_error, FD_STEP};
pub use mlp::{forward_mlp, init_mlp, Activation, MlpSpec};
pub use store::ParamStore;
pub use tape::{NodeId, Tape};

use std::fmt;

/// Errors from array construction, graph evaluation and optimization.
#[derive(Debug, Clone, PartialEq)]
pub enum NdError {
    /// Constructor data length does not match the requested shape.
    DataLength { expected: usize, got: usize },
    /// An MLP layer received an input of the wrong width.
    LayerShapeMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    /// `backward` was called on a node that is not a scalar.
    NonScalarLoss { rows: usize, cols: usize },
    /// A gradient became NaN; named after the offending parameter.
    NanGradient { param: String },
    /// Parameter lookup failed.
    UnknownParam { name: String },
    /// Parameter registered twice.
    DuplicateParam { name: String },
    /// Checkpoint I/O failure.
    Io { path: String, message: String },
    /// Checkpoint payload malformed or version-incompatible.
    Corrupt { message: String },
}

impl fmt::Display for NdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NdError::DataLength { expected, got } => {
                write!(
                    f,
                    "data length {got} does not match shape volume {expected}"
                )
            }
            NdError::LayerShapeMismatch {
                layer,
                expected,
                got,
            } => write!(
                f,
                "layer {layer}: expected input width {expected}, got {got}"
            ),
            NdError::NonScalarLoss { rows, cols } => {
                write!(f, "backward requires a scalar loss, got [{rows}, {cols}]")
            }
            NdError::NanGradient { param } => {
                write!(f, "non-finite gradient for parameter {param}")
            }
            NdError::UnknownParam { name } => write!(f, "unknown parameter {name}"),
            NdError::DuplicateParam { name } => write!(f, "duplicate parameter {name}"),
            NdError::Io { path, message } => write!(f, "checkpoint i/o on {path}: {message}"),
            NdError::Corrupt { message } => write!(f, "corrupt checkpoint: {message}"),
        }
    }
}

impl std::error::Error for NdError {}

/// Dense row-major array of 32-bit floats, at most two axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, NdError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(x: f32) -> Self {
        Array {
            shape: vec![1],
            data: vec![x],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view: vectors are a single row, scalars are [1, 1].
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            n => panic!("arrays are at most 2-D, got {n} axes"),
        }
    }
}
