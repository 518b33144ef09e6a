//! Minimal reverse-mode autodiff engine and optimizer.
//!
//! The graph is define-by-run: a fresh [`Graph`] is built for every forward
//! pass, ops append nodes, and [`Graph::backward`] walks the tape in reverse.
//! All tensors are row-major and owned; no aliasing, no views.

mod adam;
mod checkpoint;
mod graph;
pub mod gradcheck;
mod kernels;
mod tensor;

pub use adam::{adam_step, zero_grads, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
pub use graph::{Graph, Op, TensorId};
pub use kernels::{mm_nn_acc, mm_tn_acc, transpose_into};
pub use tensor::{numel, ParamStore, Parameter, Tensor};

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the op.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Op requires a rank the operand does not have.
    BadRank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    /// Value buffer length does not match the shape product.
    LengthMismatch { expected: usize, got: usize },
    /// backward() was called on a non-scalar output.
    NotScalar { shape: Vec<usize> },
    /// An op argument is out of range (narrow window, gather index, axis).
    OutOfRange {
        op: &'static str,
        detail: String,
    },
    /// Debug-mode finiteness check tripped.
    NonFinite { op: &'static str },
    /// A parameter name was registered twice or not found.
    BadParamName { name: String, reason: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::BadRank { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got shape {got:?}")
            }
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "value buffer length {got} does not match shape product {expected}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
            TensorError::OutOfRange { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            TensorError::BadParamName { name, reason } => write!(f, "parameter {name:?}: {reason}"),
        }
    }
}

impl std::error::Error for TensorError {}
