//! Minimal dense-f64 numerics: tensors, a reverse-mode tape, MLP helpers,
//! Adam, finite-difference gradient checking and a binary checkpoint format.
//!
//! Everything is f64 and row-major. There is no broadcasting beyond the
//! leading-batch handling inside `linear`; shape mismatches are hard errors,
//! not implicit promotions.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod mlp;
mod tensor;

pub use adam::{AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, NodeId};
pub use mlp::{Activation, MlpSpec};
pub use tensor::{Params, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: shapes must have positive extents, got {shape:?}")]
    ZeroDim { op: &'static str, shape: Vec<usize> },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("optimizer state does not cover parameter {0}")]
    UntrackedParameter(String),
    #[error("invalid node id {0}")]
    InvalidNode(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
