//! Minimal dense-array engine with reverse-mode gradients.

mod array;
pub mod nn;
mod ops;
mod tape;

pub use array::Array;
pub use tape::{Tape, Var};

use thiserror::Error;

/// Rows whose Euclidean norm falls below this are treated as zero vectors.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape {left:?} is incompatible with {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} array, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: every extent must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op} (node/element {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("row {row} has (near-)zero norm and cannot be normalized")]
    ZeroNorm { row: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: input shape {shape:?} is too small")]
    TooSmall { op: &'static str, shape: Vec<usize> },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("batch norm in training mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("backward called on a tape built without gradient tracking")]
    GradDisabled,
}
