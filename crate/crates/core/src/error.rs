use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{extractor} extractor cannot consume {input} input")]
    ModalityMismatch {
        extractor: &'static str,
        input: &'static str,
    },
    #[error("input {shape:?} is too small for the configured convolution stages")]
    InputTooSmall { shape: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} identities")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch needs {needed} identities but the dataset has {available}")]
    NotEnoughIdentities { needed: usize, available: usize },
    #[error("anchor {anchor} has no {kind} in the batch")]
    MissingPartner { anchor: usize, kind: &'static str },
    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        detail: String,
    },
    #[error("evaluation protocol: {0}")]
    Protocol(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
