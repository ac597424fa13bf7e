//! Feature sequences, their on-disk formats and the synthetic generator.

mod dataset;
pub mod fseq;
pub mod manifest;
mod sequence;
pub mod synthetic;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::TensorError;

pub use dataset::{Dataset, RawInput};
pub use fseq::{read_fseq, write_fseq};
pub use manifest::{DatasetManifest, ManifestItem, Modality};
pub use sequence::{normalize_sequence, FeatureSequence};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: not an FSEQ file")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload longer than header declares: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("invalid sequence shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("vector {index} has (near-)zero norm and cannot be normalized")]
    ZeroVector { index: usize },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
