use std::path::Path;

use crate::tensor::Array;

use super::fseq::read_fseq;
use super::manifest::{resolve, DatasetManifest};
use super::{normalize_sequence, DataError, FeatureSequence};

/// Raw model input for one item.
#[derive(Clone, Debug, PartialEq)]
pub enum RawInput {
    /// A precomputed feature sequence.
    Sequence(FeatureSequence),
    /// One `H × W × C` image.
    Image(Array),
    /// `T` frames, each `H × W × C`.
    Video(Vec<Array>),
}

/// Items in memory with their identity and camera annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<RawInput>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub num_identities: usize,
}

impl Dataset {
    /// Loads every `.fseq` item of a manifest, unit-normalising each vector.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, DataError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let sequences = manifest
            .items
            .iter()
            .map(|item| read_fseq(resolve(manifest_path, &item.path)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_sequences(&manifest, sequences)
    }

    pub fn from_sequences(manifest: &DatasetManifest, sequences: Vec<FeatureSequence>) -> Result<Self, DataError> {
        manifest.validate()?;
        if manifest.items.len() != sequences.len() {
            return Err(DataError::InvalidManifest(format!(
                "{} items but {} sequences",
                manifest.items.len(),
                sequences.len()
            )));
        }
        let dim = sequences.first().map(|s| s.dim());
        let inputs = sequences
            .iter()
            .map(|s| {
                if Some(s.dim()) != dim {
                    return Err(DataError::DimensionMismatch {
                        expected: dim.unwrap_or(0),
                        found: s.dim(),
                    });
                }
                normalize_sequence(s).map(RawInput::Sequence)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            inputs,
            labels: manifest.items.iter().map(|i| i.identity_label).collect(),
            cameras: manifest.items.iter().map(|i| i.camera_id).collect(),
            num_identities: manifest.num_identities,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Item indices grouped by identity label.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_identities];
        for (i, &label) in self.labels.iter().enumerate() {
            groups[label].push(i);
        }
        groups
    }

    /// Feature dimension of sequence inputs, if any.
    pub fn sequence_dim(&self) -> Option<usize> {
        self.inputs.iter().find_map(|i| match i {
            RawInput::Sequence(s) => Some(s.dim()),
            _ => None,
        })
    }
}
