use crate::tensor::{Array, MIN_NORM};

use super::DataError;

/// An ordered set of `S` feature vectors of dimension `D`, stored as the
/// rows of an `S × D` array.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    vectors: Array,
    source_id: String,
}

impl FeatureSequence {
    pub fn new(vectors: Array, source_id: impl Into<String>) -> Result<Self, DataError> {
        if vectors.ndim() != 2 {
            return Err(DataError::InvalidShape {
                shape: vectors.shape().to_vec(),
            });
        }
        Ok(Self {
            vectors,
            source_id: source_id.into(),
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], source_id: impl Into<String>) -> Result<Self, DataError> {
        Self::new(Array::from_rows(rows)?, source_id)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Array {
        &self.vectors
    }

    pub fn into_vectors(self) -> Array {
        self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Reorders the vectors; `order[k]` is the source row of output row `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let rows: Vec<&[f64]> = order.iter().map(|&i| self.vector(i)).collect();
        Self {
            vectors: Array::from_rows(&rows).expect("rows share the sequence dimension"),
            source_id: self.source_id.clone(),
        }
    }
}

/// Scales every vector to unit Euclidean norm, preserving order.
pub fn normalize_sequence(seq: &FeatureSequence) -> Result<FeatureSequence, DataError> {
    let d = seq.dim();
    let mut data = seq.vectors.data().to_vec();
    for (index, row) in data.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_NORM) {
            return Err(DataError::ZeroVector { index });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    FeatureSequence::new(Array::new(vec![seq.len(), d], data)?, seq.source_id.clone())
}
