//! PK batch sampling and batch-hard triplet mining.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    /// Identities per batch.
    #[serde(rename = "P")]
    pub p: usize,
    /// Instances per identity.
    #[serde(rename = "V")]
    pub v: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p: 10, v: 4 }
    }
}

impl BatchSpec {
    pub fn size(&self) -> usize {
        self.p * self.v
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.p < 2 {
            out.push(format!("P must be at least 2, got {}", self.p));
        }
        if self.v < 2 {
            out.push(format!("V must be at least 2, got {}", self.v));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// A sampled batch: dataset indices and their labels, identity-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub items: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws `P` distinct identities and `V` items of each. `by_identity[c]`
/// lists the dataset indices of identity `c`; identities with fewer than
/// `V` items are sampled with replacement.
pub fn sample_pk_batch<R: Rng + ?Sized>(by_identity: &[Vec<usize>], spec: &BatchSpec, rng: &mut R) -> Result<PkBatch> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let available: Vec<usize> = (0..by_identity.len()).filter(|&c| !by_identity[c].is_empty()).collect();
    if available.len() < spec.p {
        return Err(Error::NotEnoughIdentities {
            needed: spec.p,
            available: available.len(),
        });
    }
    let mut items = Vec::with_capacity(spec.size());
    let mut labels = Vec::with_capacity(spec.size());
    for pick in sample(rng, available.len(), spec.p) {
        let label = available[pick];
        let pool = &by_identity[label];
        if pool.len() >= spec.v {
            items.extend(sample(rng, pool.len(), spec.v).into_iter().map(|i| pool[i]));
        } else {
            items.extend((0..spec.v).map(|_| pool[rng.random_range(0..pool.len())]));
        }
        labels.extend(std::iter::repeat_n(label, spec.v));
    }
    Ok(PkBatch { items, labels })
}

/// For every anchor, the farthest same-label item and the nearest
/// other-label item. `dist` is row-major `n × n`; ties go to the lowest
/// index.
pub fn mine_hard_triplets(dist: &[f64], labels: &[usize]) -> Result<Vec<MinedTriplet>> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            found: dist.len(),
        });
    }
    (0..n)
        .map(|a| {
            let row = &dist[a * n..(a + 1) * n];
            let mut positive: Option<usize> = None;
            let mut negative: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if positive.is_none_or(|p| row[j] > row[p]) {
                        positive = Some(j);
                    }
                } else if negative.is_none_or(|q| row[j] < row[q]) {
                    negative = Some(j);
                }
            }
            Ok(MinedTriplet {
                anchor: a,
                positive: positive.ok_or(Error::MissingPartner { anchor: a, kind: "positive" })?,
                negative: negative.ok_or(Error::MissingPartner { anchor: a, kind: "negative" })?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn groups(sizes: &[usize]) -> Vec<Vec<usize>> {
        let mut next = 0;
        sizes
            .iter()
            .map(|&s| {
                let g = (next..next + s).collect();
                next += s;
                g
            })
            .collect()
    }

    #[test]
    fn counts_and_labels() {
        let mut rng = stream_rng(1, Stream::Sampler, 0);
        let b = sample_pk_batch(&groups(&[3, 3, 3]), &BatchSpec { p: 2, v: 2 }, &mut rng).unwrap();
        assert_eq!(b.items.len(), 4);
        assert_eq!(b.labels[0], b.labels[1]);
        assert_eq!(b.labels[2], b.labels[3]);
        assert_ne!(b.labels[0], b.labels[2]);
        assert_ne!(b.items[0], b.items[1]);
    }

    #[test]
    fn singleton_identity_is_repeated() {
        let mut rng = stream_rng(2, Stream::Sampler, 0);
        let b = sample_pk_batch(&groups(&[1, 1]), &BatchSpec { p: 2, v: 3 }, &mut rng).unwrap();
        let first: Vec<_> = b.items[..3].to_vec();
        assert!(first.iter().all(|&i| i == first[0]));
    }

    #[test]
    fn same_seed_same_batch() {
        let g = groups(&[4, 5, 6, 2, 3]);
        let spec = BatchSpec { p: 3, v: 3 };
        let a = sample_pk_batch(&g, &spec, &mut stream_rng(7, Stream::Sampler, 3)).unwrap();
        let b = sample_pk_batch(&g, &spec, &mut stream_rng(7, Stream::Sampler, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_identities() {
        let mut rng = stream_rng(0, Stream::Sampler, 0);
        assert!(matches!(
            sample_pk_batch(&groups(&[2]), &BatchSpec { p: 2, v: 2 }, &mut rng),
            Err(Error::NotEnoughIdentities { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn hand_worked_matrix() {
        #[rustfmt::skip]
        let d = [
            0.0, 0.2, 0.5, 0.4,
            0.2, 0.0, 0.3, 0.6,
            0.5, 0.3, 0.0, 0.1,
            0.4, 0.6, 0.1, 0.0,
        ];
        let t = mine_hard_triplets(&d, &[0, 0, 1, 1]).unwrap();
        assert_eq!(t[0], MinedTriplet { anchor: 0, positive: 1, negative: 3 });
        assert_eq!(t[1].negative, 2);
    }

    #[test]
    fn ties_take_lowest_index() {
        let n = 6;
        let mut d = vec![1.0; n * n];
        for i in 0..n {
            d[i * n + i] = 0.0;
        }
        let t = mine_hard_triplets(&d, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert_eq!(t[2], MinedTriplet { anchor: 2, positive: 0, negative: 3 });
        assert_eq!(t[4], MinedTriplet { anchor: 4, positive: 3, negative: 0 });
    }

    #[test]
    fn lonely_anchor_is_reported() {
        let d = [0.0, 1.0, 1.0, 0.0];
        assert!(matches!(
            mine_hard_triplets(&d, &[0, 1]),
            Err(Error::MissingPartner { anchor: 0, kind: "positive" })
        ));
    }
}
