//! Synthetic identities whose instances suffer from corrupted positions and
//! cyclic misalignment.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::tensor::Array;

use super::fseq::write_fseq;
use super::manifest::{DatasetManifest, ManifestItem, Modality};
use super::{normalize_sequence, DataError, FeatureSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub sequences_per_identity: usize,
    /// Sequence length S.
    pub length: usize,
    /// Vector dimension D.
    pub dim: usize,
    pub corruption_fraction: f64,
    pub misalignment: bool,
    pub noise_scale: f64,
    #[serde(default = "default_cameras")]
    pub num_cameras: usize,
    pub seed: u64,
}

fn default_cameras() -> usize {
    2
}

impl SyntheticSpec {
    /// The dataset used by the acceptance experiment.
    pub fn standard() -> Self {
        Self {
            num_identities: 20,
            sequences_per_identity: 8,
            length: 8,
            dim: 16,
            corruption_fraction: 0.25,
            misalignment: true,
            noise_scale: STANDARD_NOISE_SCALE,
            num_cameras: 2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut problems = Vec::new();
        if self.num_identities == 0 {
            problems.push("num_identities must be positive".to_string());
        }
        if self.sequences_per_identity < 2 {
            problems.push("sequences_per_identity must be at least 2".to_string());
        }
        if self.length == 0 || self.dim == 0 {
            problems.push("length and dim must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            problems.push(format!(
                "corruption_fraction {} is outside [0, 1]",
                self.corruption_fraction
            ));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            problems.push(format!("noise_scale {} must be a finite non-negative number", self.noise_scale));
        }
        if self.num_cameras < 2 {
            problems.push("num_cameras must be at least 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::InvalidSpec(problems.join("; ")))
        }
    }
}

/// Per-component Gaussian noise of the standard dataset.
pub const STANDARD_NOISE_SCALE: f64 = 0.1;

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates a reproducible dataset. Items are ordered identity-major;
/// instance `v` of every identity is seen by camera `v % num_cameras`.
/// Returned sequences hold exactly the values written to disk (f32
/// precision).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DatasetManifest, Vec<FeatureSequence>), DataError> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synthetic, 0);
    let (s, d) = (spec.length, spec.dim);
    let corrupted = (spec.corruption_fraction * s as f64).floor() as usize;
    let mut items = Vec::new();
    let mut sequences = Vec::new();
    for label in 0..spec.num_identities {
        let prototype: Vec<Vec<f64>> = (0..s).map(|_| random_unit(&mut rng, d)).collect();
        for v in 0..spec.sequences_per_identity {
            let mut rows: Vec<Vec<f64>> = prototype
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|&x| {
                            let n: f64 = rng.sample(StandardNormal);
                            x + spec.noise_scale * n
                        })
                        .collect()
                })
                .collect();
            for pos in sample(&mut rng, s, corrupted) {
                rows[pos] = random_unit(&mut rng, d);
            }
            if spec.misalignment {
                let shift = rng.random_range(0..s);
                rows.rotate_left(shift);
            }
            let id = format!("id{label:03}_s{v:02}");
            let seq = FeatureSequence::from_rows(&rows, id.clone())?;
            let seq = round_to_storage(&normalize_sequence(&seq)?)?;
            items.push(ManifestItem {
                path: format!("{id}.fseq"),
                identity_label: label,
                camera_id: v % spec.num_cameras,
                modality: Modality::Video,
            });
            sequences.push(seq);
        }
    }
    let manifest = DatasetManifest {
        num_identities: spec.num_identities,
        items,
    };
    Ok((manifest, sequences))
}

fn round_to_storage(seq: &FeatureSequence) -> Result<FeatureSequence, DataError> {
    let data = seq.vectors().data().iter().map(|&v| v as f32 as f64).collect();
    FeatureSequence::new(Array::new(seq.vectors().shape().to_vec(), data)?, seq.source_id())
}

/// Writes every sequence next to `manifest.json` in `dir`. With
/// `holdout > 0` the last `holdout` instances of each identity also go to
/// `eval.json` and the rest to `train.json`.
pub fn write_synthetic(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    sequences: &[FeatureSequence],
    holdout: usize,
) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for (item, seq) in manifest.items.iter().zip(sequences) {
        write_fseq(seq, dir.join(&item.path))?;
    }
    manifest.save(dir.join("manifest.json"))?;
    if holdout > 0 {
        let (train, eval) = manifest.split_holdout(holdout)?;
        train.save(dir.join("train.json"))?;
        eval.save(dir.join("eval.json"))?;
    }
    Ok(())
}
