//! The full network (extractor, matcher, classifier head) and its
//! on-disk checkpoint container.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, RawInput};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, ExtractorParams};
use crate::matcher::{embedded_distance, DistanceMode, Embedded, MatcherParams, PairDistanceReport};
use crate::objectives::ClassifierHead;
use crate::parallel::{map_indices, Execution};
use crate::rng::{stream_rng, Stream};
use crate::tensor::nn::{join, Parameters, TensorKind};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub mode: DistanceMode,
    pub num_identities: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: ExtractorParams,
    pub matcher: MatcherParams,
    pub head: ClassifierHead,
}

impl Model {
    /// Freshly initialised weights drawn from the run seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.num_identities == 0 {
            return Err(Error::Config("num_identities must be positive".into()));
        }
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let extractor = ExtractorParams::new(config.extractor.clone(), &mut rng)?;
        let dim = extractor.dim();
        let matcher = MatcherParams::new(&mut rng, dim);
        let head = ClassifierHead::new(&mut rng, config.num_identities, dim);
        Ok(Self {
            config,
            extractor,
            matcher,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.extractor.dim()
    }

    pub fn mode(&self) -> DistanceMode {
        self.config.mode
    }

    pub fn extract(&self, input: &RawInput) -> Result<FeatureSequence> {
        self.extractor.extract(input)
    }

    /// Extracts one input and prepares it for matching under `mode`.
    pub fn embed_with(&self, input: &RawInput, mode: DistanceMode) -> Result<Embedded> {
        let seq = self.extractor.extract(input)?;
        Embedded::new(seq.into_vectors(), &self.matcher, mode)
    }

    pub fn embed_all(&self, inputs: &[&RawInput], mode: DistanceMode, exec: Execution) -> Result<Vec<Embedded>> {
        map_indices(inputs.len(), exec, |i| self.embed_with(inputs[i], mode))
    }

    pub fn distance(&self, a: &RawInput, b: &RawInput, mode: DistanceMode) -> Result<PairDistanceReport> {
        embedded_distance(&self.embed_with(a, mode)?, &self.embed_with(b, mode)?, mode)
    }

    /// Copies `tensors` into the model by name. Every tensor must be
    /// present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Array>) -> Result<()> {
        let mut problem = None;
        let mut used = 0;
        self.visit_mut("", &mut |name, _, slot| {
            if problem.is_some() {
                return;
            }
            match tensors.get(name) {
                None => problem = Some(Error::Config(format!("checkpoint lacks tensor {name}"))),
                Some(t) if t.shape() != slot.shape() => {
                    problem = Some(Error::CheckpointShape {
                        name: name.to_string(),
                        expected: slot.shape().to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => {
                    used += 1;
                    *slot = t.clone();
                }
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if used != tensors.len() {
            let mut known = Vec::new();
            self.visit("", &mut |name, _, _| known.push(name.to_string()));
            let extra: Vec<_> = tensors.keys().filter(|k| !known.contains(k)).cloned().collect();
            return Err(Error::Config(format!("checkpoint has unexpected tensors {extra:?}")));
        }
        Ok(())
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array)) {
        self.extractor.visit(&join(prefix, "extractor"), f);
        self.matcher.visit(&join(prefix, "matcher"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array)) {
        self.extractor.visit_mut(&join(prefix, "extractor"), f);
        self.matcher.visit_mut(&join(prefix, "matcher"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DUATMCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Model weights plus the training position needed to resume.
///
/// Layout (little-endian): magic, u16 version, u64 seed, u64 epoch,
/// u64 step, u32 length + model config JSON, u32 tensor count, then per
/// tensor: u32 name length, name, u32 rank, u64 extents, f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimisation steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let config = serde_json::to_vec(&self.model.config).expect("model config serialises");
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config);
        let tensors = self.model.named_tensors("");
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, _, t) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16().map_err(&corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let seed = r.u64().map_err(&corrupt)?;
        let epoch = r.u64().map_err(&corrupt)? as usize;
        let step = r.u64().map_err(&corrupt)?;
        let config_len = r.u32().map_err(&corrupt)? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len).map_err(&corrupt)?)
            .map_err(|e| corrupt(format!("model config: {e}")))?;
        let count = r.u32().map_err(&corrupt)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32().map_err(&corrupt)? as usize;
            let name = String::from_utf8(r.take(name_len).map_err(&corrupt)?.to_vec())
                .map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32().map_err(&corrupt)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(&corrupt)?;
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| r.f64())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(&corrupt)?;
            let t = Array::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut model = Model::new(config, seed)?;
        model.load_tensors(&tensors)?;
        Ok(Self {
            model,
            seed,
            epoch,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::ExtractorKind;
    use crate::tensor::nn::Binder;
    use crate::tensor::Tape;

    fn config(kind: ExtractorKind, dim: usize) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                kind,
                input_channels: if kind == ExtractorKind::Passthrough { dim } else { 3 },
                dim,
                conv_channels: vec![4, 4],
                cell: Default::default(),
            },
            mode: DistanceMode::Duatm,
            num_identities: 5,
        }
    }

    #[test]
    fn bound_names_match_visited_params() {
        for kind in [ExtractorKind::Embedding, ExtractorKind::Spatial, ExtractorKind::Temporal] {
            let model = Model::new(config(kind, 4), 1).unwrap();
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            model.extractor.bind(&mut binder, "extractor");
            model.matcher.bind(&mut binder, "matcher");
            model.head.bind(&mut binder, "head");
            let bound: Vec<String> = binder.vars().iter().map(|(n, _)| n.clone()).collect();
            let mut params = Vec::new();
            model.visit("", &mut |n, k, _| {
                if k == TensorKind::Param {
                    params.push(n.to_string())
                }
            });
            assert_eq!(bound, params, "{kind:?}");
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = Model::new(config(ExtractorKind::Temporal, 4), 3).unwrap();
        model.matcher.bn.running_mean = Array::vector(vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let ck = Checkpoint {
            model,
            seed: 3,
            epoch: 7,
            step: 350,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn mismatched_architecture_is_a_shape_error() {
        let small = Model::new(config(ExtractorKind::Embedding, 4), 1).unwrap();
        let mut large = Model::new(config(ExtractorKind::Embedding, 6), 1).unwrap();
        let tensors: BTreeMap<_, _> = small.named_tensors("").into_iter().map(|(n, _, t)| (n, t)).collect();
        assert!(matches!(large.load_tensors(&tensors), Err(Error::CheckpointShape { .. })));
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let ck = Checkpoint {
            model: Model::new(config(ExtractorKind::Passthrough, 4), 1).unwrap(),
            seed: 1,
            epoch: 0,
            step: 0,
        };
        let bytes = ck.to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = Checkpoint::from_bytes(&bad, p).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let mut trailing = bytes;
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing, p).is_err());
    }
}
