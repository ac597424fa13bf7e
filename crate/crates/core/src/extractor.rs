//! Trainable encoders turning raw inputs into unit-normalised feature
//! sequences.
//!
//! - `passthrough`: a stored sequence, normalised.
//! - `embedding`: a stored sequence projected per vector by a shared
//!   fully connected layer, then normalised.
//! - `spatial`: an `H×W×C` image through a stack of 3×3 convolution, ReLU
//!   and 2×2 average-pooling stages; every position of the final map is one
//!   element of the sequence (row-major), projected to `D`.
//! - `temporal`: every frame through the same convolution stack and a
//!   global spatial average, then a bidirectional tanh recurrence whose
//!   concatenated states are projected to `D`. One element per frame.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_fseq, FeatureSequence, RawInput};
use crate::error::{Error, Result};
use crate::tensor::nn::{join, Binder, Linear, LinearVars, Parameters, TensorKind};
use crate::tensor::{Array, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Passthrough,
    Embedding,
    Spatial,
    Temporal,
}

impl ExtractorKind {
    fn name(self) -> &'static str {
        match self {
            Self::Passthrough => "passthrough",
            Self::Embedding => "embedding",
            Self::Spatial => "spatial",
            Self::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentCell {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Vector dimension of stored sequences, or channel count `C` of images.
    pub input_channels: usize,
    /// Output dimension `D`.
    pub dim: usize,
    /// Output channels of each convolution stage.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default)]
    pub cell: RecurrentCell,
}

pub fn default_conv_channels() -> Vec<usize> {
    vec![8, 16]
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.dim == 0 || self.conv_channels.contains(&0) {
            return Err(Error::Config("extractor extents must be positive".into()));
        }
        if self.kind == ExtractorKind::Passthrough && self.input_channels != self.dim {
            return Err(Error::Config(format!(
                "passthrough extractor needs input_channels == dim ({} != {})",
                self.input_channels, self.dim
            )));
        }
        Ok(())
    }

    /// Spatial size of the final feature map for an `h × w` input, or
    /// `None` when a pooling stage would receive fewer than 2 rows/columns.
    pub fn output_grid(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.conv_channels.iter().try_fold((h, w), |(h, w), _| {
            (h >= 2 && w >= 2).then_some((h / 2, w / 2))
        })
    }
}

/// Single-layer tanh recurrence `h_t = tanh(W_x x_t + b + W_h h_{t-1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct TanhCell {
    pub input: Linear,
    pub recurrent: Array,
}

#[derive(Clone, Copy, Debug)]
pub struct TanhCellVars<'t> {
    pub input: LinearVars<'t>,
    pub recurrent: Var<'t>,
}

impl TanhCell {
    fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(rng, inputs, hidden),
            recurrent: crate::tensor::nn::uniform_init(rng, &[hidden, hidden], hidden),
        }
    }

    fn bind<'t>(&self, binder: &mut Binder<'t>, prefix: &str) -> TanhCellVars<'t> {
        TanhCellVars {
            input: self.input.bind(binder, &join(prefix, "input")),
            recurrent: binder.param(join(prefix, "recurrent"), &self.recurrent),
        }
    }

    fn constants<'t>(&self, tape: &'t Tape) -> TanhCellVars<'t> {
        TanhCellVars {
            input: self.input.constants(tape),
            recurrent: tape.leaf(self.recurrent.clone()),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array)) {
        self.input.visit(&join(prefix, "input"), f);
        f(&join(prefix, "recurrent"), TensorKind::Param, &self.recurrent);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        f(&join(prefix, "recurrent"), TensorKind::Param, &mut self.recurrent);
    }
}

impl<'t> TanhCellVars<'t> {
    /// Runs the recurrence over the rows of `x` (`T × in`) in the given
    /// time order and returns the hidden states in original time order.
    fn run(&self, x: Var<'t>, reverse: bool) -> Result<Var<'t>, TensorError> {
        let steps = x.value().rows();
        let hidden = self.recurrent.value().rows();
        let projected = self.input.forward(x)?;
        let mut h: Option<Var<'t>> = None;
        let mut states = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let mut pre = projected.slice_rows(t, 1)?;
            if let Some(prev) = h {
                pre = pre.add(prev.matmul_nt(self.recurrent)?)?;
            }
            let state = pre.tanh();
            debug_assert_eq!(state.shape(), vec![1, hidden]);
            states[t] = Some(state);
            h = Some(state);
        }
        let states: Vec<Var<'t>> = states.into_iter().map(|s| s.expect("every step visited")).collect();
        Var::concat_rows(&states)
    }
}

/// All trainable tensors of the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub config: ExtractorConfig,
    /// One layer per stage; weights are `out × 9·in` over 3×3 patches.
    pub conv: Vec<Linear>,
    /// Embedding projection (embedding/spatial) or output projection of the
    /// concatenated bidirectional states (temporal).
    pub projection: Option<Linear>,
    pub forward_cell: Option<TanhCell>,
    pub backward_cell: Option<TanhCell>,
}

/// Extractor parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct ExtractorVars<'t> {
    kind: ExtractorKind,
    dim: usize,
    input_channels: usize,
    conv: Vec<LinearVars<'t>>,
    projection: Option<LinearVars<'t>>,
    forward_cell: Option<TanhCellVars<'t>>,
    backward_cell: Option<TanhCellVars<'t>>,
}

impl ExtractorParams {
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut params = Self {
            conv: Vec::new(),
            projection: None,
            forward_cell: None,
            backward_cell: None,
            config: config.clone(),
        };
        match config.kind {
            ExtractorKind::Passthrough => {}
            ExtractorKind::Embedding => {
                params.projection = Some(Linear::new(rng, config.input_channels, d));
            }
            ExtractorKind::Spatial | ExtractorKind::Temporal => {
                let mut cin = config.input_channels;
                for &cout in &config.conv_channels {
                    params.conv.push(Linear::new(rng, 9 * cin, cout));
                    cin = cout;
                }
                if config.kind == ExtractorKind::Spatial {
                    params.projection = Some(Linear::new(rng, cin, d));
                } else {
                    params.forward_cell = Some(TanhCell::new(rng, cin, d));
                    params.backward_cell = Some(TanhCell::new(rng, cin, d));
                    params.projection = Some(Linear::new(rng, 2 * d, d));
                }
            }
        }
        Ok(params)
    }

    pub fn kind(&self) -> ExtractorKind {
        self.config.kind
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>, prefix: &str) -> ExtractorVars<'t> {
        ExtractorVars {
            kind: self.config.kind,
            dim: self.config.dim,
            input_channels: self.config.input_channels,
            conv: self
                .conv
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(binder, &join(prefix, &format!("conv{i}"))))
                .collect(),
            projection: self.projection.as_ref().map(|l| l.bind(binder, &join(prefix, "projection"))),
            forward_cell: self.forward_cell.as_ref().map(|c| c.bind(binder, &join(prefix, "forward_cell"))),
            backward_cell: self
                .backward_cell
                .as_ref()
                .map(|c| c.bind(binder, &join(prefix, "backward_cell"))),
        }
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> ExtractorVars<'t> {
        ExtractorVars {
            kind: self.config.kind,
            dim: self.config.dim,
            input_channels: self.config.input_channels,
            conv: self.conv.iter().map(|l| l.constants(tape)).collect(),
            projection: self.projection.as_ref().map(|l| l.constants(tape)),
            forward_cell: self.forward_cell.as_ref().map(|c| c.constants(tape)),
            backward_cell: self.backward_cell.as_ref().map(|c| c.constants(tape)),
        }
    }

    /// Inference-mode extraction of one input.
    pub fn extract(&self, input: &RawInput) -> Result<FeatureSequence> {
        let tape = Tape::no_grad();
        let vars = self.constants(&tape);
        let out = vars.forward(&tape, input)?;
        let id = match input {
            RawInput::Sequence(s) => s.source_id().to_string(),
            _ => String::new(),
        };
        Ok(FeatureSequence::new((*out.value()).clone(), id)?)
    }
}

impl Parameters for ExtractorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array)) {
        for (i, l) in self.conv.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
        if let Some(l) = &self.projection {
            l.visit(&join(prefix, "projection"), f);
        }
        if let Some(c) = &self.forward_cell {
            c.visit(&join(prefix, "forward_cell"), f);
        }
        if let Some(c) = &self.backward_cell {
            c.visit(&join(prefix, "backward_cell"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array)) {
        for (i, l) in self.conv.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        if let Some(l) = &mut self.projection {
            l.visit_mut(&join(prefix, "projection"), f);
        }
        if let Some(c) = &mut self.forward_cell {
            c.visit_mut(&join(prefix, "forward_cell"), f);
        }
        if let Some(c) = &mut self.backward_cell {
            c.visit_mut(&join(prefix, "backward_cell"), f);
        }
    }
}

fn input_name(input: &RawInput) -> &'static str {
    match input {
        RawInput::Sequence(_) => "sequence",
        RawInput::Image(_) => "image",
        RawInput::Video(_) => "video",
    }
}

impl<'t> ExtractorVars<'t> {
    /// Extracts the unit-normalised `S × D` sequence of one input.
    pub fn forward(&self, tape: &'t Tape, input: &RawInput) -> Result<Var<'t>> {
        let mismatch = || Error::ModalityMismatch {
            extractor: self.kind.name(),
            input: input_name(input),
        };
        let raw = match (self.kind, input) {
            (ExtractorKind::Passthrough, RawInput::Sequence(s)) => {
                self.check_channels(s.dim())?;
                tape.leaf(s.vectors().clone())
            }
            (ExtractorKind::Embedding, RawInput::Sequence(s)) => {
                self.check_channels(s.dim())?;
                self.projection().forward(tape.leaf(s.vectors().clone()))?
            }
            (ExtractorKind::Spatial, RawInput::Image(image)) => {
                let map = self.conv_stack(tape.leaf(image.clone()))?;
                let shape = map.shape();
                let flat = map.reshape(&[shape[0] * shape[1], shape[2]])?;
                self.projection().forward(flat)?
            }
            (ExtractorKind::Temporal, RawInput::Video(frames)) => {
                if frames.is_empty() {
                    return Err(Error::InputTooSmall { shape: vec![0] });
                }
                let pooled = frames
                    .iter()
                    .map(|f| {
                        let map = self.conv_stack(tape.leaf(f.clone()))?;
                        let shape = map.shape();
                        let flat = map.reshape(&[shape[0] * shape[1], shape[2]])?;
                        let c = shape[2];
                        Ok(flat.mean_axis(0)?.reshape(&[1, c])?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let x = Var::concat_rows(&pooled)?;
                let fwd = self.forward_cell.as_ref().expect("temporal has cells").run(x, false)?;
                let bwd = self.backward_cell.as_ref().expect("temporal has cells").run(x, true)?;
                self.projection().forward(Var::concat_cols(&[fwd, bwd])?)?
            }
            _ => return Err(mismatch()),
        };
        debug_assert_eq!(raw.value().cols(), self.dim);
        Ok(raw.normalize_rows()?)
    }

    fn projection(&self) -> &LinearVars<'t> {
        self.projection.as_ref().expect("extractor kind carries a projection")
    }

    fn check_channels(&self, found: usize) -> Result<()> {
        if found == self.input_channels {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.input_channels,
                found,
            })
        }
    }

    fn conv_stack(&self, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        if shape.len() != 3 || shape.contains(&0) {
            return Err(Error::InputTooSmall { shape });
        }
        self.check_channels(shape[2])?;
        let mut x = image;
        for layer in &self.conv {
            let s = x.shape();
            let (h, w) = (s[0], s[1]);
            if h < 2 || w < 2 {
                return Err(Error::InputTooSmall { shape: shape.clone() });
            }
            let cout = layer.weight.value().rows();
            let y = layer.forward(x.im2col3x3()?)?.relu();
            x = y.reshape(&[h, w, cout])?.avg_pool2x2()?;
        }
        Ok(x)
    }
}

/// Inference-mode spatial extraction.
pub fn extract_spatial(image: &Array, params: &ExtractorParams) -> Result<FeatureSequence> {
    params.extract(&RawInput::Image(image.clone()))
}

/// Inference-mode temporal extraction.
pub fn extract_temporal(frames: &[Array], params: &ExtractorParams) -> Result<FeatureSequence> {
    params.extract(&RawInput::Video(frames.to_vec()))
}

/// Loads a stored sequence and normalises it, checking the expected `D`.
pub fn extract_passthrough(path: impl AsRef<Path>, dim: usize) -> Result<FeatureSequence> {
    let seq = read_fseq(path)?;
    if seq.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: seq.dim(),
        });
    }
    Ok(crate::data::normalize_sequence(&seq)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::MIN_NORM;

    fn config(kind: ExtractorKind, input_channels: usize, dim: usize) -> ExtractorConfig {
        ExtractorConfig {
            kind,
            input_channels,
            dim,
            conv_channels: vec![4, 6],
            cell: RecurrentCell::Tanh,
        }
    }

    fn params(kind: ExtractorKind, input_channels: usize, dim: usize, seed: u64) -> ExtractorParams {
        ExtractorParams::new(config(kind, input_channels, dim), &mut stream_rng(seed, Stream::Init, 0)).unwrap()
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Array {
        let mut rng = stream_rng(seed, Stream::Synthetic, 0);
        Array::new(vec![h, w, c], (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sorted_rows(seq: &FeatureSequence) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = (0..seq.len()).map(|i| seq.vector(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows
    }

    #[test]
    fn spatial_length_follows_the_grid() {
        let p = params(ExtractorKind::Spatial, 3, 5, 1);
        for (h, w) in [(8, 8), (9, 13), (4, 6)] {
            let s = extract_spatial(&random_image(h, w, 3, 2), &p).unwrap();
            let (gh, gw) = p.config.output_grid(h, w).unwrap();
            assert_eq!(s.len(), gh * gw);
            assert_eq!(s.dim(), 5);
        }
        assert!(p.config.output_grid(3, 8).is_none());
        assert!(matches!(
            extract_spatial(&random_image(3, 8, 3, 2), &p),
            Err(Error::InputTooSmall { .. })
        ));
    }

    #[test]
    fn spatial_shift_permutes_the_sequence() {
        let mut p = params(ExtractorKind::Spatial, 1, 4, 3);
        for l in &mut p.conv {
            l.bias = Array::zeros(l.bias.shape());
        }
        let pattern = random_image(4, 4, 1, 4);
        let place = |top: usize, left: usize| {
            let mut img = Array::zeros(&[16, 16, 1]);
            for y in 0..4 {
                for x in 0..4 {
                    img.data_mut()[(top + y) * 16 + left + x] = pattern.data()[y * 4 + x];
                }
            }
            img
        };
        let a = extract_spatial(&place(4, 4), &p).unwrap();
        let b = extract_spatial(&place(8, 4), &p).unwrap();
        let c = extract_spatial(&place(4, 8), &p).unwrap();
        assert_ne!(a.vectors(), b.vectors());
        assert_eq!(sorted_rows(&a), sorted_rows(&b));
        assert_eq!(sorted_rows(&a), sorted_rows(&c));
    }

    #[test]
    fn zero_image_with_zero_biases_cannot_be_normalised() {
        let mut p = params(ExtractorKind::Spatial, 2, 4, 5);
        p.visit_mut("", &mut |name, _, t| {
            if name.ends_with("bias") {
                *t = Array::zeros(t.shape());
            }
        });
        let err = extract_spatial(&Array::zeros(&[8, 8, 2]), &p).unwrap_err();
        assert!(matches!(err, Error::Tensor(TensorError::ZeroNorm { row: 0 })), "{err}");
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = params(ExtractorKind::Temporal, 2, 6, 6);
        let frames: Vec<Array> = (0..5).map(|t| random_image(6, 6, 2, 10 + t)).collect();
        let s = extract_temporal(&frames, &p).unwrap();
        assert_eq!(s.len(), 5);
        for i in 0..s.len() {
            let n = s.vector(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9 && n > MIN_NORM);
        }
    }

    #[test]
    fn single_frame_video() {
        let p = params(ExtractorKind::Temporal, 1, 3, 7);
        assert_eq!(extract_temporal(&[random_image(4, 4, 1, 1)], &p).unwrap().len(), 1);
    }

    #[test]
    fn reversing_time_and_swapping_directions_reverses_output() {
        let d = 3;
        let p = params(ExtractorKind::Temporal, 2, d, 8);
        let frames: Vec<Array> = (0..4).map(|t| random_image(4, 4, 2, 20 + t)).collect();
        let forward = extract_temporal(&frames, &p).unwrap();

        let mut swapped = p.clone();
        std::mem::swap(&mut swapped.forward_cell, &mut swapped.backward_cell);
        let proj = swapped.projection.as_mut().unwrap();
        let old = proj.weight.clone();
        for r in 0..d {
            for c in 0..d {
                proj.weight.data_mut()[r * 2 * d + c] = old.data()[r * 2 * d + d + c];
                proj.weight.data_mut()[r * 2 * d + d + c] = old.data()[r * 2 * d + c];
            }
        }
        let reversed: Vec<Array> = frames.iter().rev().cloned().collect();
        let backward = extract_temporal(&reversed, &swapped).unwrap();
        for t in 0..4 {
            for (x, y) in forward.vector(t).iter().zip(backward.vector(3 - t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_video_without_recurrence_is_constant() {
        let mut p = params(ExtractorKind::Temporal, 1, 4, 9);
        for cell in [&mut p.forward_cell, &mut p.backward_cell] {
            let c = cell.as_mut().unwrap();
            c.recurrent = Array::zeros(c.recurrent.shape());
        }
        let frame = random_image(4, 4, 1, 3);
        let s = extract_temporal(&vec![frame; 5], &p).unwrap();
        for t in 1..5 {
            assert_eq!(s.vector(t), s.vector(0));
        }
    }

    #[test]
    fn passthrough_checks_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fseq");
        let seq = FeatureSequence::from_rows(&[[3.0, 4.0]], "a").unwrap();
        crate::data::write_fseq(&seq, &path).unwrap();
        let loaded = extract_passthrough(&path, 2).unwrap();
        assert!((loaded.vector(0)[0] - 0.6).abs() < 1e-12);
        assert!(matches!(extract_passthrough(&path, 3), Err(Error::DimensionMismatch { expected: 3, found: 2 })));
        assert!(ExtractorParams::new(config(ExtractorKind::Passthrough, 2, 3), &mut stream_rng(0, Stream::Init, 0)).is_err());
    }

    #[test]
    fn modality_mismatch_is_reported() {
        let p = params(ExtractorKind::Spatial, 2, 3, 1);
        let seq = FeatureSequence::from_rows(&[[1.0, 0.0]], "s").unwrap();
        assert!(matches!(
            p.extract(&RawInput::Sequence(seq)),
            Err(Error::ModalityMismatch { extractor: "spatial", input: "sequence" })
        ));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cases = [
            (ExtractorKind::Embedding, RawInput::Sequence(FeatureSequence::new(random_image(4, 3, 1, 1).reshape(&[4, 3]).unwrap(), "s").unwrap())),
            (ExtractorKind::Spatial, RawInput::Image(random_image(8, 8, 3, 2))),
            (ExtractorKind::Temporal, RawInput::Video((0..3).map(|t| random_image(4, 4, 3, 3 + t)).collect())),
        ];
        for (kind, input) in cases {
            let p = params(kind, 3, 4, 11);
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            let vars = p.bind(&mut binder, "");
            let out = vars.forward(&tape, &input).unwrap();
            let rows = out.value().rows();
            let weights = random_image(rows, 4, 1, 99).reshape(&[rows, 4]).unwrap();
            let loss = out.mul(tape.leaf(weights)).unwrap().sum();
            loss.backward().unwrap();
            for (name, g) in binder.gradients() {
                assert!(g.data().iter().any(|&v| v != 0.0), "{kind:?} {name} has zero gradient");
            }
        }
    }
}
