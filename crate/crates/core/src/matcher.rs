//! Dual attention matching of two feature sequences.
//!
//! For every reference vector `x_a^i` of sequence `A` a transform layer
//! produces a non-negative filter `q = ReLU(BN(W x + b))`. The same filter
//! attends over `A` itself (refinement, `x̄_a^i`) and over the other sequence
//! `B` (alignment, `x̂_b^i`):
//!
//! ```text
//! x̄_a^i = Σ_m softmax_m(⟨q, x_a^m⟩) x_a^m      x̂_b^i = Σ_n softmax_n(⟨q, x_b^n⟩) x_b^n
//! d_a^i = ‖x̄_a^i − x̂_b^i‖₂
//! ‖A − B‖ = mean_i(d_a^i)/2 + mean_j(d_b^j)/2
//! ```
//!
//! The process runs in both directions, so the distance is symmetric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::parallel::{map_indices, Execution};
use crate::tensor::nn::{join, BatchNorm, BatchNormVars, Binder, BnMode, BnUpdate, Linear, LinearVars, Parameters, TensorKind};
use crate::tensor::{Array, Tape, TensorError, Var};

/// Which sequence distance to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Refined vs. aligned vectors, both directions.
    Duatm,
    /// Euclidean distance between mean-pooled sequences.
    Avepool,
    /// Refined vectors against the plain mean of the other sequence.
    Intra,
    /// Raw reference vectors against their attentively aligned counterparts.
    Inter,
}

impl DistanceMode {
    pub const ALL: [DistanceMode; 4] = [Self::Avepool, Self::Intra, Self::Inter, Self::Duatm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Duatm => "duatm",
            Self::Avepool => "avepool",
            Self::Intra => "intra",
            Self::Inter => "inter",
        }
    }

    pub fn uses_filters(self) -> bool {
        !matches!(self, Self::Avepool)
    }
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "duatm" => Ok(Self::Duatm),
            "avepool" => Ok(Self::Avepool),
            "intra" => Ok(Self::Intra),
            "inter" => Ok(Self::Inter),
            other => Err(Error::Config(format!(
                "unknown distance mode {other:?} (expected duatm, avepool, intra or inter)"
            ))),
        }
    }
}

impl std::fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Transform layer of the dual attention block: `W` (`D×D`), `b` and BN.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherParams {
    pub transform: Linear,
    pub bn: BatchNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct MatcherVars<'t> {
    pub transform: LinearVars<'t>,
    pub bn: BatchNormVars<'t>,
}

impl MatcherParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            transform: Linear::new(rng, dim, dim),
            bn: BatchNorm::new(dim),
        }
    }

    /// `W = 0`, `b = 0`: every filter is zero and attention is uniform.
    pub fn zeros(dim: usize) -> Self {
        Self {
            transform: Linear {
                weight: Array::zeros(&[dim, dim]),
                bias: Array::zeros(&[dim]),
            },
            bn: BatchNorm::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.transform.inputs()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>, prefix: &str) -> MatcherVars<'t> {
        MatcherVars {
            transform: self.transform.bind(binder, &join(prefix, "transform")),
            bn: self.bn.bind(binder, &join(prefix, "bn")),
        }
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> MatcherVars<'t> {
        MatcherVars {
            transform: self.transform.constants(tape),
            bn: self.bn.constants(tape),
        }
    }

    /// Filters for every row of `x` (`N × D`). In training mode the BN
    /// statistics are taken over all `N` rows and returned for the caller
    /// to fold into the running estimates.
    pub fn filters<'t>(
        &self,
        vars: &MatcherVars<'t>,
        x: Var<'t>,
        mode: BnMode,
    ) -> Result<(Var<'t>, Option<BnUpdate>)> {
        let d = self.dim();
        let cols = x.value().cols();
        if cols != d {
            return Err(Error::DimensionMismatch { expected: d, found: cols });
        }
        let z = vars.transform.forward(x)?;
        let (normed, update) = self.bn.forward(z, &vars.bn, mode)?;
        Ok((normed.relu(), update))
    }

    /// Inference-mode filters for every vector of a sequence.
    pub fn filters_inference(&self, seq: &Array) -> Result<Array> {
        let tape = Tape::no_grad();
        let vars = self.constants(&tape);
        let (q, _) = self.filters(&vars, tape.leaf(seq.clone()), BnMode::Inference)?;
        Ok((*q.value()).clone())
    }
}

impl Parameters for MatcherParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array)) {
        self.transform.visit(&join(prefix, "transform"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array)) {
        self.transform.visit_mut(&join(prefix, "transform"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Differentiable building blocks used by training and by the array-level
/// API below.
pub mod graph {
    use super::*;

    /// A sequence on a tape, with its filters when the mode needs them.
    #[derive(Clone, Copy, Debug)]
    pub struct SeqVars<'t> {
        pub x: Var<'t>,
        pub q: Option<Var<'t>>,
    }

    #[derive(Clone, Copy, Debug)]
    pub struct DistanceVars<'t> {
        pub d_a: Var<'t>,
        pub d_b: Var<'t>,
        pub distance: Var<'t>,
    }

    /// Softmax attention of every filter row over `memory`. Returns the
    /// `R × S` weights and the `R × D` attentive combinations.
    pub fn attend<'t>(q: Var<'t>, memory: Var<'t>) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let weights = q.matmul_nt(memory)?.softmax();
        let combined = weights.matmul(memory)?;
        Ok((weights, combined))
    }

    fn filters_of<'t>(s: &SeqVars<'t>) -> Result<Var<'t>> {
        s.q.ok_or_else(|| Error::Config("distance mode needs filters".into()))
    }

    /// Per-reference distances with `own` as the reference sequence.
    pub fn direction<'t>(own: &SeqVars<'t>, other: &SeqVars<'t>, mode: DistanceMode) -> Result<Var<'t>> {
        let d = match mode {
            DistanceMode::Duatm => {
                let q = filters_of(own)?;
                let (_, refined) = attend(q, own.x)?;
                let (_, aligned) = attend(q, other.x)?;
                refined.row_distances(aligned)?
            }
            DistanceMode::Intra => {
                let q = filters_of(own)?;
                let (_, refined) = attend(q, own.x)?;
                refined.sub_row(other.x.mean_axis(0)?)?.row_norms()?
            }
            DistanceMode::Inter => {
                let q = filters_of(own)?;
                let (_, aligned) = attend(q, other.x)?;
                own.x.row_distances(aligned)?
            }
            DistanceMode::Avepool => own.x.mean_axis(0)?.l2_distance(other.x.mean_axis(0)?)?,
        };
        Ok(d)
    }

    /// Symmetric sequence distance `mean(d_a)/2 + mean(d_b)/2`.
    pub fn pair_distance<'t>(a: &SeqVars<'t>, b: &SeqVars<'t>, mode: DistanceMode) -> Result<DistanceVars<'t>> {
        let (da, db) = (a.x.value().cols(), b.x.value().cols());
        if da != db {
            return Err(Error::DimensionMismatch { expected: da, found: db });
        }
        let d_a = direction(a, b, mode)?;
        let d_b = direction(b, a, mode)?;
        let distance = d_a.mean().scale(0.5).add(d_b.mean().scale(0.5))?;
        Ok(DistanceVars { d_a, d_b, distance })
    }
}

use graph::SeqVars;

/// Non-negative attention filter for one reference vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFilter {
    pub q: Vec<f64>,
}

/// Refined (`x̄`) and aligned (`x̂`) counterparts of one reference vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub refined: Vec<f64>,
    pub aligned: Vec<f64>,
}

/// Per-direction element distances and their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDistanceReport {
    pub d_a: Vec<f64>,
    pub d_b: Vec<f64>,
    pub distance: f64,
}

fn row_matrix(v: &[f64]) -> Result<Array> {
    Ok(Array::matrix(1, v.len(), v.to_vec())?)
}

/// `q = ReLU(BN(W x + b))` with BN in inference mode.
pub fn compute_filter(x_ref: &[f64], params: &MatcherParams) -> Result<AttentionFilter> {
    let q = params.filters_inference(&row_matrix(x_ref)?)?;
    Ok(AttentionFilter { q: q.into_data() })
}

/// Attention weights of `q` over `memory` and the weighted combination.
pub fn attend(q: &AttentionFilter, memory: &FeatureSequence) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.q.len() != memory.dim() {
        return Err(Error::DimensionMismatch {
            expected: memory.dim(),
            found: q.q.len(),
        });
    }
    let tape = Tape::no_grad();
    let (w, c) = graph::attend(tape.leaf(row_matrix(&q.q)?), tape.leaf(memory.vectors().clone()))?;
    let (w, c) = (w.value(), c.value());
    Ok((w.data().to_vec(), c.data().to_vec()))
}

/// One shared filter from `x_ref` refines it over `own` and aligns it
/// against `other`.
pub fn dual_attention(
    x_ref: &[f64],
    own: &FeatureSequence,
    other: &FeatureSequence,
    params: &MatcherParams,
) -> Result<AlignedPair> {
    if own.dim() != other.dim() {
        return Err(Error::DimensionMismatch {
            expected: own.dim(),
            found: other.dim(),
        });
    }
    let q = compute_filter(x_ref, params)?;
    let (_, refined) = attend(&q, own)?;
    let (_, aligned) = attend(&q, other)?;
    Ok(AlignedPair { refined, aligned })
}

/// A sequence together with its inference-mode filters, ready for
/// repeated distance evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub seq: Array,
    pub filters: Option<Array>,
}

impl Embedded {
    pub fn new(seq: Array, params: &MatcherParams, mode: DistanceMode) -> Result<Self> {
        let filters = if mode.uses_filters() {
            Some(params.filters_inference(&seq)?)
        } else {
            None
        };
        Ok(Self { seq, filters })
    }

    fn on<'t>(&self, tape: &'t Tape) -> SeqVars<'t> {
        SeqVars {
            x: tape.leaf(self.seq.clone()),
            q: self.filters.as_ref().map(|f| tape.leaf(f.clone())),
        }
    }
}

/// Distance between two prepared sequences. Pure; safe to call from many
/// threads.
pub fn embedded_distance(a: &Embedded, b: &Embedded, mode: DistanceMode) -> Result<PairDistanceReport> {
    let tape = Tape::no_grad();
    let out = graph::pair_distance(&a.on(&tape), &b.on(&tape), mode)?;
    Ok(PairDistanceReport {
        d_a: out.d_a.value().data().to_vec(),
        d_b: out.d_b.value().data().to_vec(),
        distance: out.distance.item(),
    })
}

/// Row-major `n × n` distance matrix with a zero diagonal.
pub fn pairwise_distances(items: &[Embedded], mode: DistanceMode, exec: Execution) -> Result<Vec<f64>> {
    let n = items.len();
    let upper = map_indices(n, exec, |i| {
        (i + 1..n)
            .map(|j| Ok(embedded_distance(&items[i], &items[j], mode)?.distance))
            .collect::<Result<Vec<f64>>>()
    })?;
    let mut out = vec![0.0; n * n];
    for (i, row) in upper.into_iter().enumerate() {
        for (k, d) in row.into_iter().enumerate() {
            let j = i + 1 + k;
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Ok(out)
}

/// Row-major `queries × gallery` distance matrix.
pub fn cross_distances(
    queries: &[Embedded],
    gallery: &[Embedded],
    mode: DistanceMode,
    exec: Execution,
) -> Result<Vec<f64>> {
    let rows = map_indices(queries.len(), exec, |i| {
        gallery
            .iter()
            .map(|g| Ok(embedded_distance(&queries[i], g, mode)?.distance))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(rows.concat())
}

/// Inference-mode distance under any mode.
pub fn distance_with_mode(
    a: &FeatureSequence,
    b: &FeatureSequence,
    params: &MatcherParams,
    mode: DistanceMode,
) -> Result<PairDistanceReport> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let ea = Embedded::new(a.vectors().clone(), params, mode)?;
    let eb = Embedded::new(b.vectors().clone(), params, mode)?;
    embedded_distance(&ea, &eb, mode)
}

/// Dual attention distance `‖A − B‖` with inference-mode BN.
pub fn sequence_distance(a: &FeatureSequence, b: &FeatureSequence, params: &MatcherParams) -> Result<PairDistanceReport> {
    distance_with_mode(a, b, params, DistanceMode::Duatm)
}

/// `‖mean(A) − mean(B)‖₂`.
pub fn baseline_avepool_distance(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    let params = MatcherParams::zeros(a.dim());
    Ok(distance_with_mode(a, b, &params, DistanceMode::Avepool)?.distance)
}

pub fn intra_only_distance(a: &FeatureSequence, b: &FeatureSequence, params: &MatcherParams) -> Result<PairDistanceReport> {
    distance_with_mode(a, b, params, DistanceMode::Intra)
}

pub fn inter_only_distance(a: &FeatureSequence, b: &FeatureSequence, params: &MatcherParams) -> Result<PairDistanceReport> {
    distance_with_mode(a, b, params, DistanceMode::Inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::from_rows(rows, "s").unwrap()
    }

    fn identity_params(dim: usize) -> MatcherParams {
        MatcherParams {
            transform: Linear {
                weight: Array::eye(dim),
                bias: Array::zeros(&[dim]),
            },
            bn: BatchNorm::new(dim),
        }
    }

    #[test]
    fn identity_transform_filter() {
        let q = compute_filter(&[0.6, -0.8], &identity_params(2)).unwrap();
        assert!((q.q[0] - 0.6).abs() < 1e-5);
        assert_eq!(q.q[1], 0.0);
    }

    #[test]
    fn zero_transform_gives_zero_filter() {
        let q = compute_filter(&[0.3, 0.9], &MatcherParams::zeros(2)).unwrap();
        assert_eq!(q.q, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_filter_attends_uniformly() {
        let memory = seq(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let (w, c) = attend(&AttentionFilter { q: vec![0.0, 0.0] }, &memory).unwrap();
        for wi in &w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((c[0] - 1.6 / 3.0).abs() < 1e-15);
        assert!((c[1] - 1.8 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_element_attention() {
        let memory = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (w, c) = attend(&AttentionFilter { q: vec![1.0, 0.0] }, &memory).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((c[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((c[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn single_element_memory() {
        let memory = seq(&[&[0.6, 0.8]]);
        let (w, c) = attend(&AttentionFilter { q: vec![3.0, 1.0] }, &memory).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(c, vec![0.6, 0.8]);
    }

    #[test]
    fn identical_memories_give_identical_pair() {
        let s = seq(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let p = dual_attention(&[0.6, 0.8], &s, &s, &identity_params(2)).unwrap();
        assert_eq!(p.refined, p.aligned);
    }

    #[test]
    fn zero_params_pair_is_means() {
        let a = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = seq(&[&[0.6, 0.8], &[0.8, 0.6], &[1.0, 0.0]]);
        let p = dual_attention(&[1.0, 0.0], &a, &b, &MatcherParams::zeros(2)).unwrap();
        assert!((p.refined[0] - 0.5).abs() < 1e-15 && (p.refined[1] - 0.5).abs() < 1e-15);
        assert!((p.aligned[0] - 0.8).abs() < 1e-15);
        assert!((p.aligned[1] - 1.4 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_vectors_reduce_to_euclidean() {
        let u = seq(&[&[1.0, 0.0]]);
        let v = seq(&[&[0.0, 1.0]]);
        let r = sequence_distance(&u, &v, &MatcherParams::zeros(2)).unwrap();
        assert!((r.distance - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.d_a.len(), 1);
    }

    #[test]
    fn avepool_baseline_cases() {
        let a = seq(&[&[1.0, 0.0]]);
        let b = seq(&[&[0.0, 1.0]]);
        assert!((baseline_avepool_distance(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let c = seq(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        assert_eq!(baseline_avepool_distance(&c, &c).unwrap(), 0.0);
        let permuted = c.permuted(&[2, 0, 1]);
        assert!(baseline_avepool_distance(&c, &permuted).unwrap() < 1e-15);
    }

    #[test]
    fn inter_only_with_zero_params_uses_other_mean() {
        let a = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = seq(&[&[0.6, 0.8], &[0.8, 0.6]]);
        let r = inter_only_distance(&a, &b, &MatcherParams::zeros(2)).unwrap();
        let mean_b = [0.7, 0.7];
        let expected0 = ((1.0 - mean_b[0]) * (1.0f64 - mean_b[0]) + mean_b[1] * mean_b[1]).sqrt();
        assert!((r.d_a[0] - expected0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let a = seq(&[&[1.0, 0.0]]);
        let b = seq(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            sequence_distance(&a, &b, &MatcherParams::zeros(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in DistanceMode::ALL {
            assert_eq!(m.name().parse::<DistanceMode>().unwrap(), m);
        }
        assert!("cosine".parse::<DistanceMode>().is_err());
    }
}
