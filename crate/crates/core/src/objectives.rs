//! Training objectives: the triplet hinge on sequence distances, the
//! de-correlation penalty on a sequence's Gram matrix, and the identity
//! classification loss on a randomly pooled sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::matcher::{sequence_distance, MatcherParams};
use crate::tensor::nn::{join, Binder, Linear, LinearVars, Parameters, TensorKind};
use crate::tensor::{Array, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Triplet margin.
    pub gamma: f64,
    /// Weight of the de-correlation loss.
    pub lambda1: f64,
    /// Weight of the identity classification loss.
    pub lambda2: f64,
    /// Probability of zeroing each pooling weight.
    pub p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            lambda1: 0.1,
            lambda2: 0.5,
            p: 0.2,
        }
    }
}

impl LossConfig {
    /// Only the triplet term.
    pub fn triplet_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            out.push(format!("gamma must be positive, got {}", self.gamma));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            out.push(format!("p must lie in [0, 1], got {}", self.p));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Fully connected identity classifier over pooled sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub fc: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars<'t> {
    pub fc: LinearVars<'t>,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, num_identities: usize, dim: usize) -> Self {
        Self {
            fc: Linear::new(rng, dim, num_identities),
        }
    }

    pub fn num_identities(&self) -> usize {
        self.fc.outputs()
    }

    pub fn dim(&self) -> usize {
        self.fc.inputs()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>, prefix: &str) -> ClassifierVars<'t> {
        ClassifierVars {
            fc: self.fc.bind(binder, &join(prefix, "fc")),
        }
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> ClassifierVars<'t> {
        ClassifierVars {
            fc: self.fc.constants(tape),
        }
    }
}

impl Parameters for ClassifierHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array)) {
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array)) {
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Convex combination weights for pooling a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingWeights {
    pub omega: Vec<f64>,
    /// Which raw weights the zeroing draw removed. When every weight was
    /// removed the weights fall back to uniform and `fallback` is set.
    pub zeroed: Vec<bool>,
    pub fallback: bool,
}

impl PoolingWeights {
    pub fn uniform(len: usize) -> Self {
        Self {
            omega: vec![1.0 / len as f64; len],
            zeroed: vec![false; len],
            fallback: false,
        }
    }

    /// Raw weights from `U(0,1)`, each zeroed with probability `p`, then
    /// normalised to sum to one.
    pub fn draw<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Self {
        let mut omega = Vec::with_capacity(len);
        let mut zeroed = Vec::with_capacity(len);
        for _ in 0..len {
            let raw: f64 = rng.random();
            let drop = rng.random_bool(p);
            zeroed.push(drop);
            omega.push(if drop { 0.0 } else { raw });
        }
        let total: f64 = omega.iter().sum();
        if total <= 0.0 {
            return Self {
                fallback: true,
                zeroed,
                ..Self::uniform(len)
            };
        }
        for w in &mut omega {
            *w /= total;
        }
        Self {
            omega,
            zeroed,
            fallback: false,
        }
    }

    pub fn as_row(&self) -> Array {
        Array::from_parts(vec![1, self.omega.len()], self.omega.clone())
    }
}

/// Differentiable forms of the three losses.
pub mod graph {
    use super::*;

    /// `max(0, γ + d⁺ − d⁻)`.
    pub fn triplet_hinge<'t>(pos: Var<'t>, neg: Var<'t>, gamma: f64) -> Result<Var<'t>, TensorError> {
        Ok(pos.sub(neg)?.add_scalar(gamma).relu())
    }

    /// `‖I − X Xᵀ‖²_F / N²` over the `N` rows of `x`.
    pub fn decorrelation<'t>(x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let n = x.value().rows();
        let gram = x.matmul_nt(x)?;
        let eye = x.tape().leaf(Array::eye(n));
        Ok(eye.sub(gram)?.sum_squares().scale(1.0 / (n * n) as f64))
    }

    /// `z = Σ ω_i x_i` as a `1 × D` row.
    pub fn pool<'t>(x: Var<'t>, weights: &PoolingWeights) -> Result<Var<'t>, TensorError> {
        x.tape().leaf(weights.as_row()).matmul(x)
    }

    /// Cross-entropy of the head's logits on `z` against `label`.
    pub fn identity_ce<'t>(z: Var<'t>, label: usize, head: &ClassifierVars<'t>) -> Result<Var<'t>> {
        let classes = head.fc.bias.value().len();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(head.fc.forward(z)?.cross_entropy(label)?)
    }
}

/// Triplet hinge on inference-mode dual attention distances.
pub fn triplet_loss(
    anchor: &FeatureSequence,
    positive: &FeatureSequence,
    negative: &FeatureSequence,
    params: &MatcherParams,
    gamma: f64,
) -> Result<f64> {
    let pos = sequence_distance(anchor, positive, params)?.distance;
    let neg = sequence_distance(anchor, negative, params)?.distance;
    Ok(hinge(pos, neg, gamma))
}

pub fn hinge(dist_pos: f64, dist_neg: f64, gamma: f64) -> f64 {
    (gamma + dist_pos - dist_neg).max(0.0)
}

pub fn decorrelation_loss(x: &FeatureSequence) -> Result<f64> {
    let tape = Tape::no_grad();
    Ok(graph::decorrelation(tape.leaf(x.vectors().clone()))?.item())
}

/// Randomly pooled vector and the weights used.
pub fn convex_pool<R: Rng + ?Sized>(x: &FeatureSequence, p: f64, rng: &mut R) -> Result<(Vec<f64>, PoolingWeights)> {
    let weights = PoolingWeights::draw(x.len(), p, rng);
    Ok((pool_with(x, &weights)?, weights))
}

/// Uniform pooling used at evaluation time.
pub fn uniform_pool(x: &FeatureSequence) -> Result<Vec<f64>> {
    pool_with(x, &PoolingWeights::uniform(x.len()))
}

fn pool_with(x: &FeatureSequence, weights: &PoolingWeights) -> Result<Vec<f64>> {
    let tape = Tape::no_grad();
    let z = graph::pool(tape.leaf(x.vectors().clone()), weights)?;
    let z = z.value();
    Ok(z.data().to_vec())
}

pub fn identity_ce_loss<R: Rng + ?Sized>(
    x: &FeatureSequence,
    label: usize,
    head: &ClassifierHead,
    p: f64,
    rng: &mut R,
) -> Result<f64> {
    let weights = PoolingWeights::draw(x.len(), p, rng);
    ce_with(x, label, head, &weights)
}

fn ce_with(x: &FeatureSequence, label: usize, head: &ClassifierHead, weights: &PoolingWeights) -> Result<f64> {
    let tape = Tape::no_grad();
    let vars = head.constants(&tape);
    let z = graph::pool(tape.leaf(x.vectors().clone()), weights)?;
    Ok(graph::identity_ce(z, label, &vars)?.item())
}

/// Components of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub decorrelation: f64,
    pub ce: f64,
}

impl LossBreakdown {
    pub fn compose(triplet: f64, decorrelation: f64, ce: f64, cfg: &LossConfig) -> Self {
        Self {
            total: triplet + cfg.lambda1 * decorrelation + cfg.lambda2 * ce,
            triplet,
            decorrelation,
            ce,
        }
    }
}

/// `ℓ(0) + λ1·mean ℓ(1) + λ2·mean ℓ(2)` on one triplet, the last two
/// averaged over its three sequences.
pub fn combined_loss<R: Rng + ?Sized>(
    triplet: [&FeatureSequence; 3],
    labels: [usize; 3],
    params: &MatcherParams,
    head: &ClassifierHead,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let [a, p, n] = triplet;
    let l0 = triplet_loss(a, p, n, params, cfg.gamma)?;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (x, &label) in triplet.iter().zip(&labels) {
        l1 += decorrelation_loss(x)?;
        l2 += identity_ce_loss(x, label, head, cfg.p, rng)?;
    }
    Ok(LossBreakdown::compose(l0, l1 / 3.0, l2 / 3.0, cfg))
}
