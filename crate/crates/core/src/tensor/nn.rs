//! Parameterised building blocks shared by the extractor, matcher and
//! classifier head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Array, Tape, TensorError, Var};

/// Whether a named tensor is trained by gradient descent or is running state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Enumerates the named tensors of a module in a stable order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array));

    fn named_tensors(&self, prefix: &str) -> Vec<(String, TensorKind, Array)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, kind, a| out.push((name.to_string(), kind, a.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Places parameters on a tape and remembers which node belongs to which
/// name so gradients can be collected after `backward`.
pub struct Binder<'t> {
    tape: &'t Tape,
    bound: Vec<(String, Var<'t>)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            bound: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&mut self, name: String, value: &Array) -> Var<'t> {
        let v = self.tape.leaf(value.clone());
        self.bound.push((name, v));
        v
    }

    pub fn vars(&self) -> &[(String, Var<'t>)] {
        &self.bound
    }

    pub fn gradients(&self) -> BTreeMap<String, Array> {
        self.bound
            .iter()
            .map(|(name, v)| (name.clone(), self.tape.grad(*v)))
            .collect()
    }
}

/// Uniform initialisation in `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::from_parts(shape.to_vec(), data)
}

/// Fully connected layer `y = x·Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array,
    pub bias: Array,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: uniform_init(rng, &[outputs, inputs], inputs),
            bias: uniform_init(rng, &[outputs], inputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>, prefix: &str) -> LinearVars<'t> {
        LinearVars {
            weight: binder.param(join(prefix, "weight"), &self.weight),
            bias: binder.param(join(prefix, "bias"), &self.bias),
        }
    }

    /// Binds the weights as constants on a gradient-free pass.
    pub fn constants<'t>(&self, tape: &'t Tape) -> LinearVars<'t> {
        LinearVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl<'t> LinearVars<'t> {
    /// Applies the layer to every row of `x` (`rows × in`).
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul_nt(self.weight)?.add_row(self.bias)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array)) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array)) {
        f(&join(prefix, "weight"), TensorKind::Param, &mut self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Training,
    Inference,
}

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array,
    pub beta: Array,
    pub running_mean: Array,
    pub running_var: Array,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormVars<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
}

/// Batch statistics from a training-mode forward pass, to be folded into
/// the running estimates once the step is accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean: Vec<f64>,
    /// Unbiased (n-1) variance.
    pub var: Vec<f64>,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array::ones(&[channels]),
            beta: Array::zeros(&[channels]),
            running_mean: Array::zeros(&[channels]),
            running_var: Array::ones(&[channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>, prefix: &str) -> BatchNormVars<'t> {
        BatchNormVars {
            gamma: binder.param(join(prefix, "gamma"), &self.gamma),
            beta: binder.param(join(prefix, "beta"), &self.beta),
        }
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> BatchNormVars<'t> {
        BatchNormVars {
            gamma: tape.leaf(self.gamma.clone()),
            beta: tape.leaf(self.beta.clone()),
        }
    }

    /// Normalises the channels (columns) of `x` (`rows × channels`).
    ///
    /// Training mode uses the statistics of the rows of this call and
    /// returns them as a [`BnUpdate`]; inference mode is the affine map
    /// given by the running statistics. `self` is never modified.
    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        vars: &BatchNormVars<'t>,
        mode: BnMode,
    ) -> Result<(Var<'t>, Option<BnUpdate>), TensorError> {
        let xv = x.value();
        let c = self.channels();
        if xv.ndim() != 2 || xv.cols() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: xv.shape().to_vec(),
                right: vec![c],
            });
        }
        let rows = xv.rows();
        let (gamma, beta) = (vars.gamma.value(), vars.beta.value());
        let eps = self.epsilon;
        match mode {
            BnMode::Inference => {
                let inv_std: Vec<f64> = self
                    .running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + eps).sqrt())
                    .collect();
                let mean = self.running_mean.data().to_vec();
                let mut xhat = xv.data().to_vec();
                for row in xhat.chunks_mut(c) {
                    for k in 0..c {
                        row[k] = (row[k] - mean[k]) * inv_std[k];
                    }
                }
                let y = affine(&xhat, gamma.data(), beta.data(), c);
                let tape = x.tape();
                let out = tape.push(
                    "batch_norm_inference",
                    Array::from_parts(vec![rows, c], y),
                    &[x, vars.gamma, vars.beta],
                    Some(move |g: &Array| {
                        let mut dx = g.data().to_vec();
                        for row in dx.chunks_mut(c) {
                            for k in 0..c {
                                row[k] *= gamma.data()[k] * inv_std[k];
                            }
                        }
                        let (dgamma, dbeta) = affine_param_grads(g.data(), &xhat, c);
                        vec![
                            Array::from_parts(vec![rows, c], dx),
                            Array::from_parts(vec![c], dgamma),
                            Array::from_parts(vec![c], dbeta),
                        ]
                    }),
                );
                Ok((out, None))
            }
            BnMode::Training => {
                if rows < 2 {
                    return Err(TensorError::DegenerateBatch { rows });
                }
                let n = rows as f64;
                let mut mean = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for k in 0..c {
                        mean[k] += row[k];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for k in 0..c {
                        let d = row[k] - mean[k];
                        var[k] += d * d;
                    }
                }
                let unbiased: Vec<f64> = var.iter().map(|v| v / (n - 1.0)).collect();
                var.iter_mut().for_each(|v| *v /= n);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = xv.data().to_vec();
                for row in xhat.chunks_mut(c) {
                    for k in 0..c {
                        row[k] = (row[k] - mean[k]) * inv_std[k];
                    }
                }
                let y = affine(&xhat, gamma.data(), beta.data(), c);
                let tape = x.tape();
                let out = tape.push(
                    "batch_norm_training",
                    Array::from_parts(vec![rows, c], y),
                    &[x, vars.gamma, vars.beta],
                    Some(move |g: &Array| {
                        let (dgamma, dbeta) = affine_param_grads(g.data(), &xhat, c);
                        let mut dx = vec![0.0; rows * c];
                        for (i, row) in dx.chunks_mut(c).enumerate() {
                            for k in 0..c {
                                let gi = g.data()[i * c + k];
                                let xh = xhat[i * c + k];
                                row[k] = gamma.data()[k] * inv_std[k] / n
                                    * (n * gi - dbeta[k] - xh * dgamma[k]);
                            }
                        }
                        vec![
                            Array::from_parts(vec![rows, c], dx),
                            Array::from_parts(vec![c], dgamma),
                            Array::from_parts(vec![c], dbeta),
                        ]
                    }),
                );
                Ok((out, Some(BnUpdate { mean, var: unbiased })))
            }
        }
    }

    pub fn apply_update(&mut self, update: &BnUpdate) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&update.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&update.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

fn affine(xhat: &[f64], gamma: &[f64], beta: &[f64], c: usize) -> Vec<f64> {
    let mut y = xhat.to_vec();
    for row in y.chunks_mut(c) {
        for k in 0..c {
            row[k] = gamma[k] * row[k] + beta[k];
        }
    }
    y
}

fn affine_param_grads(g: &[f64], xhat: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
        for k in 0..c {
            dgamma[k] += grow[k] * xrow[k];
            dbeta[k] += grow[k];
        }
    }
    (dgamma, dbeta)
}

impl Parameters for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Array)) {
        f(&join(prefix, "gamma"), TensorKind::Param, &self.gamma);
        f(&join(prefix, "beta"), TensorKind::Param, &self.beta);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Array)) {
        f(&join(prefix, "gamma"), TensorKind::Param, &mut self.gamma);
        f(&join(prefix, "beta"), TensorKind::Param, &mut self.beta);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_stats(a: &Array) -> (Vec<f64>, Vec<f64>) {
        let (r, c) = (a.rows(), a.cols());
        let mean: Vec<f64> = (0..c).map(|k| (0..r).map(|i| a.get2(i, k)).sum::<f64>() / r as f64).collect();
        let var = (0..c)
            .map(|k| (0..r).map(|i| (a.get2(i, k) - mean[k]).powi(2)).sum::<f64>() / r as f64)
            .collect();
        (mean, var)
    }

    #[test]
    fn training_mode_standardises_channels() {
        let tape = Tape::new();
        let bn = BatchNorm::new(3);
        let x = tape.leaf(
            Array::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 0.7], [2.0, 5.0, -1.0], [0.0, 1.0, 0.0]]).unwrap(),
        );
        let (y, update) = bn.forward(x, &bn.constants(&tape), BnMode::Training).unwrap();
        let (mean, var) = column_stats(&y.value());
        for k in 0..3 {
            assert!(mean[k].abs() < 1e-12);
            assert!((var[k] - 1.0).abs() < 1e-4, "var {}", var[k]);
        }
        let update = update.unwrap();
        assert!((update.mean[0] - 1.5).abs() < 1e-12);
        // unbiased variance of [1,3,2,0] = 5/3
        assert!((update.var[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn inference_mode_with_unit_stats_is_identity() {
        let tape = Tape::new();
        let bn = BatchNorm::new(2);
        let data = Array::from_rows(&[[0.3, -0.7]]).unwrap();
        let (y, update) = bn
            .forward(tape.leaf(data.clone()), &bn.constants(&tape), BnMode::Inference)
            .unwrap();
        assert!(update.is_none());
        for (a, b) in y.value().data().iter().zip(data.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_row_training_batch_is_rejected() {
        let tape = Tape::new();
        let bn = BatchNorm::new(2);
        let x = tape.leaf(Array::from_rows(&[[1.0, 2.0]]).unwrap());
        assert_eq!(
            bn.forward(x, &bn.constants(&tape), BnMode::Training).unwrap_err(),
            TensorError::DegenerateBatch { rows: 1 }
        );
    }

    #[test]
    fn row_permutation_permutes_output_and_keeps_stats() {
        let rows = [[0.1, 2.0], [-1.0, 0.5], [0.7, -0.3]];
        let permuted = [rows[2], rows[0], rows[1]];
        let bn = BatchNorm::new(2);
        let tape = Tape::new();
        let (y1, u1) = bn
            .forward(tape.leaf(Array::from_rows(&rows).unwrap()), &bn.constants(&tape), BnMode::Training)
            .unwrap();
        let (y2, u2) = bn
            .forward(tape.leaf(Array::from_rows(&permuted).unwrap()), &bn.constants(&tape), BnMode::Training)
            .unwrap();
        let (y1, y2) = (y1.value(), y2.value());
        for (src, dst) in [(2, 0), (0, 1), (1, 2)] {
            for k in 0..2 {
                assert!((y1.get2(src, k) - y2.get2(dst, k)).abs() < 1e-12);
            }
        }
        let (u1, u2) = (u1.unwrap(), u2.unwrap());
        for k in 0..2 {
            assert!((u1.mean[k] - u2.mean[k]).abs() < 1e-12);
            assert!((u1.var[k] - u2.var[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut bn = BatchNorm::new(1);
        bn.apply_update(&BnUpdate {
            mean: vec![2.0],
            var: vec![3.0],
        });
        assert!((bn.running_mean.item() - 0.2).abs() < 1e-15);
        assert!((bn.running_var.item() - 1.2).abs() < 1e-15);
    }
}
