//! Shared helpers for integration tests: finite differences, brute-force
//! oracles and random instance builders.

#![allow(dead_code)]

use duatm::data::FeatureSequence;
use duatm::rng::{stream_rng, Stream};
use duatm::tensor::{Array, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Synthetic, 1000)
}

pub fn random_array<R: Rng>(rng: &mut R, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_sequence<R: Rng>(rng: &mut R, len: usize, dim: usize) -> FeatureSequence {
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.1 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();
    FeatureSequence::from_rows(&rows, "r").unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` per tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `f` with respect to each of `inputs`.
pub fn gradient_error<F>(inputs: &[Array], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&tape, &vars);
    assert_eq!(out.value().len(), 1, "objective must be scalar");
    out.backward().unwrap();
    let analytic: Vec<Array> = vars.iter().map(|v| v.grad()).collect();

    let eval = |perturbed: &[Array]| {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|a| tape.leaf(a.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic[i].data(), &numeric));
    }
    worst
}

/// Contracts any output with fixed random weights into a scalar.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Var<'t> {
    let w = random_array(&mut rng(seed), &out.shape());
    out.mul(out.tape().leaf(w)).unwrap().sum()
}

/// First-hit ranks and relevant ranks for each query, by counting how
/// many admissible items precede each gallery item.
pub struct OracleRanks {
    pub relevant: Vec<Vec<usize>>,
}

pub fn oracle_ranks(
    dist: &[f64],
    q_labels: &[usize],
    q_cams: &[usize],
    g_labels: &[usize],
    g_cams: &[usize],
) -> OracleRanks {
    let g = g_labels.len();
    let mut relevant = Vec::new();
    for q in 0..q_labels.len() {
        let row = &dist[q * g..(q + 1) * g];
        let admissible = |j: usize| !(g_labels[j] == q_labels[q] && g_cams[j] == q_cams[q]);
        let mut ranks = Vec::new();
        for j in 0..g {
            if !admissible(j) || g_labels[j] != q_labels[q] {
                continue;
            }
            let ahead = (0..g)
                .filter(|&h| admissible(h) && (row[h] < row[j] || (row[h] == row[j] && h < j)))
                .count();
            ranks.push(ahead + 1);
        }
        ranks.sort_unstable();
        relevant.push(ranks);
    }
    OracleRanks { relevant }
}

pub fn oracle_cmc(ranks: &OracleRanks, k_max: usize) -> Vec<f64> {
    let n = ranks.relevant.len() as f64;
    (1..=k_max)
        .map(|k| ranks.relevant.iter().filter(|r| r.first().is_some_and(|&f| f <= k)).count() as f64 / n)
        .collect()
}

pub fn oracle_map(ranks: &OracleRanks) -> f64 {
    let mut total = 0.0;
    for r in &ranks.relevant {
        let mut ap = 0.0;
        for &rank in r {
            let found = r.iter().filter(|&&x| x <= rank).count();
            ap += found as f64 / rank as f64;
        }
        total += ap / r.len() as f64;
    }
    total / ranks.relevant.len() as f64
}

/// Exhaustive batch-hard selection: scan all candidates and keep the
/// first index that attains the extreme value.
pub fn oracle_mining(dist: &[f64], labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let same: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
            let other: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
            let max = same.iter().map(|&j| dist[a * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let min = other.iter().map(|&j| dist[a * n + j]).fold(f64::INFINITY, f64::min);
            let p = *same.iter().find(|&&j| dist[a * n + j] == max).unwrap();
            let q = *other.iter().find(|&&j| dist[a * n + j] == min).unwrap();
            (a, p, q)
        })
        .collect()
}
