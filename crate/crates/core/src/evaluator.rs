//! Single-query retrieval metrics (CMC and mAP) under the cross-camera
//! protocol, and the ablation table built from them.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matcher::{cross_distances, DistanceMode};
use crate::model::Model;
use crate::parallel::Execution;

pub const DEFAULT_K_MAX: usize = 20;

/// Identity and camera annotations of a set of items.
#[derive(Clone, Copy, Debug)]
pub struct Annotations<'a> {
    pub labels: &'a [usize],
    pub cameras: &'a [usize],
}

impl<'a> Annotations<'a> {
    pub fn of(dataset: &'a Dataset) -> Self {
        Self {
            labels: &dataset.labels,
            cameras: &dataset.cameras,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gallery ordering for one query, closest first. Items sharing both the
/// identity and the camera of the query are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query: usize,
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
}

impl RankingResult {
    /// 1-based ranks of the items carrying `label`.
    pub fn hits(&self, label: usize, gallery_labels: &[usize]) -> Vec<usize> {
        self.order
            .iter()
            .enumerate()
            .filter(|(_, &g)| gallery_labels[g] == label)
            .map(|(r, _)| r + 1)
            .collect()
    }
}

/// Ranks one row of query-to-gallery distances.
pub fn rank_gallery(query: usize, distances: &[f64], query_ann: Annotations, gallery: Annotations) -> Result<RankingResult> {
    if distances.len() != gallery.len() {
        return Err(Error::DimensionMismatch {
            expected: gallery.len(),
            found: distances.len(),
        });
    }
    let (label, camera) = (query_ann.labels[query], query_ann.cameras[query]);
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&g| !(gallery.labels[g] == label && gallery.cameras[g] == camera))
        .collect();
    if order.is_empty() {
        return Err(Error::Protocol(format!("query {query} has an empty gallery after exclusions")));
    }
    order.sort_by(|&a, &b| match distances[a].total_cmp(&distances[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let distances = order.iter().map(|&g| distances[g]).collect();
    Ok(RankingResult { query, order, distances })
}

/// Ranks every query given the row-major `queries × gallery` matrix.
pub fn rank_all(dist: &[f64], queries: Annotations, gallery: Annotations) -> Result<Vec<RankingResult>> {
    let g = gallery.len();
    if dist.len() != queries.len() * g {
        return Err(Error::DimensionMismatch {
            expected: queries.len() * g,
            found: dist.len(),
        });
    }
    (0..queries.len())
        .map(|q| rank_gallery(q, &dist[q * g..(q + 1) * g], queries, gallery))
        .collect()
}

/// `cmc[k-1]` is the fraction of queries whose first correct match is at
/// rank `k` or better.
pub fn compute_cmc(rankings: &[RankingResult], query_labels: &[usize], gallery_labels: &[usize], k_max: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k_max];
    for r in rankings {
        if let Some(&first) = r.hits(query_labels[r.query], gallery_labels).first() {
            for c in counts.iter_mut().skip(first - 1) {
                *c += 1;
            }
        }
    }
    let n = rankings.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Mean over queries of average precision.
pub fn compute_map(rankings: &[RankingResult], query_labels: &[usize], gallery_labels: &[usize]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Protocol("no queries".into()));
    }
    let mut total = 0.0;
    for r in rankings {
        let hits = r.hits(query_labels[r.query], gallery_labels);
        if hits.is_empty() {
            return Err(Error::Protocol(format!(
                "query {} has no relevant gallery items",
                r.query
            )));
        }
        let ap: f64 = hits.iter().enumerate().map(|(i, &rank)| (i + 1) as f64 / rank as f64).sum::<f64>() / hits.len() as f64;
        total += ap;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
}

impl MetricReport {
    pub fn from_rankings(rankings: &[RankingResult], query_labels: &[usize], gallery_labels: &[usize], k_max: usize) -> Result<Self> {
        Ok(Self {
            cmc: compute_cmc(rankings, query_labels, gallery_labels, k_max),
            map: compute_map(rankings, query_labels, gallery_labels)?,
            num_queries: rankings.len(),
        })
    }

    /// Rank-`k` accuracy; ranks past the table repeat its last value.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks start at 1");
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Every item of `dataset` is queried against all items of `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset, mode: DistanceMode, exec: Execution) -> Result<MetricReport> {
    evaluate_against(model, dataset, dataset, mode, exec)
}

pub fn evaluate_against(model: &Model, queries: &Dataset, gallery: &Dataset, mode: DistanceMode, exec: Execution) -> Result<MetricReport> {
    let q: Vec<_> = queries.inputs.iter().collect();
    let g: Vec<_> = gallery.inputs.iter().collect();
    let qe = model.embed_all(&q, mode, exec)?;
    let ge = model.embed_all(&g, mode, exec)?;
    let dist = cross_distances(&qe, &ge, mode, exec)?;
    let rankings = rank_all(&dist, Annotations::of(queries), Annotations::of(gallery))?;
    MetricReport::from_rankings(&rankings, &queries.labels, &gallery.labels, DEFAULT_K_MAX)
}

pub const REPORT_HEADER: &str = "mode,R1,R5,R20,mAP";

/// One CSV row per configuration, in the order given.
pub fn ablation_report<S: AsRef<str>>(rows: &[(S, MetricReport)]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for (mode, r) in rows {
        writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", mode.as_ref(), r.rank(1), r.rank(5), r.rank(20), r.map).expect("string write");
    }
    out
}
