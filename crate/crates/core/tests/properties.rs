mod common;

use common::*;
use duatm::data::FeatureSequence;
use duatm::evaluator::{compute_cmc, compute_map, rank_all, Annotations};
use duatm::matcher::{attend, baseline_avepool_distance, compute_filter, distance_with_mode, sequence_distance, DistanceMode, MatcherParams};
use duatm::mining::mine_hard_triplets;
use duatm::objectives::PoolingWeights;
use duatm::rng::{stream_rng, Stream};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn pair(seed: u64, la: usize, lb: usize, dim: usize) -> (FeatureSequence, FeatureSequence, MatcherParams) {
    let mut r = rng(seed);
    let a = random_sequence(&mut r, la, dim);
    let b = random_sequence(&mut r, lb, dim);
    (a, b, MatcherParams::new(&mut r, dim))
}

fn reversed(n: usize) -> Vec<usize> {
    (0..n).rev().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_symmetric_in_every_mode(seed in any::<u64>(), la in 1usize..8, lb in 1usize..8, dim in 1usize..6) {
        let (a, b, params) = pair(seed, la, lb, dim);
        for mode in DistanceMode::ALL {
            let ab = distance_with_mode(&a, &b, &params, mode).unwrap();
            let ba = distance_with_mode(&b, &a, &params, mode).unwrap();
            prop_assert_eq!(ab.distance.to_bits(), ba.distance.to_bits());
            prop_assert!(ab.distance >= 0.0);
        }
    }

    #[test]
    fn distance_ignores_frame_order(seed in any::<u64>(), la in 1usize..8, lb in 1usize..8, dim in 1usize..6) {
        let (a, b, params) = pair(seed, la, lb, dim);
        let d = sequence_distance(&a, &b, &params).unwrap().distance;
        let p = sequence_distance(&a.permuted(&reversed(la)), &b.permuted(&reversed(lb)), &params).unwrap().distance;
        prop_assert!((d - p).abs() < 1e-12, "{} vs {}", d, p);
    }

    #[test]
    fn self_distance_vanishes(seed in any::<u64>(), len in 1usize..8, dim in 1usize..6) {
        let (a, _, params) = pair(seed, len, 1, dim);
        for mode in [DistanceMode::Duatm, DistanceMode::Avepool] {
            prop_assert!(distance_with_mode(&a, &a, &params, mode).unwrap().distance < 1e-9);
        }
    }

    #[test]
    fn attention_is_a_convex_combination(seed in any::<u64>(), la in 1usize..8, lb in 1usize..8, dim in 1usize..6) {
        let (a, b, params) = pair(seed, la, lb, dim);
        for i in 0..a.len() {
            let q = compute_filter(a.vector(i), &params).unwrap();
            let (w, c) = attend(&q, &b).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..dim {
                let lo = (0..b.len()).map(|m| b.vector(m)[k]).fold(f64::INFINITY, f64::min);
                let hi = (0..b.len()).map(|m| b.vector(m)[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c[k] >= lo - 1e-12 && c[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn avepool_compares_means(seed in any::<u64>(), la in 1usize..8, lb in 1usize..8, dim in 1usize..6) {
        let (a, b, _) = pair(seed, la, lb, dim);
        let mean = |s: &FeatureSequence| -> Vec<f64> {
            (0..dim).map(|k| (0..s.len()).map(|i| s.vector(i)[k]).sum::<f64>() / s.len() as f64).collect()
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let expected = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!((baseline_avepool_distance(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn pooling_weights_are_convex(seed in any::<u64>(), len in 1usize..12, p in 0.0f64..1.0) {
        let w = PoolingWeights::draw(len, p, &mut stream_rng(seed, Stream::Pooling, 0));
        prop_assert!((w.omega.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.omega.iter().all(|&x| x >= 0.0));
        if !w.fallback {
            for (o, z) in w.omega.iter().zip(&w.zeroed) {
                prop_assert!(!z || *o == 0.0);
            }
        }
    }

    #[test]
    fn cmc_is_monotone_and_bounded(dist in prop::collection::vec(0u8..6, 6 * 10), g_labels in prop::collection::vec(0usize..3, 10)) {
        let q_labels: Vec<usize> = (0..6).map(|i| g_labels[i % 10]).collect();
        let q_cams = vec![0; 6];
        let g_cams = vec![1; 10];
        let dist: Vec<f64> = dist.into_iter().map(f64::from).collect();
        let rankings = rank_all(&dist, Annotations { labels: &q_labels, cameras: &q_cams }, Annotations { labels: &g_labels, cameras: &g_cams }).unwrap();
        let cmc = compute_cmc(&rankings, &q_labels, &g_labels, 12);
        prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
        prop_assert_eq!(cmc[11], 1.0);
        let map = compute_map(&rankings, &q_labels, &g_labels).unwrap();
        prop_assert!(map > 0.0 && map <= 1.0);
    }

    #[test]
    fn map_ignores_query_order(dist in prop::collection::vec(0u8..6, 5 * 8), g_labels in prop::collection::vec(0usize..3, 8), order in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let q_labels: Vec<usize> = (0..5).map(|i| g_labels[i]).collect();
        let dist: Vec<f64> = dist.into_iter().map(f64::from).collect();
        let (q_cams, g_cams) = (vec![0; 5], vec![1; 8]);
        let gallery = Annotations { labels: &g_labels, cameras: &g_cams };
        let metrics = |labels: &[usize], dist: &[f64]| {
            let r = rank_all(dist, Annotations { labels, cameras: &q_cams }, gallery).unwrap();
            (compute_cmc(&r, labels, &g_labels, 8), compute_map(&r, labels, &g_labels).unwrap())
        };
        let (cmc, map) = metrics(&q_labels, &dist);
        let shuffled_labels: Vec<usize> = order.iter().map(|&i| q_labels[i]).collect();
        let shuffled_dist: Vec<f64> = order.iter().flat_map(|&i| dist[i * 8..(i + 1) * 8].to_vec()).collect();
        let (cmc2, map2) = metrics(&shuffled_labels, &shuffled_dist);
        prop_assert_eq!(cmc, cmc2);
        prop_assert!((map - map2).abs() < 1e-12);
    }

    #[test]
    fn mined_triplets_respect_labels(p in 2usize..5, v in 2usize..4, values in prop::collection::vec(0u8..5, 200)) {
        let n = p * v;
        let labels: Vec<usize> = (0..n).map(|i| i / v).collect();
        let mut dist = vec![0.0; n * n];
        let mut it = values.into_iter().cycle();
        for i in 0..n {
            for j in i + 1..n {
                let d = f64::from(it.next().unwrap());
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let triplets = mine_hard_triplets(&dist, &labels).unwrap();
        prop_assert_eq!(triplets.len(), n);
        for (a, t) in triplets.iter().enumerate() {
            prop_assert_eq!(t.anchor, a);
            prop_assert!(t.positive != a && labels[t.positive] == labels[a]);
            prop_assert!(labels[t.negative] != labels[a]);
            for j in 0..n {
                if j != a && labels[j] == labels[a] {
                    prop_assert!(dist[a * n + j] <= dist[a * n + t.positive]);
                } else if labels[j] != labels[a] {
                    prop_assert!(dist[a * n + j] >= dist[a * n + t.negative]);
                }
            }
        }
    }

    #[test]
    fn dropping_frames_keeps_distance_finite(seed in any::<u64>(), keep in subsequence((0..6).collect::<Vec<usize>>(), 1..=6)) {
        let (a, b, params) = pair(seed, 6, 4, 3);
        let d = sequence_distance(&a.permuted(&keep), &b, &params).unwrap();
        prop_assert!(d.distance.is_finite());
        prop_assert_eq!(d.d_a.len(), keep.len());
        prop_assert_eq!(d.d_b.len(), 4);
    }
}
