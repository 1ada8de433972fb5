//! Library routines against slow, obviously-correct reference versions.

use kdselect_core::detectors::matrix_profile::matrix_profile;
use kdselect_core::metrics::auc_pr;
use kdselect_core::prune::LshIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Recomputes precision and recall from scratch at every distinct threshold.
fn brute_auc_pr(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count();
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count();
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

#[test]
fn auc_pr_matches_threshold_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..500 {
        let n = rng.random_range(1..=100);
        // coarse scores force plenty of ties
        let levels = rng.random_range(1..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        if !labels.contains(&1) {
            labels[rng.random_range(0..n)] = 1;
        }
        assert_eq!(auc_pr(&scores, &labels).unwrap(), brute_auc_pr(&scores, &labels), "trial {trial}");
    }
}

fn znorm(x: &[f64]) -> Option<Vec<f64>> {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
    (sd > 1e-8 * (1.0 + mean.abs())).then(|| x.iter().map(|v| (v - mean) / sd).collect())
}

/// All pairs, distances measured directly on normalized copies.
fn brute_matrix_profile(values: &[f64], m: usize) -> Vec<f64> {
    let excl = m.div_ceil(4);
    let ns = values.len() - m + 1;
    let subs: Vec<Option<Vec<f64>>> = (0..ns).map(|i| znorm(&values[i..i + m])).collect();
    (0..ns)
        .map(|i| {
            (0..ns)
                .filter(|&j| i.abs_diff(j) > excl)
                .map(|j| match (&subs[i], &subs[j]) {
                    (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
                    (None, None) => 0.0,
                    _ => (m as f64).sqrt(),
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn matrix_profile_matches_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..12 {
        let n = rng.random_range(64..=512);
        let m = rng.random_range(4..=32);
        let mut values: Vec<f64> = Vec::with_capacity(n);
        let mut level: f64 = 0.0;
        for t in 0..n {
            level += rng.sample::<f64, _>(StandardNormal) * 0.3;
            let periodic = (t as f64 * 0.2).sin() * 2.0;
            values.push(periodic + level + rng.sample::<f64, _>(StandardNormal) * 0.1);
        }
        if trial % 3 == 0 {
            // flat stretch and an exact repeat stress the edge conventions
            let s = n / 3;
            values[s..s + m + 5].fill(1.5);
            let (a, b) = (n / 2, n / 2 + 2 * m);
            if b + m <= n {
                let copy = values[a..a + m].to_vec();
                values[b..b + m].copy_from_slice(&copy);
            }
        }
        let fast = matrix_profile(&values, m).unwrap();
        let slow = brute_matrix_profile(&values, m);
        for (i, (f, s)) in fast.distances.iter().zip(&slow).enumerate() {
            assert!((f - s).abs() < 1e-9, "trial {trial} n={n} m={m} i={i}: {f} vs {s}");
        }
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn simhash_bit_collisions_follow_angle() {
    let dim = 16;
    let bits = 14;
    let index = LshIndex::build(&[vec![0.0; dim]], bits, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for theta in [0.3, std::f64::consts::FRAC_PI_4, 1.2, std::f64::consts::FRAC_PI_2, 2.5] {
        let trials = 10_000;
        let mut agree = 0usize;
        for _ in 0..trials {
            let x = unit((0..dim).map(|_| rng.sample(StandardNormal)).collect());
            let r: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let dot: f64 = r.iter().zip(&x).map(|(a, b)| a * b).sum();
            let perp = unit(r.iter().zip(&x).map(|(a, b)| a - dot * b).collect());
            let y: Vec<f64> = x.iter().zip(&perp).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect();
            let diff = index.code(&x) ^ index.code(&y);
            agree += bits - diff.count_ones() as usize;
        }
        let rate = agree as f64 / (trials * bits) as f64;
        let expected = 1.0 - theta / std::f64::consts::PI;
        assert!((rate - expected).abs() < 0.03, "theta {theta}: {rate} vs {expected}");
    }
}
