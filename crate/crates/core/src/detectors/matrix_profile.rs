//! Self-join matrix profile with z-normalized Euclidean distance.
//!
//! Dot products are updated row by row (STOMP). Because the correlation form
//! `sqrt(2m(1 - rho))` loses precision near zero, every row's best candidates
//! (those within a small band of the row minimum) are re-measured directly
//! on the normalized subsequences before the minimum is taken.

use super::{DetectorError, DetectorId};

/// Squared-distance band, relative to the row minimum, inside which
/// candidates are re-measured exactly.
const REFINE_BAND: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixProfile {
    /// Distance from each subsequence to its nearest non-trivial neighbor.
    pub distances: Vec<f64>,
    pub indices: Vec<usize>,
    pub subseq_len: usize,
    /// Pairs with `|i - j| <= exclusion` are trivial matches.
    pub exclusion: usize,
}

/// Subsequences whose standard deviation falls below this (relative to
/// `1 + |mean|`) are treated as flat.
pub(crate) fn is_flat(mean: f64, std: f64) -> bool {
    std <= 1e-8 * (1.0 + mean.abs())
}

pub(crate) fn exclusion_zone(m: usize) -> usize {
    m.div_ceil(4)
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn matrix_profile(values: &[f64], m: usize) -> Result<MatrixProfile, DetectorError> {
    if m < 2 {
        return Err(DetectorError::InvalidParams(format!("subsequence length {m} < 2")));
    }
    let n = values.len();
    let exclusion = exclusion_zone(m);
    if n < m || n - m < exclusion + 1 {
        return Err(DetectorError::TooShort {
            detector: DetectorId::Mp,
            len: n,
            min: m + exclusion + 1,
        });
    }
    let ns = n - m + 1;
    let stats: Vec<(f64, f64)> = (0..ns).map(|i| moments(&values[i..i + m])).collect();
    let flat: Vec<bool> = stats.iter().map(|&(mu, sd)| is_flat(mu, sd)).collect();
    let mf = m as f64;

    let direct = |i: usize, j: usize| -> f64 {
        let (mi, si) = stats[i];
        let (mj, sj) = stats[j];
        values[i..i + m]
            .iter()
            .zip(&values[j..j + m])
            .map(|(a, b)| {
                let d = (a - mi) / si - (b - mj) / sj;
                d * d
            })
            .sum::<f64>()
    };

    let first_row: Vec<f64> = (0..ns)
        .map(|j| values[..m].iter().zip(&values[j..j + m]).map(|(a, b)| a * b).sum())
        .collect();
    let mut qt = first_row.clone();
    let mut row_d2 = vec![f64::INFINITY; ns];
    let mut distances = Vec::with_capacity(ns);
    let mut indices = Vec::with_capacity(ns);

    for i in 0..ns {
        if i > 0 {
            for j in (1..ns).rev() {
                qt[j] = qt[j - 1] - values[i - 1] * values[j - 1] + values[i + m - 1] * values[j + m - 1];
            }
            qt[0] = first_row[i];
        }
        let (mi, si) = stats[i];
        let mut best = f64::INFINITY;
        for j in 0..ns {
            if i.abs_diff(j) <= exclusion {
                row_d2[j] = f64::INFINITY;
                continue;
            }
            let d2 = match (flat[i], flat[j]) {
                (true, true) => 0.0,
                (true, false) | (false, true) => mf,
                (false, false) => {
                    let (mj, sj) = stats[j];
                    let rho = ((qt[j] - mf * mi * mj) / (mf * si * sj)).clamp(-1.0, 1.0);
                    2.0 * mf * (1.0 - rho)
                }
            };
            row_d2[j] = d2;
            best = best.min(d2);
        }
        let mut best_exact = f64::INFINITY;
        let mut best_j = usize::MAX;
        for (j, &d2) in row_d2.iter().enumerate() {
            if d2 > best + REFINE_BAND {
                continue;
            }
            let exact = if flat[i] || flat[j] { d2 } else { direct(i, j) };
            if exact < best_exact {
                best_exact = exact;
                best_j = j;
            }
        }
        distances.push(best_exact.max(0.0).sqrt());
        indices.push(best_j);
    }
    Ok(MatrixProfile {
        distances,
        indices,
        subseq_len: m,
        exclusion,
    })
}
