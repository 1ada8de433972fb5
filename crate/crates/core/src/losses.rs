//! Training objectives: hard-label cross-entropy, performance-informed soft
//! labels, and the symmetric InfoNCE alignment between series and metadata
//! projections.
//!
//! Classification losses return gradients with respect to the logits
//! (`p_hat - target`); InfoNCE returns gradients with respect to the raw,
//! un-normalized projection outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::PerformanceVector;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("InfoNCE needs a batch of at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
}

/// Temperature softmax over detector performance.
pub fn soft_label(performance: &PerformanceVector, t_soft: f64) -> SoftLabel {
    let scaled: Vec<f64> = performance.values.iter().map(|p| p / t_soft).collect();
    SoftLabel {
        probs: crate::model::softmax(&scaled),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassLoss {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    /// True when a needed probability was clamped at [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `-log p_hat[y]`; gradient `p_hat - onehot(y)` at the logits.
pub fn ce_loss(probs: &[f64], label: usize) -> ClassLoss {
    let p = probs[label];
    let clamped = p < PROB_FLOOR;
    let mut grad_logits = probs.to_vec();
    grad_logits[label] -= 1.0;
    ClassLoss {
        loss: -p.max(PROB_FLOOR).ln(),
        grad_logits,
        clamped,
    }
}

/// Cross-entropy against a soft target, `-sum_j p_j log p_hat_j`.
pub fn pisl_loss(probs: &[f64], soft: &SoftLabel) -> ClassLoss {
    let mut loss = 0.0;
    let mut clamped = false;
    for (&q, &p) in soft.probs.iter().zip(probs) {
        if q > 0.0 {
            clamped |= p < PROB_FLOOR;
            loss -= q * p.max(PROB_FLOOR).ln();
        }
    }
    let total: f64 = soft.probs.iter().sum();
    let grad_logits = probs.iter().zip(&soft.probs).map(|(p, q)| total * p - q).collect();
    ClassLoss {
        loss,
        grad_logits,
        clamped,
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    /// Weighted mean of the per-pair terms.
    pub loss: f64,
    /// Per pair: mean of its series->text and text->series cross-entropies.
    pub per_pair: Vec<f64>,
    pub grad_series: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
}

const NORM_FLOOR: f64 = 1e-12;

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Backprop through `u = v / |v|`. A vanishing vector has no direction to
/// move, so it gets a zero gradient rather than one scaled by `1 / floor`.
fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    if norm <= NORM_FLOOR {
        return vec![0.0; unit.len()];
    }
    let dot: f64 = unit.iter().zip(grad_unit).map(|(u, g)| u * g).sum();
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * dot) / norm).collect()
}

/// Symmetric InfoNCE over cosine similarities divided by `temperature`.
///
/// Pair `i` is the positive for row and column `i`. With `weights`, the
/// loss is `(1/N) sum_i w_i * per_pair[i]`, which is how pruning rescale
/// factors reach this term.
pub fn infonce_loss(
    series: &[Vec<f64>],
    text: &[Vec<f64>],
    temperature: f64,
    weights: Option<&[f64]>,
) -> Result<InfoNceOutput, LossError> {
    let n = series.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if text.len() != n {
        return Err(LossError::Dimension(format!("{n} series vs {} text vectors", text.len())));
    }
    if !(temperature > 0.0) {
        return Err(LossError::Temperature(temperature));
    }
    let dim = series[0].len();
    if series.iter().chain(text).any(|v| v.len() != dim) {
        return Err(LossError::Dimension("projection vectors differ in length".into()));
    }
    let ones = vec![1.0; n];
    let w = weights.unwrap_or(&ones);

    let (su, sn): (Vec<_>, Vec<_>) = series.iter().map(|v| normalize(v)).unzip();
    let (tu, tn): (Vec<_>, Vec<_>) = text.iter().map(|v| normalize(v)).unzip();
    let logits: Vec<Vec<f64>> = su
        .iter()
        .map(|a| tu.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / temperature).collect())
        .collect();

    // d loss / d logits accumulated from both directions
    let mut dlogits = vec![vec![0.0; n]; n];
    let mut per_pair = vec![0.0; n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        // series i against all texts (row i)
        let row = crate::model::softmax(&logits[i]);
        let row_loss = -row[i].max(PROB_FLOOR).ln();
        // text i against all series (column i)
        let col_logits: Vec<f64> = (0..n).map(|k| logits[k][i]).collect();
        let col = crate::model::softmax(&col_logits);
        let col_loss = -col[i].max(PROB_FLOOR).ln();
        per_pair[i] = 0.5 * (row_loss + col_loss);
        for k in 0..n {
            let target = if k == i { 1.0 } else { 0.0 };
            dlogits[i][k] += w[i] * scale * (row[k] - target);
            dlogits[k][i] += w[i] * scale * (col[k] - target);
        }
    }
    let loss = per_pair.iter().zip(w).map(|(l, wi)| l * wi).sum::<f64>() / n as f64;

    let mut grad_su = vec![vec![0.0; dim]; n];
    let mut grad_tu = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for k in 0..n {
            let g = dlogits[i][k] / temperature;
            if g == 0.0 {
                continue;
            }
            for d in 0..dim {
                grad_su[i][d] += g * tu[k][d];
                grad_tu[k][d] += g * su[i][d];
            }
        }
    }
    let grad_series = (0..n).map(|i| normalize_backward(&su[i], sn[i], &grad_su[i])).collect();
    let grad_text = (0..n).map(|i| normalize_backward(&tu[i], tn[i], &grad_tu[i])).collect();
    Ok(InfoNceOutput {
        loss,
        per_pair,
        grad_series,
        grad_text,
    })
}

/// Which auxiliary objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossFlags {
    pub pisl: bool,
    pub mki: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pisl: f64,
    pub mki: f64,
    pub total: f64,
}

/// Effective `(ce, pisl, mki)` weights: `(1 - alpha, alpha, lambda)` with
/// disabled terms zeroed.
pub fn loss_weights(alpha: f64, lambda: f64, flags: LossFlags) -> (f64, f64, f64) {
    let alpha = if flags.pisl { alpha } else { 0.0 };
    let lambda = if flags.mki { lambda } else { 0.0 };
    (1.0 - alpha, alpha, lambda)
}

/// `(1 - alpha) ce + alpha pisl + lambda mki`, disabled terms contributing 0.
pub fn combine(ce: f64, pisl: f64, mki: f64, alpha: f64, lambda: f64, flags: LossFlags) -> LossBreakdown {
    let (w_ce, w_pisl, w_mki) = loss_weights(alpha, lambda, flags);
    let pisl = if flags.pisl { pisl } else { 0.0 };
    let mki = if flags.mki { mki } else { 0.0 };
    // zero-weight terms are skipped so a disabled module cannot leak NaN
    let mut total = w_ce * ce;
    if w_pisl != 0.0 {
        total += w_pisl * pisl;
    }
    if w_mki != 0.0 {
        total += w_mki * mki;
    }
    LossBreakdown { ce, pisl, mki, total }
}
