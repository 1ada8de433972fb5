//! AUC-PR and per-window performance labels.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabeledSeries, WindowSample};
use crate::detectors::{DetectorId, ZooOutput};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC-PR is undefined without positive labels")]
    NoPositives,
    #[error("no detector traces for series `{0}`")]
    MissingTraces(String),
    #[error("no series `{0}` in corpus")]
    MissingSeries(String),
}

/// Detection performance of every detector on one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceVector {
    pub values: Vec<f64>,
}

impl PerformanceVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Index of the best detector; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Average precision: `sum_k (R_k - R_{k-1}) * P_k` over descending unique
/// score thresholds.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]].total_cmp(&threshold) == Ordering::Equal {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Default)]
pub struct LabelOutcome {
    /// Windows with a performance vector and hard label.
    pub labeled: Vec<WindowSample>,
    /// Windows whose scoring span holds no anomalous point.
    pub unlabeled: Vec<WindowSample>,
}

/// Scores every window with each detector's AUC-PR over the window span
/// widened by `context` points on both sides.
///
/// Skipped detectors get performance 0.
pub fn label_windows(
    windows: Vec<WindowSample>,
    corpus: &[LabeledSeries],
    zoo: &[ZooOutput],
    context: usize,
) -> Result<LabelOutcome, MetricError> {
    let series_by_id: HashMap<&str, &LabeledSeries> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    let zoo_by_id: HashMap<&str, &ZooOutput> = zoo.iter().map(|z| (z.series_id.as_str(), z)).collect();
    let mut out = LabelOutcome::default();
    for mut w in windows {
        let series = series_by_id
            .get(w.series_id.as_str())
            .ok_or_else(|| MetricError::MissingSeries(w.series_id.clone()))?;
        let scored = zoo_by_id
            .get(w.series_id.as_str())
            .ok_or_else(|| MetricError::MissingTraces(w.series_id.clone()))?;
        let start = w.offset.saturating_sub(context);
        let end = (w.offset + w.len() + context).min(series.len());
        let labels = &series.point_labels[start..end];
        if !labels.iter().any(|&l| l != 0) {
            out.unlabeled.push(w);
            continue;
        }
        let perf: Vec<f64> = DetectorId::ALL
            .iter()
            .map(|&d| match scored.trace(d) {
                Some(trace) => auc_pr(&trace.scores[start..end], labels),
                None => Ok(0.0),
            })
            .collect::<Result<_, _>>()?;
        let perf = PerformanceVector::new(perf);
        w.hard_label = Some(perf.argmax());
        w.performance = Some(perf);
        out.labeled.push(w);
    }
    Ok(out)
}

/// Writes `window_id,hard_label,p_0,...,p_{m-1}`.
pub fn write_label_table<W: std::io::Write>(writer: W, windows: &[WindowSample]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let m = windows
        .iter()
        .find_map(|w| w.performance.as_ref().map(|p| p.len()))
        .unwrap_or(DetectorId::COUNT);
    let mut header = vec!["window_id".to_string(), "hard_label".to_string()];
    header.extend((0..m).map(|j| format!("p_{j}")));
    wtr.write_record(&header).map_err(std::io::Error::other)?;
    for w in windows {
        let (Some(label), Some(perf)) = (w.hard_label, &w.performance) else {
            continue;
        };
        let mut row = vec![w.window_id(), label.to_string()];
        row.extend(perf.values.iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(std::io::Error::other)?;
    }
    wtr.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted_rankings() {
        assert_eq!(auc_pr(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc_pr(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn stepwise_sum_example() {
        let ap = auc_pr(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ties_collapse_into_one_threshold() {
        // single threshold: precision 1/2, recall 1
        assert_eq!(auc_pr(&[0.3, 0.3], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        assert_eq!(auc_pr(&[0.1, 0.2], &[0, 0]), Err(MetricError::NoPositives));
        assert!(matches!(auc_pr(&[0.1], &[0, 1]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(PerformanceVector::new(vec![0.3; 6]).argmax(), 0);
        assert_eq!(PerformanceVector::new(vec![0.1, 0.2, 0.9, 0.3]).argmax(), 2);
    }
}
