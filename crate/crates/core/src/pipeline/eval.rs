use serde::{Deserialize, Serialize};

use super::{label_corpus, select, vote_rank, PipelineError};
use crate::data::{LabeledSeries, WindowSample};
use crate::detectors::{DetectorId, ZooOutput, ZooParams};
use crate::metrics::auc_pr;
use crate::model::SelectorModel;

/// Per-series detector AUC-PR over a corpus, with the labeled windows
/// needed for window-level accuracy. Computing it is the expensive part of
/// evaluation, so several selectors can share one.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub series_ids: Vec<String>,
    /// `auc[s][d]`; `None` when the detector was skipped or the series has
    /// no anomaly.
    pub auc: Vec<Vec<Option<f64>>>,
    pub zoo: Vec<ZooOutput>,
    pub labeled_windows: Vec<WindowSample>,
}

impl ScoreTable {
    fn has_positives(&self, s: usize) -> bool {
        self.auc[s].iter().any(Option::is_some)
    }

    /// Series indices that can be evaluated.
    pub fn evaluable(&self) -> Vec<usize> {
        (0..self.series_ids.len()).filter(|&s| self.has_positives(s)).collect()
    }

    /// Mean AUC-PR of each single detector over the evaluable series.
    pub fn detector_means(&self) -> Vec<f64> {
        let rows = self.evaluable();
        (0..DetectorId::COUNT)
            .map(|d| rows.iter().map(|&s| self.auc[s][d].unwrap_or(0.0)).sum::<f64>() / rows.len().max(1) as f64)
            .collect()
    }

    pub fn oracle(&self, s: usize) -> (usize, f64) {
        let values: Vec<f64> = self.auc[s].iter().map(|a| a.unwrap_or(0.0)).collect();
        let best = crate::metrics::argmax(&values);
        (best, values[best])
    }

    pub fn oracle_mean(&self) -> f64 {
        let rows = self.evaluable();
        rows.iter().map(|&s| self.oracle(s).1).sum::<f64>() / rows.len().max(1) as f64
    }
}

pub fn score_table(
    corpus: &[LabeledSeries],
    window: usize,
    stride: usize,
    zoo_params: &ZooParams,
) -> Result<ScoreTable, PipelineError> {
    let labeled = label_corpus(corpus, window, stride, zoo_params)?;
    let auc = corpus
        .iter()
        .zip(&labeled.zoo)
        .map(|(series, out)| {
            DetectorId::ALL
                .iter()
                .map(|&d| out.trace(d).and_then(|t| auc_pr(&t.scores, &series.point_labels).ok()))
                .collect()
        })
        .collect();
    Ok(ScoreTable {
        series_ids: corpus.iter().map(|s| s.id.clone()).collect(),
        auc,
        zoo: labeled.zoo,
        labeled_windows: labeled.labeled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub series_id: String,
    pub selected: DetectorId,
    /// Detector actually scored, after falling back past skipped ones.
    pub used: DetectorId,
    pub votes: Vec<usize>,
    pub fallback: bool,
    pub auc_selected: f64,
    pub auc_by_detector: Vec<Option<f64>>,
    pub oracle_detector: DetectorId,
    pub auc_oracle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_series: usize,
    /// Series without anomalies, left out of every mean.
    pub n_skipped: usize,
    pub mean_auc_selected: f64,
    pub mean_auc_oracle: f64,
    /// `(detector name, mean AUC-PR)` for each single detector.
    pub mean_auc_by_detector: Vec<(String, f64)>,
    /// Fraction of series whose selected detector reaches the oracle AUC-PR.
    pub series_top1: f64,
    /// Fraction of labeled windows whose prediction equals the hard label.
    pub window_top1: f64,
    pub n_windows: usize,
    pub rows: Vec<SeriesRow>,
}

impl EvalReport {
    pub fn best_single(&self) -> (String, f64) {
        self.mean_auc_by_detector
            .iter()
            .cloned()
            .fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }
}

pub fn evaluate_selector(
    model: &SelectorModel,
    corpus: &[LabeledSeries],
    stride: usize,
    zoo_params: &ZooParams,
) -> Result<EvalReport, PipelineError> {
    let table = score_table(corpus, model.config.window, stride, zoo_params)?;
    evaluate_with_table(model, corpus, &table, stride)
}

pub fn evaluate_with_table(
    model: &SelectorModel,
    corpus: &[LabeledSeries],
    table: &ScoreTable,
    stride: usize,
) -> Result<EvalReport, PipelineError> {
    let mut rows = Vec::new();
    for s in table.evaluable() {
        let series = &corpus[s];
        let selection = select(model, series, stride)?;
        let aucs = &table.auc[s];
        let mut order = vec![selection.selected.index()];
        order.extend(vote_rank(&selection.votes));
        let used = order.into_iter().find(|&d| aucs[d].is_some()).unwrap_or(selection.selected.index());
        let (oracle_detector, auc_oracle) = table.oracle(s);
        rows.push(SeriesRow {
            series_id: series.id.clone(),
            selected: selection.selected,
            used: DetectorId::from_index(used).expect("valid index"),
            votes: selection.votes,
            fallback: selection.fallback,
            auc_selected: aucs[used].unwrap_or(0.0),
            auc_by_detector: aucs.clone(),
            oracle_detector: DetectorId::from_index(oracle_detector).expect("valid index"),
            auc_oracle,
        });
    }
    let n = rows.len().max(1) as f64;
    let mut correct = 0usize;
    for w in &table.labeled_windows {
        if model.forward(&w.values)?.predicted() == w.hard_label.unwrap_or(usize::MAX) {
            correct += 1;
        }
    }
    Ok(EvalReport {
        n_series: rows.len(),
        n_skipped: corpus.len() - rows.len(),
        mean_auc_selected: rows.iter().map(|r| r.auc_selected).sum::<f64>() / n,
        mean_auc_oracle: table.oracle_mean(),
        mean_auc_by_detector: DetectorId::ALL
            .iter()
            .map(|d| d.name().to_string())
            .zip(table.detector_means())
            .collect(),
        series_top1: rows.iter().filter(|r| r.auc_selected >= r.auc_oracle).count() as f64 / n,
        window_top1: correct as f64 / table.labeled_windows.len().max(1) as f64,
        n_windows: table.labeled_windows.len(),
        rows,
    })
}

/// Mean AUC-PR when series `s` uses detector `choices[s]`, over evaluable series.
pub fn evaluate_choices(table: &ScoreTable, choices: &[usize]) -> f64 {
    let rows = table.evaluable();
    rows.iter().map(|&s| table.auc[s][choices[s]].unwrap_or(0.0)).sum::<f64>() / rows.len().max(1) as f64
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per series followed by a `mean` row.
pub fn write_report_csv<W: std::io::Write>(writer: W, report: &EvalReport) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["series_id", "selected", "used", "fallback", "auc_selected", "oracle_detector", "auc_oracle"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(DetectorId::ALL.iter().map(|d| format!("auc_{}", d.name())));
    wtr.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.series_id.clone(),
            r.selected.name().to_string(),
            r.used.name().to_string(),
            r.fallback.to_string(),
            r.auc_selected.to_string(),
            r.oracle_detector.name().to_string(),
            r.auc_oracle.to_string(),
        ];
        rec.extend(r.auc_by_detector.iter().map(|&a| fmt_opt(a)));
        wtr.write_record(&rec)?;
    }
    let mut mean = vec![
        "mean".to_string(),
        String::new(),
        String::new(),
        String::new(),
        report.mean_auc_selected.to_string(),
        String::new(),
        report.mean_auc_oracle.to_string(),
    ];
    mean.extend(report.mean_auc_by_detector.iter().map(|(_, v)| v.to_string()));
    wtr.write_record(&mean)?;
    wtr.flush()
}
