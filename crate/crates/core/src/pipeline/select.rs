use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::data::{extract_windows, LabeledSeries};
use crate::detectors::{run_detector, AnomalyScoreTrace, DetectorId, ZooParams};
use crate::metrics::{argmax, auc_pr};
use crate::model::SelectorModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub series_id: String,
    /// Predicted detector index per window, in window order.
    pub predictions: Vec<usize>,
    pub votes: Vec<usize>,
    pub selected: DetectorId,
    /// Set when the series was too short to window and detector 0 was used.
    pub fallback: bool,
}

/// Vote counts and the winner (lowest index on ties).
pub fn tally_votes(predictions: &[usize], n_classes: usize) -> (Vec<usize>, usize) {
    let mut votes = vec![0usize; n_classes];
    for &p in predictions {
        votes[p] += 1;
    }
    let as_f64: Vec<f64> = votes.iter().map(|&v| v as f64).collect();
    (votes, argmax(&as_f64))
}

/// Detector indices by votes descending, index ascending on ties.
pub fn vote_rank(votes: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..votes.len()).collect();
    order.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
    order
}

/// Majority vote of the per-window predictions over one series.
pub fn select(model: &SelectorModel, series: &LabeledSeries, stride: usize) -> Result<SelectionResult, PipelineError> {
    let m = model.config.n_classes;
    let windows = extract_windows(series, model.config.window, stride)?;
    if windows.is_empty() {
        return Ok(SelectionResult {
            series_id: series.id.clone(),
            predictions: Vec::new(),
            votes: vec![0; m],
            selected: DetectorId::IForest,
            fallback: true,
        });
    }
    let predictions = windows
        .iter()
        .map(|w| model.forward(&w.values).map(|f| f.predicted()))
        .collect::<Result<Vec<_>, _>>()?;
    let (votes, winner) = tally_votes(&predictions, m);
    Ok(SelectionResult {
        series_id: series.id.clone(),
        predictions,
        votes,
        selected: DetectorId::from_index(winner).unwrap_or(DetectorId::IForest),
        fallback: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRun {
    pub detector: DetectorId,
    pub trace: Option<AnomalyScoreTrace>,
    /// `None` when the detector was skipped or the series has no anomaly.
    pub auc_pr: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub series_id: String,
    pub requested: DetectorId,
    /// The detector whose trace is the answer; differs from `requested`
    /// after a skip.
    pub used: Option<DetectorId>,
    pub fell_back: bool,
    /// The used detector first; in compare mode every detector by index.
    pub runs: Vec<DetectorRun>,
}

impl DetectionResult {
    pub fn used_run(&self) -> Option<&DetectorRun> {
        let used = self.used?;
        self.runs.iter().find(|r| r.detector == used)
    }
}

fn run_one(series: &LabeledSeries, id: DetectorId, params: &ZooParams) -> DetectorRun {
    match run_detector(id, series, params) {
        Ok(trace) => {
            let auc = auc_pr(&trace.scores, &series.point_labels).ok();
            DetectorRun {
                detector: id,
                trace: Some(trace),
                auc_pr: auc,
                skipped: None,
            }
        }
        Err(e) => DetectorRun {
            detector: id,
            trace: None,
            auc_pr: None,
            skipped: Some(e.to_string()),
        },
    }
}

/// Runs `requested` on the series, falling back through `votes` rank (then
/// detector index) when it cannot run. With `compare`, every detector runs.
///
/// `params` must already be resolved for the window length.
pub fn detect_and_score(
    series: &LabeledSeries,
    requested: DetectorId,
    votes: Option<&[usize]>,
    params: &ZooParams,
    compare: bool,
) -> DetectionResult {
    let mut order = vec![requested];
    let rank = votes.map(vote_rank).unwrap_or_else(|| (0..DetectorId::COUNT).collect());
    order.extend(rank.into_iter().filter_map(DetectorId::from_index).filter(|&d| d != requested));
    for d in DetectorId::ALL {
        if !order.contains(&d) {
            order.push(d);
        }
    }

    let mut runs: Vec<DetectorRun> = Vec::new();
    let mut used = None;
    for &d in &order {
        let run = run_one(series, d, params);
        let ok = run.trace.is_some();
        runs.push(run);
        if ok {
            used = Some(d);
            break;
        }
    }
    if compare {
        for d in DetectorId::ALL {
            if !runs.iter().any(|r| r.detector == d) {
                runs.push(run_one(series, d, params));
            }
        }
        runs.sort_by_key(|r| r.detector.index());
    } else {
        // only the answer, not the failed attempts
        runs.retain(|r| Some(r.detector) == used || r.detector == requested);
    }
    DetectionResult {
        series_id: series.id.clone(),
        requested,
        used,
        fell_back: used != Some(requested),
        runs,
    }
}
