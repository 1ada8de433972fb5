//! The classical detector zoo.
//!
//! Every detector maps a univariate series to one score per point, higher
//! meaning more anomalous. Subsequence-based detectors assign each
//! subsequence score to the subsequence center and replicate the first and
//! last values out to the series edges.

pub mod hbos;
pub mod iforest;
pub mod lof;
pub mod matrix_profile;
pub mod pca;
pub mod poly;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledSeries;

pub use hbos::hbos_scores;
pub use iforest::{average_path_length, IsolationForest};
pub use lof::lof_scores;
pub use matrix_profile::{matrix_profile, MatrixProfile};
pub use pca::PcaModel;
pub use poly::{poly_scores, PolyPredictor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("{detector} skipped: series length {len} is below the minimum {min}")]
    TooShort {
        detector: DetectorId,
        len: usize,
        min: usize,
    },
    #[error("{detector} produced a non-finite score")]
    NonFinite { detector: DetectorId },
    #[error("invalid detector parameter: {0}")]
    InvalidParams(String),
    #[error("unknown detector `{0}`")]
    Unknown(String),
}

/// Stable detector ordering; the discriminant is the class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorId {
    IForest = 0,
    #[serde(rename = "LOF")]
    Lof = 1,
    #[serde(rename = "HBOS")]
    Hbos = 2,
    #[serde(rename = "MP")]
    Mp = 3,
    #[serde(rename = "PCA")]
    Pca = 4,
    #[serde(rename = "POLY")]
    Poly = 5,
}

impl DetectorId {
    pub const COUNT: usize = 6;
    pub const ALL: [DetectorId; Self::COUNT] = [
        DetectorId::IForest,
        DetectorId::Lof,
        DetectorId::Hbos,
        DetectorId::Mp,
        DetectorId::Pca,
        DetectorId::Poly,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorId::IForest => "IForest",
            DetectorId::Lof => "LOF",
            DetectorId::Hbos => "HBOS",
            DetectorId::Mp => "MP",
            DetectorId::Pca => "PCA",
            DetectorId::Poly => "POLY",
        }
    }
}

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorId {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DetectorError::Unknown(s.to_string()))
    }
}

/// Detector hyperparameters. Lengths left unset are derived from the
/// selector window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooParams {
    /// Subsequence length for IForest, LOF, PCA and MP. Defaults to `window / 2`.
    pub subseq_len: Option<usize>,
    /// Trailing fit window for POLY. Defaults to `window / 4` (at least 8).
    pub poly_window: Option<usize>,
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
    pub lof_k: usize,
    pub hbos_bins: usize,
    pub pca_variance: f64,
    pub poly_degree: usize,
    pub seed: u64,
}

impl Default for ZooParams {
    fn default() -> Self {
        Self {
            subseq_len: None,
            poly_window: None,
            iforest_trees: 100,
            iforest_subsample: 256,
            lof_k: 10,
            hbos_bins: 10,
            pca_variance: 0.9,
            poly_degree: 3,
            seed: 0,
        }
    }
}

impl ZooParams {
    /// Fills derived lengths from the selector window length.
    pub fn resolved(&self, window: usize) -> ZooParams {
        let mut p = self.clone();
        p.subseq_len = Some(self.subseq_len.unwrap_or((window / 2).max(2)));
        p.poly_window = Some(self.poly_window.unwrap_or((window / 4).max(8)));
        p
    }

    fn subseq(&self) -> usize {
        self.subseq_len.unwrap_or(32)
    }

    fn poly_win(&self) -> usize {
        self.poly_window.unwrap_or(16)
    }

    /// Minimum series length the detector accepts.
    pub fn min_len(&self, id: DetectorId) -> usize {
        match id {
            DetectorId::IForest | DetectorId::Lof | DetectorId::Pca => self.subseq(),
            DetectorId::Hbos => 1,
            DetectorId::Mp => 2 * self.subseq(),
            DetectorId::Poly => self.poly_win() + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScoreTrace {
    pub series_id: String,
    pub detector: DetectorId,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSkip {
    pub detector: DetectorId,
    pub reason: String,
}

/// All traces produced for one series plus the detectors that could not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooOutput {
    pub series_id: String,
    pub traces: Vec<AnomalyScoreTrace>,
    pub skipped: Vec<DetectorSkip>,
}

impl ZooOutput {
    pub fn trace(&self, id: DetectorId) -> Option<&AnomalyScoreTrace> {
        self.traces.iter().find(|t| t.detector == id)
    }
}

/// Runs one detector on a series.
pub fn run_detector(
    id: DetectorId,
    series: &LabeledSeries,
    params: &ZooParams,
) -> Result<AnomalyScoreTrace, DetectorError> {
    let values = &series.values;
    let min = params.min_len(id);
    if values.len() < min {
        return Err(DetectorError::TooShort {
            detector: id,
            len: values.len(),
            min,
        });
    }
    let w = params.subseq();
    let scores = match id {
        DetectorId::IForest => {
            let windows = subsequences(values, w);
            let forest = IsolationForest::fit(&windows, params.iforest_trees, params.iforest_subsample, params.seed);
            let s: Vec<f64> = windows.iter().map(|x| forest.score(x)).collect();
            spread_to_points(&s, values.len(), w)
        }
        DetectorId::Lof => {
            let windows = subsequences(values, w);
            spread_to_points(&lof_scores(&windows, params.lof_k), values.len(), w)
        }
        DetectorId::Hbos => hbos_scores(values, params.hbos_bins),
        DetectorId::Mp => {
            let mp = matrix_profile(values, w)?;
            spread_to_points(&mp.distances, values.len(), w)
        }
        DetectorId::Pca => {
            let windows = subsequences(values, w);
            let model = PcaModel::fit(&windows, params.pca_variance);
            let s: Vec<f64> = windows.iter().map(|x| model.reconstruction_error(x)).collect();
            spread_to_points(&s, values.len(), w)
        }
        DetectorId::Poly => poly_scores(values, params.poly_win(), params.poly_degree)?,
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DetectorError::NonFinite { detector: id });
    }
    Ok(AnomalyScoreTrace {
        series_id: series.id.clone(),
        detector: id,
        scores,
    })
}

/// Runs the whole zoo on one series; detectors that cannot run are recorded
/// as skips.
pub fn score_all(series: &LabeledSeries, params: &ZooParams) -> ZooOutput {
    let mut traces = Vec::with_capacity(DetectorId::COUNT);
    let mut skipped = Vec::new();
    for id in DetectorId::ALL {
        match run_detector(id, series, params) {
            Ok(t) => traces.push(t),
            Err(e) => skipped.push(DetectorSkip {
                detector: id,
                reason: e.to_string(),
            }),
        }
    }
    ZooOutput {
        series_id: series.id.clone(),
        traces,
        skipped,
    }
}

/// Scores a corpus, one series per task. Output order follows the input.
pub fn score_corpus(corpus: &[LabeledSeries], params: &ZooParams) -> Vec<ZooOutput> {
    corpus.par_iter().map(|s| score_all(s, params)).collect()
}

/// Writes `series_id,point_index,detector,score`.
pub fn write_traces<W: std::io::Write>(writer: W, traces: &[AnomalyScoreTrace]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["series_id", "point_index", "detector", "score"])
        .map_err(std::io::Error::other)?;
    for t in traces {
        for (i, s) in t.scores.iter().enumerate() {
            wtr.write_record([t.series_id.as_str(), &i.to_string(), t.detector.name(), &s.to_string()])
                .map_err(std::io::Error::other)?;
        }
    }
    wtr.flush()
}

pub(crate) fn subsequences(values: &[f64], w: usize) -> Vec<&[f64]> {
    values.windows(w).collect()
}

/// Maps per-subsequence scores to points: subsequence `j` (covering
/// `[j, j + w)`) lands on its center `j + w / 2`, edges are replicated.
pub fn spread_to_points(sub_scores: &[f64], n: usize, w: usize) -> Vec<f64> {
    debug_assert_eq!(sub_scores.len(), n + 1 - w);
    let half = w / 2;
    let last = sub_scores.len() - 1;
    (0..n)
        .map(|i| sub_scores[i.saturating_sub(half).min(last)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ZooParams {
        ZooParams::default().resolved(32)
    }

    #[test]
    fn constant_series_gives_constant_scores() {
        let s = LabeledSeries::new("c", vec![1.25; 200], vec![0; 200]);
        let out = score_all(&s, &params());
        assert_eq!(out.traces.len(), DetectorId::COUNT);
        for t in &out.traces {
            assert!(t.scores.iter().all(|&x| x == t.scores[0]), "{} not constant", t.detector);
        }
    }

    #[test]
    fn too_short_for_mp_only() {
        let p = params();
        // subseq 16, MP needs 32, POLY needs 9
        let s = LabeledSeries::new("short", (0..20).map(|i| (i as f64 * 0.7).sin()).collect(), vec![0; 20]);
        let out = score_all(&s, &p);
        assert_eq!(out.traces.len(), 5);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].detector, DetectorId::Mp);
        let err = run_detector(DetectorId::Mp, &s, &p).unwrap_err();
        assert!(err.to_string().contains("MP"));
    }

    #[test]
    fn zoo_is_deterministic() {
        let values: Vec<f64> = (0..300).map(|i| ((i * 37 % 101) as f64).sqrt() + (i as f64 * 0.1).sin()).collect();
        let s = LabeledSeries::new("d", values, vec![0; 300]);
        let a = score_all(&s, &params());
        let b = score_all(&s, &params());
        assert_eq!(a.traces.len(), DetectorId::COUNT);
        for (x, y) in a.traces.iter().zip(&b.traces) {
            let xb: Vec<u64> = x.scores.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.scores.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn spread_centers_and_replicates() {
        let s = spread_to_points(&[1.0, 2.0, 3.0], 6, 4);
        assert_eq!(s, vec![1.0, 1.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn names_round_trip() {
        for d in DetectorId::ALL {
            assert_eq!(d.name().parse::<DetectorId>().unwrap(), d);
            assert_eq!(DetectorId::from_index(d.index()), Some(d));
        }
        assert!("nope".parse::<DetectorId>().is_err());
    }
}
