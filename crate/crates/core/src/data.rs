//! Corpus ingestion, fixed-length windowing, splitting and metadata text.
//!
//! A corpus is a list of univariate [`LabeledSeries`]. Training samples are
//! z-normalized [`WindowSample`]s cut from those series; the performance
//! vector and hard label of a window are filled in later by
//! [`crate::metrics::label_windows`].

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::PerformanceVector;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("validation error at line {line}: {message}")]
    Validation { line: u64, message: String },
    #[error("invalid metadata sidecar: {0}")]
    Sidecar(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// A raw univariate series with point-wise anomaly labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub id: String,
    pub values: Vec<f64>,
    pub point_labels: Vec<u8>,
    #[serde(default)]
    pub dataset_name: String,
    #[serde(default)]
    pub domain_text: String,
}

impl LabeledSeries {
    pub fn new(id: impl Into<String>, values: Vec<f64>, point_labels: Vec<u8>) -> Self {
        Self {
            id: id.into(),
            values,
            point_labels,
            dataset_name: String::new(),
            domain_text: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn anomaly_count(&self) -> usize {
        anomaly_runs(&self.point_labels).len()
    }

    pub fn metadata(&self) -> MetadataRecord {
        MetadataRecord::from_labels(&self.point_labels, &self.domain_text)
    }

    /// Metadata sentence for this series, rendered from its labels.
    pub fn metadata_text(&self) -> String {
        render_metadata(&self.metadata(), &self.dataset_name)
    }
}

/// A z-normalized subsequence of a parent series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub series_id: String,
    pub offset: usize,
    pub values: Vec<f64>,
    pub hard_label: Option<usize>,
    pub performance: Option<PerformanceVector>,
    pub metadata_text: String,
}

impl WindowSample {
    pub fn window_id(&self) -> String {
        format!("{}:{}", self.series_id, self.offset)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub series_length: usize,
    pub anomaly_count: usize,
    pub anomaly_lengths: Vec<usize>,
    pub domain_description: String,
}

impl MetadataRecord {
    pub fn from_labels(labels: &[u8], domain_description: &str) -> Self {
        let runs = anomaly_runs(labels);
        Self {
            series_length: labels.len(),
            anomaly_count: runs.len(),
            anomaly_lengths: runs.iter().map(|r| r.len()).collect(),
            domain_description: domain_description.to_string(),
        }
    }
}

/// Maximal runs of 1s as half-open index ranges.
pub fn anomaly_runs(labels: &[u8]) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(s..labels.len());
    }
    runs
}

/// Fills the metadata template. The sentence listing anomaly lengths is
/// dropped when the series has no anomalies.
pub fn render_metadata(record: &MetadataRecord, dataset_name: &str) -> String {
    let mut text = format!("This is a time series from dataset {dataset_name}");
    let description = record.domain_description.trim().trim_end_matches('.');
    if !description.is_empty() {
        let _ = write!(text, ", {description}");
    }
    let _ = write!(
        text,
        ". The length of the series is {}. There are {} anomalies in this series.",
        record.series_length, record.anomaly_count
    );
    if record.anomaly_count > 0 {
        let lengths: Vec<String> = record.anomaly_lengths.iter().map(|l| l.to_string()).collect();
        let _ = write!(text, " The lengths of the anomalies are {}.", lengths.join(", "));
    }
    text
}

#[derive(Debug, Deserialize)]
struct CorpusRow {
    series_id: String,
    value: String,
    label: String,
}

/// Loads a corpus CSV with header `series_id,value,label`.
///
/// Rows of one series must be contiguous and in time order. Values are kept
/// exactly as parsed.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledSeries>, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_corpus(file)
}

pub fn read_corpus<R: Read>(reader: R) -> Result<Vec<LabeledSeries>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    // empty file
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let expected = ["series_id", "value", "label"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header `series_id,value,label`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut corpus: Vec<LabeledSeries> = Vec::new();
    let mut closed: HashSet<String> = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: CorpusRow = record.deserialize(Some(&headers)).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        let value: f64 = row.value.parse().map_err(|_| DataError::Parse {
            line,
            message: format!("value `{}` is not a number", row.value),
        })?;
        if !value.is_finite() {
            return Err(DataError::Validation {
                line,
                message: format!("value `{}` is not finite", row.value),
            });
        }
        let label: u8 = match row.label.as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::Validation {
                    line,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        if row.series_id.is_empty() {
            return Err(DataError::Validation {
                line,
                message: "empty series_id".into(),
            });
        }
        match corpus.last_mut() {
            Some(current) if current.id == row.series_id => {
                current.values.push(value);
                current.point_labels.push(label);
            }
            last => {
                if closed.contains(&row.series_id) {
                    return Err(DataError::Validation {
                        line,
                        message: format!("rows of series `{}` are not contiguous", row.series_id),
                    });
                }
                if let Some(prev) = last {
                    closed.insert(prev.id.clone());
                }
                corpus.push(LabeledSeries::new(row.series_id, vec![value], vec![label]));
            }
        }
    }
    Ok(corpus)
}

pub fn write_corpus<W: std::io::Write>(writer: W, corpus: &[LabeledSeries]) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let io_err = |e: csv::Error| DataError::Io {
        path: "<corpus writer>".into(),
        source: std::io::Error::other(e),
    };
    wtr.write_record(["series_id", "value", "label"]).map_err(io_err)?;
    for series in corpus {
        for (v, l) in series.values.iter().zip(&series.point_labels) {
            wtr.write_record([series.id.as_str(), &v.to_string(), &l.to_string()])
                .map_err(io_err)?;
        }
    }
    wtr.flush().map_err(|source| DataError::Io {
        path: "<corpus writer>".into(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub dataset_name: String,
    #[serde(default)]
    pub domain_description: String,
}

/// Reads a metadata sidecar (JSON map `series_id -> {dataset_name, domain_description}`).
pub fn load_sidecar(path: impl AsRef<Path>) -> Result<HashMap<String, SidecarEntry>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DataError::Sidecar(e.to_string()))
}

pub fn apply_sidecar(corpus: &mut [LabeledSeries], sidecar: &HashMap<String, SidecarEntry>) {
    for series in corpus {
        if let Some(entry) = sidecar.get(&series.id) {
            series.dataset_name = entry.dataset_name.clone();
            series.domain_text = entry.domain_description.clone();
        }
    }
}

/// Z-normalizes in place. Constant input maps to all zeros.
pub fn z_normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * (1.0 + mean.abs()) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// Cuts windows at offsets `0, stride, 2*stride, ...` while they fit.
///
/// A series shorter than `window` yields an empty list.
pub fn extract_windows(
    series: &LabeledSeries,
    window: usize,
    stride: usize,
) -> Result<Vec<WindowSample>, DataError> {
    if window < 2 {
        return Err(DataError::Config(format!("window length must be >= 2, got {window}")));
    }
    if stride == 0 {
        return Err(DataError::Config("stride must be >= 1".into()));
    }
    if series.len() < window {
        return Ok(Vec::new());
    }
    let metadata_text = series.metadata_text();
    let count = (series.len() - window) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let offset = k * stride;
            let mut values = series.values[offset..offset + window].to_vec();
            z_normalize(&mut values);
            WindowSample {
                series_id: series.id.clone(),
                offset,
                values,
                hard_label: None,
                performance: None,
                metadata_text: metadata_text.clone(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingStats {
    pub series_seen: usize,
    pub series_skipped: usize,
    pub windows: usize,
}

/// Windows every series in a corpus, counting series too short to window.
pub fn extract_corpus_windows(
    corpus: &[LabeledSeries],
    window: usize,
    stride: usize,
) -> Result<(Vec<WindowSample>, WindowingStats), DataError> {
    let mut out = Vec::new();
    let mut stats = WindowingStats::default();
    for series in corpus {
        stats.series_seen += 1;
        let windows = extract_windows(series, window, stride)?;
        if windows.is_empty() {
            stats.series_skipped += 1;
        }
        out.extend(windows);
    }
    stats.windows = out.len();
    Ok((out, stats))
}

/// Seeded split into disjoint train/test sets by series id.
pub fn split_corpus(
    corpus: &[LabeledSeries],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSeries>, Vec<LabeledSeries>), DataError> {
    if corpus.is_empty() {
        return Err(DataError::Config("cannot split an empty corpus".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Config(format!("split fraction must be in (0,1), got {fraction}")));
    }
    let n_train = (fraction * corpus.len() as f64).round() as usize;
    if n_train == 0 || n_train == corpus.len() {
        return Err(DataError::Config(format!(
            "fraction {fraction} leaves one side empty for {} series",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; corpus.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = corpus
        .iter()
        .cloned()
        .zip(is_train)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        test.into_iter().map(|(s, _)| s).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(len: usize) -> LabeledSeries {
        LabeledSeries::new("s", (0..len).map(|i| (i as f64).sin()).collect(), vec![0; len])
    }

    #[test]
    fn window_offsets_follow_stride() {
        let w = extract_windows(&series(10), 4, 2).unwrap();
        assert_eq!(w.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert_eq!(extract_windows(&series(4), 4, 1).unwrap().len(), 1);
    }

    #[test]
    fn short_series_is_skipped_not_an_error() {
        let corpus = vec![series(3), series(8)];
        let (w, stats) = extract_corpus_windows(&corpus, 4, 4).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(stats.series_skipped, 1);
    }

    #[test]
    fn constant_window_normalizes_to_zeros() {
        let s = LabeledSeries::new("c", vec![3.5; 6], vec![0; 6]);
        let w = extract_windows(&s, 4, 1).unwrap();
        assert!(w.iter().all(|w| w.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn bad_window_params_are_rejected() {
        assert!(extract_windows(&series(10), 1, 1).is_err());
        assert!(extract_windows(&series(10), 4, 0).is_err());
    }

    #[test]
    fn metadata_without_anomalies_omits_lengths() {
        let rec = MetadataRecord::from_labels(&[0; 100], "");
        let text = render_metadata(&rec, "YAHOO");
        assert_eq!(
            text,
            "This is a time series from dataset YAHOO. The length of the series is 100. There are 0 anomalies in this series."
        );
        assert!(!text.contains("lengths of the anomalies"));
    }

    #[test]
    fn metadata_with_anomalies() {
        let mut labels = vec![0u8; 50];
        labels[2..5].fill(1);
        labels[10..15].fill(1);
        let rec = MetadataRecord::from_labels(&labels, "is a loop sensor dataset.");
        assert_eq!(rec.anomaly_lengths, vec![3, 5]);
        let text = render_metadata(&rec, "Dodgers");
        assert_eq!(
            text,
            "This is a time series from dataset Dodgers, is a loop sensor dataset. The length of the series is 50. \
             There are 2 anomalies in this series. The lengths of the anomalies are 3, 5."
        );
        assert_eq!(text, render_metadata(&rec, "Dodgers"));
    }

    #[test]
    fn metadata_is_injective_on_fixtures() {
        let fixtures = [
            (MetadataRecord { series_length: 10, anomaly_count: 1, anomaly_lengths: vec![2], domain_description: String::new() }, "A"),
            (MetadataRecord { series_length: 10, anomaly_count: 1, anomaly_lengths: vec![3], domain_description: String::new() }, "A"),
            (MetadataRecord { series_length: 11, anomaly_count: 1, anomaly_lengths: vec![2], domain_description: String::new() }, "A"),
            (MetadataRecord { series_length: 10, anomaly_count: 2, anomaly_lengths: vec![1, 1], domain_description: String::new() }, "A"),
            (MetadataRecord { series_length: 10, anomaly_count: 2, anomaly_lengths: vec![11], domain_description: String::new() }, "A"),
            (MetadataRecord { series_length: 10, anomaly_count: 1, anomaly_lengths: vec![2], domain_description: String::new() }, "B"),
            (MetadataRecord { series_length: 10, anomaly_count: 0, anomaly_lengths: vec![], domain_description: String::new() }, "A"),
        ];
        let texts: HashSet<String> = fixtures.iter().map(|(r, n)| render_metadata(r, n)).collect();
        assert_eq!(texts.len(), fixtures.len());
    }

    #[test]
    fn runs_at_edges() {
        let runs = anomaly_runs(&[1, 1, 0, 0, 1, 0, 1]);
        assert_eq!(runs, vec![0..2, 4..5, 6..7]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let corpus: Vec<_> = (0..10)
            .map(|i| LabeledSeries::new(format!("s{i}"), vec![0.0; 4], vec![0; 4]))
            .collect();
        let (a_train, a_test) = split_corpus(&corpus, 0.8, 7).unwrap();
        let (b_train, b_test) = split_corpus(&corpus, 0.8, 7).unwrap();
        assert_eq!((a_train.len(), a_test.len()), (8, 2));
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let train_ids: HashSet<_> = a_train.iter().map(|s| &s.id).collect();
        assert!(a_test.iter().all(|s| !train_ids.contains(&s.id)));

        let (t, v) = split_corpus(&corpus[..2], 0.5, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(matches!(split_corpus(&corpus[..2], 0.1, 1), Err(DataError::Config(_))));
        assert!(split_corpus(&[], 0.5, 1).is_err());
    }

    #[test]
    fn csv_parsing() {
        let text = "series_id,value,label\na,1.0,0\na,2.0,1\nb,3.5,0\n";
        let corpus = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].values, vec![1.0, 2.0]);
        assert_eq!(corpus[0].point_labels, vec![0, 1]);

        assert!(read_corpus("".as_bytes()).unwrap().is_empty());

        let err = read_corpus("series_id,value,label\na,1.0,0\na,x,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
        let err = read_corpus("series_id,value,label\na,1.0,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Validation { line: 2, .. }), "{err}");
        let err = read_corpus("series_id,value,label\na,1,0\nb,1,0\na,1,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Validation { line: 4, .. }), "{err}");
        assert!(read_corpus("id,v\n1,2\n".as_bytes()).is_err());
    }
}
