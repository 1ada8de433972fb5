//! On-disk layout of the service data directory.
//!
//! ```text
//! <root>/corpora/<id>.csv          uploaded corpora
//! <root>/corpora/<id>.meta.json    optional metadata sidecar
//! <root>/selectors/index.json      selector registry
//! <root>/selectors/<id>.kdsl       model files
//! <root>/reports/<id>.json         evaluation reports
//! <root>/jobs/<id>.ndjson          training event logs
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use kdselect_core::data::{anomaly_runs, apply_sidecar, read_corpus, LabeledSeries, SidecarEntry};
use kdselect_core::embed::text_key;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["corpora", "selectors", "reports", "jobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_csv(&self, id: &str) -> PathBuf {
        self.root.join("corpora").join(format!("{id}.csv"))
    }

    pub fn corpus_meta(&self, id: &str) -> PathBuf {
        self.root.join("corpora").join(format!("{id}.meta.json"))
    }

    pub fn registry_index(&self) -> PathBuf {
        self.root.join("selectors").join("index.json")
    }

    /// Model file path relative to the root, as stored in registry records.
    pub fn selector_rel(&self, id: &str) -> String {
        format!("selectors/{id}.kdsl")
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn report(&self, id: &str) -> PathBuf {
        self.root.join("reports").join(format!("{id}.json"))
    }

    pub fn job_events(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(format!("{id}.ndjson"))
    }
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.{}.tmp", uuid::Uuid::new_v4().simple()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Rejects ids that could escape the data directory.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesInfo {
    pub series_id: String,
    pub length: usize,
    /// Anomalous runs as `[start, end)` pairs.
    pub anomaly_runs: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub corpus_id: String,
    pub n_series: usize,
    pub n_points: usize,
    pub series: Vec<SeriesInfo>,
}

pub fn series_info(series: &LabeledSeries) -> SeriesInfo {
    SeriesInfo {
        series_id: series.id.clone(),
        length: series.len(),
        anomaly_runs: anomaly_runs(&series.point_labels).into_iter().map(|r| [r.start, r.end]).collect(),
    }
}

pub fn corpus_info(id: &str, corpus: &[LabeledSeries]) -> CorpusInfo {
    CorpusInfo {
        corpus_id: id.to_string(),
        n_series: corpus.len(),
        n_points: corpus.iter().map(LabeledSeries::len).sum(),
        series: corpus.iter().map(series_info).collect(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("`{0}` not found")]
    NotFound(String),
    #[error(transparent)]
    Data(#[from] kdselect_core::data::DataError),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Validates and stores a corpus. The id is derived from the content, so
/// uploading the same bytes twice yields the same corpus.
pub fn put_corpus(
    dir: &DataDir,
    csv_text: &str,
    metadata: Option<&HashMap<String, SidecarEntry>>,
) -> Result<CorpusInfo, StoreError> {
    let mut corpus = read_corpus(csv_text.as_bytes())?;
    let mut key_source = csv_text.to_string();
    if let Some(meta) = metadata {
        apply_sidecar(&mut corpus, meta);
        // BTreeMap order keeps the id stable
        let sorted: std::collections::BTreeMap<_, _> = meta.iter().collect();
        key_source.push_str(&serde_json::to_string(&sorted).map_err(|e| StoreError::Metadata(e.to_string()))?);
    }
    let id = format!("c-{}", &text_key(&key_source)[..16]);
    write_atomic(&dir.corpus_csv(&id), csv_text.as_bytes())?;
    if let Some(meta) = metadata {
        let json = serde_json::to_vec_pretty(meta).map_err(|e| StoreError::Metadata(e.to_string()))?;
        write_atomic(&dir.corpus_meta(&id), &json)?;
    }
    Ok(corpus_info(&id, &corpus))
}

pub fn load_stored_corpus(dir: &DataDir, id: &str) -> Result<Vec<LabeledSeries>, StoreError> {
    let path = dir.corpus_csv(id);
    if !valid_id(id) || !path.exists() {
        return Err(StoreError::NotFound(id.to_string()));
    }
    let mut corpus = kdselect_core::data::load_corpus(&path)?;
    let meta = dir.corpus_meta(id);
    if meta.exists() {
        apply_sidecar(&mut corpus, &kdselect_core::data::load_sidecar(&meta)?);
    }
    Ok(corpus)
}

pub fn list_corpora(dir: &DataDir) -> Result<Vec<String>, StoreError> {
    let mut ids: Vec<String> = fs::read_dir(dir.root().join("corpora"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".csv").filter(|s| !s.ends_with(".meta")).map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

/// An evaluation report as stored and served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub report_id: String,
    pub selector_id: String,
    pub corpus_id: String,
    pub created_at: chrono::DateTime<chrono::Utc>,
    pub report: kdselect_core::pipeline::EvalReport,
}

pub fn new_report_id() -> String {
    format!("rep-{}", uuid::Uuid::new_v4().simple())
}

pub fn save_report(dir: &DataDir, report: &StoredReport) -> Result<(), StoreError> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| StoreError::Metadata(e.to_string()))?;
    write_atomic(&dir.report(&report.report_id), &json)?;
    Ok(())
}

pub fn load_report(dir: &DataDir, id: &str) -> Result<StoredReport, StoreError> {
    let path = dir.report(id);
    if !valid_id(id) || !path.exists() {
        return Err(StoreError::NotFound(id.to_string()));
    }
    serde_json::from_slice(&fs::read(&path)?).map_err(|e| StoreError::Metadata(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("a.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn corpus_id_is_content_derived() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DataDir::open(tmp.path()).unwrap();
        let csv = "series_id,value,label\na,1.0,0\na,2.0,1\nb,0.5,0\n";
        let a = put_corpus(&dir, csv, None).unwrap();
        let b = put_corpus(&dir, csv, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_series, 2);
        assert_eq!(a.series[0].anomaly_runs, vec![[1, 2]]);
        assert_eq!(load_stored_corpus(&dir, &a.corpus_id).unwrap().len(), 2);
        assert_eq!(list_corpora(&dir).unwrap(), vec![a.corpus_id]);
        assert!(matches!(load_stored_corpus(&dir, "../x"), Err(StoreError::NotFound(_))));
    }
}
