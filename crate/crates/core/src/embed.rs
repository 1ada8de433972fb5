//! Metadata text embeddings.
//!
//! [`FeatureHashEmbedder`] is a dependency-free bag-of-words hash;
//! [`PrecomputedEmbeddings`] looks vectors up in a CSV produced elsewhere
//! (for example by a language model), keyed by the SHA-256 of the text.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no precomputed embedding for text {text:?} (sha256 {key})")]
    Missing { text: String, key: String },
    #[error("embedding file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    FeatureHash,
    PrecomputedFile,
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
    fn source(&self) -> EmbeddingSource;
}

pub fn text_key(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHashEmbedder {
    pub dim: usize,
}

impl FeatureHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl TextEmbedder for FeatureHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let digest = Sha256::digest(token.as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::FeatureHash
    }
}

/// Vectors loaded from a `text_sha256,dim,v_0,...` CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn from_map(dim: usize, table: HashMap<String, Vec<f64>>) -> Self {
        Self { dim, table }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref();
        let err = |message: String| EmbedError::File {
            path: path.display().to_string(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| err(e.to_string()))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| err(e.to_string()))?;
            let key = record.get(0).ok_or_else(|| err(format!("line {line}: missing key")))?;
            let d: usize = record
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| err(format!("line {line}: bad dim")))?;
            if *dim.get_or_insert(d) != d {
                return Err(err(format!("line {line}: dim {d} differs from earlier rows")));
            }
            if record.len() != d + 2 {
                return Err(err(format!("line {line}: expected {d} values, got {}", record.len() - 2)));
            }
            let values = record
                .iter()
                .skip(2)
                .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err(format!("line {line}: non-numeric value")))?;
            table.insert(key.to_ascii_lowercase(), values);
        }
        let dim = dim.ok_or_else(|| err("file holds no embeddings".into()))?;
        Ok(Self { dim, table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextEmbedder for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let key = text_key(text);
        self.table.get(&key).cloned().ok_or_else(|| EmbedError::Missing {
            text: text.to_string(),
            key,
        })
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::PrecomputedFile
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn hash_embedding_is_unit_and_bag_of_words() {
        let e = FeatureHashEmbedder::new(32);
        let a = e.embed("Spike dataset, length 500").unwrap();
        assert_eq!(a, e.embed("Spike dataset, length 500").unwrap());
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(e.embed("red green blue").unwrap(), e.embed("blue, RED green").unwrap());
        assert!(e.embed("").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn precomputed_lookup() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        let k = text_key("hello");
        writeln!(file, "text_sha256,dim,v_0,v_1").unwrap();
        writeln!(file, "{k},2,0.5,-1.5").unwrap();
        let table = PrecomputedEmbeddings::load(file.path()).unwrap();
        assert_eq!(table.dim(), 2);
        assert_eq!(table.embed("hello").unwrap(), vec![0.5, -1.5]);
        let err = table.embed("absent text").unwrap_err();
        assert!(err.to_string().contains("absent text"));
    }

    #[test]
    fn precomputed_rejects_ragged_rows() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "text_sha256,dim,v_0,v_1").unwrap();
        writeln!(file, "ab,2,0.5").unwrap();
        assert!(PrecomputedEmbeddings::load(file.path()).is_err());
    }
}
