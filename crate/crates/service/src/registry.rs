//! Selector registry: model files plus a JSON index, updated by atomic
//! rename so a crash leaves either the old or the new index.

use std::fs;

use chrono::{DateTime, Utc};
use kdselect_core::losses::LossBreakdown;
use kdselect_core::model::{load_model, write_model, ModelError, SelectorModel};
use serde::{Deserialize, Serialize};

use crate::store::{valid_id, write_atomic, DataDir};

/// Evaluation figures attached to a selector trained with a held-out corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub corpus_id: String,
    pub report_id: String,
    pub n_series: usize,
    pub mean_auc_selected: f64,
    pub mean_auc_oracle: f64,
    pub best_single: String,
    pub best_single_auc: f64,
    pub window_top1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSummary {
    pub epochs: usize,
    pub labeled_windows: usize,
    pub final_loss: Option<LossBreakdown>,
    pub kept_per_epoch: Vec<usize>,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorRecord {
    pub selector_id: String,
    pub created_at: DateTime<Utc>,
    /// The training configuration echoed from the model file.
    pub config: serde_json::Value,
    pub metrics: MetricsSummary,
    /// Model file, relative to the data directory.
    pub model_path: String,
    /// Where the selector came from: a job id, or `upload`.
    pub source: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("selector `{0}` not found")]
    NotFound(String),
    #[error("corrupt registry index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Registry {
    dir: DataDir,
    records: Vec<SelectorRecord>,
}

impl Registry {
    /// Loads the index, or starts empty when there is none yet.
    pub fn open(dir: DataDir) -> Result<Self, RegistryError> {
        let path = dir.registry_index();
        let records = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?).map_err(|e| RegistryError::Corrupt(e.to_string()))?
        } else {
            Vec::new()
        };
        Ok(Self { dir, records })
    }

    fn persist(&self) -> Result<(), RegistryError> {
        let bytes = serde_json::to_vec_pretty(&self.records).map_err(|e| RegistryError::Corrupt(e.to_string()))?;
        write_atomic(&self.dir.registry_index(), &bytes)?;
        Ok(())
    }

    /// Stores the model file, then records it. Returns the new record.
    pub fn put(&mut self, model: &SelectorModel, metrics: MetricsSummary, source: &str) -> Result<SelectorRecord, RegistryError> {
        let id = format!("sel-{}", uuid::Uuid::new_v4().simple());
        let rel = self.dir.selector_rel(&id);
        let mut bytes = Vec::new();
        write_model(model, &mut bytes)?;
        write_atomic(&self.dir.resolve(&rel), &bytes)?;
        let record = SelectorRecord {
            selector_id: id,
            created_at: Utc::now(),
            config: model.echo.clone(),
            metrics,
            model_path: rel,
            source: source.to_string(),
        };
        self.records.push(record.clone());
        if let Err(e) = self.persist() {
            self.records.pop();
            let _ = fs::remove_file(self.dir.resolve(&record.model_path));
            return Err(e);
        }
        Ok(record)
    }

    pub fn get(&self, id: &str) -> Result<&SelectorRecord, RegistryError> {
        self.records
            .iter()
            .find(|r| r.selector_id == id)
            .ok_or_else(|| RegistryError::NotFound(id.to_string()))
    }

    pub fn load(&self, id: &str) -> Result<SelectorModel, RegistryError> {
        let record = self.get(id)?;
        Ok(load_model(self.dir.resolve(&record.model_path))?)
    }

    /// Records in creation order.
    pub fn list(&self) -> Vec<SelectorRecord> {
        let mut out = self.records.clone();
        out.sort_by_key(|r| r.created_at);
        out
    }

    /// Drops the record first so the file outlives it.
    pub fn delete(&mut self, id: &str) -> Result<SelectorRecord, RegistryError> {
        if !valid_id(id) {
            return Err(RegistryError::NotFound(id.to_string()));
        }
        let pos = self
            .records
            .iter()
            .position(|r| r.selector_id == id)
            .ok_or_else(|| RegistryError::NotFound(id.to_string()))?;
        let record = self.records.remove(pos);
        if let Err(e) = self.persist() {
            self.records.insert(pos, record);
            return Err(e);
        }
        let _ = fs::remove_file(self.dir.resolve(&record.model_path));
        Ok(record)
    }

    pub fn flush(&self) -> Result<(), RegistryError> {
        self.persist()
    }
}
