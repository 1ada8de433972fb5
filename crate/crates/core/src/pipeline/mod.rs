//! End-to-end orchestration: window labeling, training, selection by
//! majority vote, detection and evaluation.

mod eval;
mod select;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{extract_corpus_windows, DataError, LabeledSeries, WindowSample, WindowingStats};
use crate::detectors::{score_corpus, DetectorError, ZooOutput, ZooParams};
use crate::embed::{EmbedError, FeatureHashEmbedder, PrecomputedEmbeddings, TextEmbedder};
use crate::losses::{LossError, LossFlags};
use crate::metrics::{label_windows, MetricError};
use crate::model::{EncoderKind, ModelConfig, ModelError, SelectorModel};
use crate::prune::{PruneError, PruneStrategy};

pub use eval::{
    evaluate_choices, evaluate_selector, evaluate_with_table, score_table, write_report_csv, EvalReport, ScoreTable,
    SeriesRow,
};
pub use select::{detect_and_score, select, tally_votes, vote_rank, DetectionResult, DetectorRun, SelectionResult};
pub use train::{
    batch_loss, epoch_schedule, plan_epoch, prepare_samples, train, BatchOutput, NullObserver, TrainEvent,
    TrainObserver, TrainOutcome, TrainSample,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no labeled training windows (every window lacks anomalies in its span)")]
    EmptyTrainingSet,
    #[error("numeric fault at epoch {epoch}, batch {batch}: {message}")]
    NumericFault {
        epoch: usize,
        batch: usize,
        message: String,
        /// Parameters at the end of the last completed epoch.
        last_good: Box<SelectorModel>,
    },
    #[error("training cancelled during epoch {epoch}")]
    Cancelled { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFlags {
    pub pisl: bool,
    pub mki: bool,
    pub pruning: PruneStrategy,
}

impl TrainFlags {
    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            pisl: self.pisl,
            mki: self.mki,
        }
    }
}

/// Every hyperparameter of a run. Mirrors the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_bound: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Window length `L`.
    pub window: usize,
    /// Window stride; `window / 2` when unset.
    pub stride: Option<usize>,
    pub t_soft: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub tau_nce: f64,
    /// Projection output dimension `H`.
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub text_dim: usize,
    pub encoder: EncoderKind,
    pub mlp_hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    /// Pruning ratio `r`.
    pub prune_ratio: f64,
    pub lsh_bits: usize,
    /// Equi-depth bin count `p`.
    pub bins: usize,
    /// Fraction of final epochs trained on the full set.
    pub anneal_fraction: f64,
    /// CSV of precomputed text embeddings; feature hashing when unset.
    pub embeddings_file: Option<PathBuf>,
    pub flags: TrainFlags,
    pub zoo: ZooParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            clip_bound: 5.0,
            momentum: 0.0,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            window: 64,
            stride: None,
            t_soft: 0.25,
            alpha: 0.4,
            lambda: 0.78,
            tau_nce: 0.1,
            proj_dim: 64,
            proj_hidden: 256,
            text_dim: 64,
            encoder: EncoderKind::Mlp,
            mlp_hidden: vec![256, 128],
            conv_channels: vec![32, 64, 64],
            conv_kernel: 7,
            prune_ratio: 0.8,
            lsh_bits: 14,
            bins: 8,
            anneal_fraction: 0.125,
            embeddings_file: None,
            flags: TrainFlags::default(),
            zoo: ZooParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.window / 2).max(1))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(PipelineError::Config(msg.to_string())) };
        check(self.learning_rate > 0.0, "learning_rate must be > 0")?;
        check(self.clip_bound > 0.0, "clip_bound must be > 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(self.epochs >= 1, "epochs must be >= 1")?;
        check(self.window >= 2, "window must be >= 2")?;
        check(self.stride() >= 1, "stride must be >= 1")?;
        check(self.t_soft > 0.0, "t_soft must be > 0")?;
        check((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]")?;
        check(self.lambda >= 0.0, "lambda must be >= 0")?;
        check(self.tau_nce > 0.0, "tau_nce must be > 0")?;
        check((0.0..1.0).contains(&self.prune_ratio), "prune_ratio must lie in [0, 1)")?;
        check((1..=64).contains(&self.lsh_bits), "lsh_bits must lie in 1..=64")?;
        check(self.bins >= 1, "bins must be >= 1")?;
        check((0.0..=1.0).contains(&self.anneal_fraction), "anneal_fraction must lie in [0, 1]")?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            window: self.window,
            n_classes: crate::detectors::DetectorId::COUNT,
            text_dim: self.text_dim,
            proj_dim: self.proj_dim,
            proj_hidden: self.proj_hidden,
            mlp_hidden: self.mlp_hidden.clone(),
            conv_channels: self.conv_channels.clone(),
            conv_kernel: self.conv_kernel,
        }
    }

    /// The configured embedder. A precomputed file fixes `text_dim`.
    pub fn embedder(&self) -> Result<Box<dyn TextEmbedder>, PipelineError> {
        match &self.embeddings_file {
            Some(path) => {
                let table = PrecomputedEmbeddings::load(path)?;
                if table.dim() != self.text_dim {
                    return Err(PipelineError::Config(format!(
                        "embedding file has dim {}, config text_dim is {}",
                        table.dim(),
                        self.text_dim
                    )));
                }
                Ok(Box::new(table))
            }
            None => Ok(Box::new(FeatureHashEmbedder::new(self.text_dim))),
        }
    }
}

/// Windows of a corpus split into labeled and anomaly-free, plus the raw
/// detector outputs.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub labeled: Vec<WindowSample>,
    pub unlabeled: Vec<WindowSample>,
    pub stats: WindowingStats,
    pub zoo: Vec<ZooOutput>,
}

/// Runs the detector zoo on every series and labels each window with the
/// per-detector AUC-PR over the window plus `window / 2` context per side.
pub fn label_corpus(
    corpus: &[LabeledSeries],
    window: usize,
    stride: usize,
    zoo_params: &ZooParams,
) -> Result<LabeledCorpus, PipelineError> {
    let (windows, stats) = extract_corpus_windows(corpus, window, stride)?;
    let zoo = score_corpus(corpus, &zoo_params.resolved(window));
    label_with_zoo(windows, stats, corpus, zoo, window)
}

pub(crate) fn label_with_zoo(
    windows: Vec<WindowSample>,
    stats: WindowingStats,
    corpus: &[LabeledSeries],
    zoo: Vec<ZooOutput>,
    window: usize,
) -> Result<LabeledCorpus, PipelineError> {
    let outcome = label_windows(windows, corpus, &zoo, window / 2)?;
    Ok(LabeledCorpus {
        labeled: outcome.labeled,
        unlabeled: outcome.unlabeled,
        stats,
        zoo,
    })
}

/// SplitMix64 step, used to derive independent seeds from one run seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fresh model for a config, with the config echoed into the file header.
pub fn init_model(config: &TrainConfig) -> Result<SelectorModel, PipelineError> {
    let mut model = SelectorModel::new(config.model_config(), derive_seed(config.seed, 1, 0))?;
    model.echo = serde_json::to_value(config).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(model)
}

/// Stride recorded in a model's config echo, else `window / 2`.
pub fn model_stride(model: &SelectorModel) -> usize {
    model
        .echo
        .get("stride")
        .and_then(|v| v.as_u64())
        .map(|s| s as usize)
        .unwrap_or((model.config.window / 2).max(1))
}

/// Detector parameters recorded in a model's config echo.
pub fn model_zoo_params(model: &SelectorModel) -> ZooParams {
    model
        .echo
        .get("zoo")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_validation() {
        let mut c = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        c.flags.pruning = PruneStrategy::Pa;
        c.flags.mki = true;
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);

        let parsed = TrainConfig::from_toml("epochs = 2\n[flags]\npisl = true\npruning = \"infobatch\"\n").unwrap();
        assert_eq!(parsed.epochs, 2);
        assert_eq!(parsed.flags.pruning, PruneStrategy::InfoBatch);
        assert!(TrainConfig::from_toml("prune_ratio = 1.0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 0.0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_eq!(derive_seed(5, 3, 2), derive_seed(5, 3, 2));
    }
}
