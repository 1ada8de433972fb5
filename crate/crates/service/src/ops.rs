//! Steps shared by the CLI and the HTTP service.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use kdselect_core::data::{apply_sidecar, load_corpus, load_sidecar, LabeledSeries};
use kdselect_core::detectors::ZooParams;
use kdselect_core::losses::LossBreakdown;
use kdselect_core::model::SelectorModel;
use kdselect_core::pipeline::{
    label_corpus, model_zoo_params, prepare_samples, train, PipelineError, TrainConfig, TrainEvent, TrainObserver,
    TrainOutcome,
};
use serde::{Deserialize, Serialize};

/// A run file: every `TrainConfig` field, plus optional `corpus` and
/// `metadata` paths resolved against the file's directory.
#[derive(Debug, Clone)]
pub struct RunFile {
    pub config: TrainConfig,
    pub corpus: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
}

pub fn parse_run_toml(text: &str, base: &Path) -> anyhow::Result<RunFile> {
    let mut table: toml::Table = toml::from_str(text).context("run file is not valid TOML")?;
    let mut take_path = |key: &str| -> anyhow::Result<Option<PathBuf>> {
        match table.remove(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(base.join(s))),
            Some(other) => bail!("`{key}` must be a path string, found {}", other.type_str()),
        }
    };
    let corpus = take_path("corpus")?;
    let metadata = take_path("metadata")?;
    let mut config: TrainConfig = table.try_into().context("invalid run configuration")?;
    if let Some(p) = &config.embeddings_file {
        config.embeddings_file = Some(base.join(p));
    }
    config.validate()?;
    Ok(RunFile { config, corpus, metadata })
}

pub fn load_run_file(path: &Path) -> anyhow::Result<RunFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_run_toml(&text, path.parent().unwrap_or(Path::new(".")))
}

/// `KDSELECT_SEED`, when set, replaces the configured seed.
pub fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("KDSELECT_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("KDSELECT_SEED=`{s}` is not an unsigned integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Loads a corpus CSV. Without an explicit sidecar, `<name>.meta.json`
/// beside the CSV is used when present.
pub fn read_corpus_files(path: &Path, metadata: Option<&Path>) -> anyhow::Result<Vec<LabeledSeries>> {
    let mut corpus = load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    let beside = path.with_extension("meta.json");
    let meta = metadata.or_else(|| beside.exists().then_some(beside.as_path()));
    if let Some(meta) = meta {
        apply_sidecar(&mut corpus, &load_sidecar(meta).with_context(|| format!("loading metadata {}", meta.display()))?);
    }
    Ok(corpus)
}

/// The series named `id`, or every series when `id` is `None`.
pub fn pick_series<'a>(corpus: &'a [LabeledSeries], id: Option<&str>) -> anyhow::Result<Vec<&'a LabeledSeries>> {
    match id {
        Some(id) => match corpus.iter().find(|s| s.id == id) {
            Some(s) => Ok(vec![s]),
            None => bail!("series `{id}` not in corpus"),
        },
        None if corpus.is_empty() => bail!("corpus is empty"),
        None => Ok(corpus.iter().collect()),
    }
}

/// Detector parameters a model was trained with, resolved for its window.
pub fn model_detector_params(model: &SelectorModel) -> ZooParams {
    model_zoo_params(model).resolved(model.config.window)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub series: usize,
    pub skipped_series: usize,
    pub labeled_windows: usize,
    pub unlabeled_windows: usize,
    pub epochs: usize,
    pub final_loss: Option<LossBreakdown>,
    pub kept_per_epoch: Vec<usize>,
}

struct Tap<'a> {
    inner: &'a mut dyn TrainObserver,
    last: Option<LossBreakdown>,
}

impl TrainObserver for Tap<'_> {
    fn on_event(&mut self, event: &TrainEvent) {
        if let TrainEvent::Epoch { loss, .. } = event {
            self.last = Some(*loss);
        }
        self.inner.on_event(event);
    }
    fn on_checkpoint(&mut self, epoch: usize, model: &SelectorModel) {
        self.inner.on_checkpoint(epoch, model);
    }
    fn cancelled(&self) -> bool {
        self.inner.cancelled()
    }
}

/// Labels the corpus with the detector zoo and trains a selector on it.
pub fn train_corpus(
    corpus: &[LabeledSeries],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainOutcome, TrainSummary), PipelineError> {
    config.validate()?;
    let labeled = label_corpus(corpus, config.window, config.stride(), &config.zoo)?;
    let embedder = config.embedder()?;
    let samples = prepare_samples(&labeled.labeled, config, embedder.as_ref())?;
    let mut tap = Tap { inner: observer, last: None };
    let outcome = train(&samples, config, &mut tap)?;
    let summary = TrainSummary {
        series: corpus.len(),
        skipped_series: labeled.stats.series_skipped,
        labeled_windows: labeled.labeled.len(),
        unlabeled_windows: labeled.unlabeled.len(),
        epochs: config.epochs,
        final_loss: tap.last,
        kept_per_epoch: outcome.kept_per_epoch.clone(),
    };
    Ok((outcome, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_file_takes_paths_and_config() {
        let run = parse_run_toml(
            "corpus = \"train.csv\"\nepochs = 3\nwindow = 32\n[flags]\npisl = true\npruning = \"pa\"\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(run.corpus, Some(PathBuf::from("/data/train.csv")));
        assert_eq!(run.config.epochs, 3);
        assert!(run.config.flags.pisl);
        assert!(parse_run_toml("bogus_field = 1", Path::new(".")).is_err());
        assert!(parse_run_toml("corpus = 5", Path::new(".")).is_err());
        assert!(parse_run_toml("alpha = 2.0", Path::new(".")).is_err());
    }
}
