use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kdselect_core::data::{split_corpus, write_corpus, LabeledSeries, SidecarEntry};
use kdselect_core::detectors::{write_traces, DetectorId, ZooParams};
use kdselect_core::metrics::write_label_table;
use kdselect_core::model::{load_model, save_model};
use kdselect_core::pipeline::{
    detect_and_score, evaluate_selector, label_corpus, model_stride, model_zoo_params, select, write_report_csv,
    TrainConfig, TrainEvent, TrainObserver,
};
use kdselect_core::synth::{generate, SynthConfig};
use serde::Serialize;

use crate::ops::{load_run_file, model_detector_params, pick_series, read_corpus_files, train_corpus};
use crate::store::{corpus_info, put_corpus, DataDir};

#[derive(Debug, Parser)]
#[command(name = "kdselect", version, about = "Pick the anomaly detector that suits each time series.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus (or generate a synthetic one) and store it.
    Ingest(IngestArgs),
    /// Run the detector zoo and write the per-window label table.
    Label(LabelArgs),
    /// Train a selector.
    Train(TrainArgs),
    /// Select a detector per series by majority vote; JSON on stdout.
    Select(SelectArgs),
    /// Run a detector (given, or chosen by a selector) on series.
    Detect(DetectArgs),
    /// Evaluate a selector against single detectors and the oracle.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus CSV with header `series_id,value,label`.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Metadata sidecar JSON for `--input`.
    #[arg(long, requires = "input")]
    pub metadata: Option<PathBuf>,
    /// Generate the synthetic mixed-anomaly corpus instead.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 10)]
    pub per_family: usize,
    #[arg(long, default_value_t = 512)]
    pub length: usize,
    #[arg(long, env = "KDSELECT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Keep this fraction for `--out` and write the rest to `--test-out`.
    #[arg(long, requires = "test_out")]
    pub split: Option<f64>,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    /// Where to write the corpus. Without it the corpus goes into the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the metadata sidecar (defaults next to `--out`).
    #[arg(long)]
    pub metadata_out: Option<PathBuf>,
    #[arg(long, env = "KDSELECT_DATA_DIR", default_value = "kdselect-data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// Run file supplying window, stride and detector parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Label table `window_id,hard_label,p_0,...`.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional score traces `series_id,point_index,detector,score`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run file; keys mirror the training configuration, plus `corpus` and `metadata` paths.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the run file's `corpus`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Event log; defaults to `events.ndjson` beside `--out`.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Overrides the run file's seed.
    #[arg(long, env = "KDSELECT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus CSV holding the series.
    #[arg(long)]
    pub series: PathBuf,
    /// Only this series; otherwise every series in the file.
    #[arg(long)]
    pub series_id: Option<String>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub series_id: Option<String>,
    /// Detector name (IForest, LOF, HBOS, MP, PCA, POLY).
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub detector: Option<String>,
    /// Let this selector choose the detector.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also run every other detector.
    #[arg(long)]
    pub compare: bool,
    /// Run file for detector parameters when no model is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, env = "KDSELECT_DATA_DIR", default_value = "kdselect-data")]
    pub data_dir: PathBuf,
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Runs one subcommand.
pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Label(a) => label(a),
        Command::Train(a) => train_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => {
            let seed = crate::ops::env_seed()?;
            tokio::runtime::Runtime::new()?.block_on(crate::server::serve(&a.bind, a.data_dir, seed))
        }
    }
}

fn sidecar_of(corpus: &[LabeledSeries]) -> std::collections::HashMap<String, SidecarEntry> {
    corpus
        .iter()
        .filter(|s| !s.dataset_name.is_empty() || !s.domain_text.is_empty())
        .map(|s| {
            (
                s.id.clone(),
                SidecarEntry {
                    dataset_name: s.dataset_name.clone(),
                    domain_description: s.domain_text.clone(),
                },
            )
        })
        .collect()
}

fn write_corpus_file(path: &Path, meta_path: Option<&Path>, corpus: &[LabeledSeries]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    write_corpus(&mut w, corpus)?;
    w.flush()?;
    let sidecar = sidecar_of(corpus);
    if !sidecar.is_empty() {
        let default_meta = path.with_extension("meta.json");
        let meta = meta_path.unwrap_or(&default_meta);
        let sorted: std::collections::BTreeMap<_, _> = sidecar.iter().collect();
        std::fs::write(meta, serde_json::to_vec_pretty(&sorted)?)?;
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let corpus = if a.synthetic {
        generate(&SynthConfig {
            per_family: a.per_family,
            length: a.length,
            seed: a.seed,
            ..SynthConfig::default()
        })
    } else {
        let input = a.input.as_deref().expect("clap enforces input");
        read_corpus_files(input, a.metadata.as_deref())?
    };
    if corpus.is_empty() {
        bail!("corpus is empty");
    }
    let (main, test) = match a.split {
        Some(f) => {
            let (train, test) = split_corpus(&corpus, f, a.seed)?;
            (train, Some(test))
        }
        None => (corpus, None),
    };
    match &a.out {
        Some(out) => {
            write_corpus_file(out, a.metadata_out.as_deref(), &main)?;
            let mut summary = serde_json::json!({ "train": corpus_info(&out.display().to_string(), &main) });
            if let (Some(test), Some(path)) = (&test, &a.test_out) {
                write_corpus_file(path, None, test)?;
                summary["test"] = serde_json::to_value(corpus_info(&path.display().to_string(), test))?;
            }
            print_json(&summary)
        }
        None => {
            let dir = DataDir::open(&a.data_dir)?;
            let store = |series: &[LabeledSeries]| -> anyhow::Result<_> {
                let mut buf = Vec::new();
                write_corpus(&mut buf, series)?;
                let sidecar = sidecar_of(series);
                Ok(put_corpus(&dir, &String::from_utf8(buf)?, (!sidecar.is_empty()).then_some(&sidecar))?)
            };
            let mut summary = serde_json::json!({ "train": store(&main)? });
            if let Some(test) = &test {
                summary["test"] = serde_json::to_value(store(test)?)?;
            }
            print_json(&summary)
        }
    }
}

fn label(a: LabelArgs) -> anyhow::Result<()> {
    let run = match &a.config {
        Some(p) => Some(load_run_file(p)?),
        None => None,
    };
    let mut config = run.map(|r| r.config).unwrap_or_default();
    if let Some(w) = a.window {
        config.window = w;
    }
    if a.stride.is_some() {
        config.stride = a.stride;
    }
    config.validate()?;
    let corpus = read_corpus_files(&a.corpus, a.metadata.as_deref())?;
    let labeled = label_corpus(&corpus, config.window, config.stride(), &config.zoo)?;
    let mut w = create(&a.out)?;
    write_label_table(&mut w, &labeled.labeled)?;
    w.flush()?;
    if let Some(path) = &a.traces {
        let traces: Vec<_> = labeled.zoo.iter().flat_map(|z| z.traces.iter().cloned()).collect();
        let mut w = create(path)?;
        write_traces(&mut w, &traces)?;
        w.flush()?;
    }
    let skipped: Vec<_> = labeled
        .zoo
        .iter()
        .flat_map(|z| z.skipped.iter().map(move |s| serde_json::json!({ "series_id": z.series_id, "detector": s.detector, "reason": s.reason })))
        .collect();
    print_json(&serde_json::json!({
        "windowing": labeled.stats,
        "labeled_windows": labeled.labeled.len(),
        "unlabeled_windows": labeled.unlabeled.len(),
        "skipped_detectors": skipped,
    }))
}

/// Writes each event as one NDJSON line and echoes epochs to stderr.
struct EventLog<W: Write> {
    out: W,
    quiet: bool,
    error: Option<std::io::Error>,
}

impl<W: Write> TrainObserver for EventLog<W> {
    fn on_event(&mut self, event: &TrainEvent) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{}", event.to_ndjson()) {
                self.error = Some(e);
            }
        }
        if let (false, TrainEvent::Epoch { epoch, loss, prune, .. }) = (self.quiet, event) {
            eprintln!(
                "epoch {epoch}: total {:.4} ce {:.4} pisl {:.4} mki {:.4} kept {}/{}",
                loss.total, loss.ce, loss.pisl, loss.mki, prune.n_kept, prune.n_total
            );
        }
    }
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let run = load_run_file(&a.config)?;
    let mut config: TrainConfig = run.config;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let corpus_path = a
        .corpus
        .or(run.corpus)
        .context("no corpus: pass --corpus or set `corpus` in the run file")?;
    let metadata = a.metadata.or(run.metadata);
    let corpus = read_corpus_files(&corpus_path, metadata.as_deref())?;
    let events_path = a.events.unwrap_or_else(|| {
        a.out
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("events.ndjson")
    });
    let mut log = EventLog {
        out: create(&events_path)?,
        quiet: a.quiet,
        error: None,
    };
    let (outcome, summary) = train_corpus(&corpus, &config, &mut log)?;
    log.out.flush()?;
    if let Some(e) = log.error {
        return Err(e).context("writing events");
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_model(&outcome.model, &a.out)?;
    print_json(&serde_json::json!({
        "model": a.out,
        "events": events_path,
        "summary": summary,
    }))
}

fn select_cmd(a: SelectArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let corpus = read_corpus_files(&a.series, None)?;
    let stride = a.stride.unwrap_or_else(|| model_stride(&model));
    let results = pick_series(&corpus, a.series_id.as_deref())?
        .into_iter()
        .map(|s| select(&model, s, stride))
        .collect::<Result<Vec<_>, _>>()?;
    if results.len() == 1 {
        print_json(&results[0])
    } else {
        print_json(&results)
    }
}

fn detect_cmd(a: DetectArgs) -> anyhow::Result<()> {
    let corpus = read_corpus_files(&a.series, None)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let params: ZooParams = match (&model, &a.config) {
        (Some(m), _) => model_detector_params(m),
        (None, Some(p)) => {
            let c = load_run_file(p)?.config;
            c.zoo.resolved(c.window)
        }
        (None, None) => ZooParams::default().resolved(TrainConfig::default().window),
    };
    let requested: Option<DetectorId> = a.detector.as_deref().map(str::parse).transpose()?;
    let mut out = Vec::new();
    let mut traces = Vec::new();
    for series in pick_series(&corpus, a.series_id.as_deref())? {
        let selection = match &model {
            Some(m) => Some(select(m, series, model_stride(m))?),
            None => None,
        };
        let detector = requested.or(selection.as_ref().map(|s| s.selected)).expect("clap enforces one");
        let detection = detect_and_score(series, detector, selection.as_ref().map(|s| s.votes.as_slice()), &params, a.compare);
        traces.extend(detection.runs.iter().filter_map(|r| r.trace.clone()));
        out.push(serde_json::json!({ "selection": selection, "detection": detection }));
    }
    if let Some(path) = &a.traces {
        let mut w = create(path)?;
        write_traces(&mut w, &traces)?;
        w.flush()?;
    }
    if out.len() == 1 {
        print_json(&out[0])
    } else {
        print_json(&out)
    }
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let corpus = read_corpus_files(&a.corpus, a.metadata.as_deref())?;
    let report = evaluate_selector(&model, &corpus, model_stride(&model), &model_zoo_params(&model))?;
    let mut w = create(&a.out)?;
    write_report_csv(&mut w, &report)?;
    w.flush()?;
    if let Some(path) = &a.json {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
    }
    let (best, best_auc) = report.best_single();
    print_json(&serde_json::json!({
        "report": a.out,
        "n_series": report.n_series,
        "n_skipped": report.n_skipped,
        "mean_auc_selected": report.mean_auc_selected,
        "mean_auc_oracle": report.mean_auc_oracle,
        "best_single": best,
        "best_single_auc": best_auc,
        "series_top1": report.series_top1,
        "window_top1": report.window_top1,
    }))
}
