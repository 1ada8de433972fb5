//! Training jobs: a FIFO queue drained by a single worker, so at most one
//! job trains at a time.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use kdselect_core::data::LabeledSeries;
use kdselect_core::model::{save_model, SelectorModel};
use kdselect_core::pipeline::{evaluate_selector, PipelineError, TrainConfig, TrainEvent, TrainObserver};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Notify};

use crate::ops::train_corpus;
use crate::registry::{EvalSummary, MetricsSummary, Registry};
use crate::store::{load_stored_corpus, new_report_id, save_report, DataDir, StoredReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Finished,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Finished | JobState::Failed | JobState::Cancelled)
    }

    /// queued -> running -> {finished, failed, cancelled}; a queued job may
    /// also be cancelled before it starts.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Cancelled) | (Running, Finished) | (Running, Failed) | (Running, Cancelled)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub corpus_id: String,
    pub eval_corpus_id: Option<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub total_epochs: usize,
    /// Events emitted so far.
    pub events: usize,
    pub last_event: Option<TrainEvent>,
    pub selector_id: Option<String>,
    pub report_id: Option<String>,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub corpus_id: String,
    pub config: TrainConfig,
    pub eval_corpus_id: Option<String>,
}

struct JobInner {
    status: JobStatus,
    events: Vec<TrainEvent>,
}

pub struct JobHandle {
    spec: JobSpec,
    inner: Mutex<JobInner>,
    cancel: AtomicBool,
    /// Woken on every new event and state change.
    pub changed: Notify,
}

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error("job `{0}` not found")]
    NotFound(String),
    #[error("job `{id}` is already {state:?}")]
    Finished { id: String, state: JobState },
}

impl JobHandle {
    pub fn status(&self) -> JobStatus {
        self.inner.lock().expect("job lock").status.clone()
    }

    /// Events from index `from` on, and the state at the time of reading.
    pub fn events_since(&self, from: usize) -> (Vec<TrainEvent>, JobState) {
        let inner = self.inner.lock().expect("job lock");
        let from = from.min(inner.events.len());
        (inner.events[from..].to_vec(), inner.status.state)
    }

    fn transition(&self, next: JobState, edit: impl FnOnce(&mut JobStatus)) -> bool {
        let mut inner = self.inner.lock().expect("job lock");
        if !inner.status.state.can_become(next) {
            return false;
        }
        inner.status.state = next;
        let now = Utc::now();
        if next == JobState::Running {
            inner.status.started_at = Some(now);
        } else {
            inner.status.finished_at = Some(now);
        }
        edit(&mut inner.status);
        drop(inner);
        self.changed.notify_waiters();
        true
    }

    fn push_event(&self, event: &TrainEvent) {
        let mut inner = self.inner.lock().expect("job lock");
        if let TrainEvent::Epoch { epoch, .. } = event {
            inner.status.epoch = epoch + 1;
        }
        inner.events.push(event.clone());
        inner.status.events = inner.events.len();
        inner.status.last_event = Some(event.clone());
        drop(inner);
        self.changed.notify_waiters();
    }
}

/// What a job needs besides its spec.
#[derive(Clone)]
pub struct JobContext {
    pub dir: DataDir,
    pub registry: Arc<Mutex<Registry>>,
}

pub struct JobManager {
    jobs: Mutex<HashMap<String, Arc<JobHandle>>>,
    queue: mpsc::UnboundedSender<Arc<JobHandle>>,
}

impl JobManager {
    /// Starts the worker on the current tokio runtime.
    pub fn start(ctx: JobContext) -> Arc<Self> {
        let (tx, mut rx) = mpsc::unbounded_channel::<Arc<JobHandle>>();
        tokio::spawn(async move {
            while let Some(handle) = rx.recv().await {
                if !handle.transition(JobState::Running, |_| {}) {
                    // cancelled while queued
                    continue;
                }
                let ctx = ctx.clone();
                let h = handle.clone();
                if let Err(e) = tokio::task::spawn_blocking(move || run_job(&ctx, &h)).await {
                    handle.transition(JobState::Failed, |s| s.error = Some(format!("worker panicked: {e}")));
                }
            }
        });
        Arc::new(Self {
            jobs: Mutex::new(HashMap::new()),
            queue: tx,
        })
    }

    pub fn submit(&self, spec: JobSpec) -> JobStatus {
        let id = format!("job-{}", uuid::Uuid::new_v4().simple());
        let status = JobStatus {
            job_id: id.clone(),
            state: JobState::Queued,
            corpus_id: spec.corpus_id.clone(),
            eval_corpus_id: spec.eval_corpus_id.clone(),
            epoch: 0,
            total_epochs: spec.config.epochs,
            events: 0,
            last_event: None,
            selector_id: None,
            report_id: None,
            error: None,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
        };
        let handle = Arc::new(JobHandle {
            spec,
            inner: Mutex::new(JobInner {
                status: status.clone(),
                events: Vec::new(),
            }),
            cancel: AtomicBool::new(false),
            changed: Notify::new(),
        });
        self.jobs.lock().expect("jobs lock").insert(id, handle.clone());
        // the receiver lives as long as the runtime
        let _ = self.queue.send(handle);
        status
    }

    pub fn get(&self, id: &str) -> Result<Arc<JobHandle>, JobError> {
        self.jobs
            .lock()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| JobError::NotFound(id.to_string()))
    }

    /// A queued job is cancelled at once; a running one stops before its
    /// next batch.
    pub fn cancel(&self, id: &str) -> Result<JobStatus, JobError> {
        let handle = self.get(id)?;
        handle.cancel.store(true, Ordering::SeqCst);
        handle.transition(JobState::Cancelled, |s| s.error = Some("cancelled before start".into()));
        let status = handle.status();
        if matches!(status.state, JobState::Finished | JobState::Failed) {
            return Err(JobError::Finished {
                id: id.to_string(),
                state: status.state,
            });
        }
        Ok(status)
    }
}

struct JobObserver<'a> {
    handle: &'a JobHandle,
    log: Option<BufWriter<File>>,
}

impl TrainObserver for JobObserver<'_> {
    fn on_event(&mut self, event: &TrainEvent) {
        if let Some(log) = &mut self.log {
            if writeln!(log, "{}", event.to_ndjson()).and_then(|_| log.flush()).is_err() {
                self.log = None;
            }
        }
        self.handle.push_event(event);
    }

    fn cancelled(&self) -> bool {
        self.handle.cancel.load(Ordering::SeqCst)
    }
}

/// Evaluates `model` on a stored corpus and saves the report.
pub fn evaluate_to_report(
    dir: &DataDir,
    model: &SelectorModel,
    selector_id: &str,
    corpus_id: &str,
    corpus: &[LabeledSeries],
    report_id: String,
) -> anyhow::Result<StoredReport> {
    let report = evaluate_selector(
        model,
        corpus,
        kdselect_core::pipeline::model_stride(model),
        &kdselect_core::pipeline::model_zoo_params(model),
    )?;
    let stored = StoredReport {
        report_id,
        selector_id: selector_id.to_string(),
        corpus_id: corpus_id.to_string(),
        created_at: Utc::now(),
        report,
    };
    save_report(dir, &stored)?;
    Ok(stored)
}

fn run_job(ctx: &JobContext, handle: &JobHandle) {
    let id = handle.status().job_id;
    let spec = &handle.spec;
    let result = (|| -> anyhow::Result<(String, Option<String>)> {
        let corpus = load_stored_corpus(&ctx.dir, &spec.corpus_id)?;
        let eval_corpus = match &spec.eval_corpus_id {
            Some(eid) => Some(load_stored_corpus(&ctx.dir, eid)?),
            None => None,
        };
        let log = File::create(ctx.dir.job_events(&id)).ok().map(BufWriter::new);
        let mut observer = JobObserver { handle, log };
        let (outcome, summary) = match train_corpus(&corpus, &spec.config, &mut observer) {
            Ok(v) => v,
            Err(PipelineError::NumericFault {
                epoch,
                batch,
                message,
                last_good,
            }) => {
                let path = ctx.dir.root().join("jobs").join(format!("{id}.last_good.kdsl"));
                save_model(&last_good, &path)?;
                anyhow::bail!(
                    "numeric fault at epoch {epoch}, batch {batch}: {message}; last good parameters in {}",
                    path.display()
                );
            }
            Err(e) => return Err(e.into()),
        };
        let mut metrics = MetricsSummary {
            epochs: summary.epochs,
            labeled_windows: summary.labeled_windows,
            final_loss: summary.final_loss,
            kept_per_epoch: summary.kept_per_epoch,
            eval: None,
        };
        let report = match (&spec.eval_corpus_id, &eval_corpus) {
            (Some(eid), Some(corpus)) => {
                let report_id = new_report_id();
                let report = evaluate_selector(
                    &outcome.model,
                    corpus,
                    kdselect_core::pipeline::model_stride(&outcome.model),
                    &spec.config.zoo,
                )?;
                let (best_single, best_single_auc) = report.best_single();
                metrics.eval = Some(EvalSummary {
                    corpus_id: eid.clone(),
                    report_id: report_id.clone(),
                    n_series: report.n_series,
                    mean_auc_selected: report.mean_auc_selected,
                    mean_auc_oracle: report.mean_auc_oracle,
                    best_single,
                    best_single_auc,
                    window_top1: report.window_top1,
                });
                Some((report_id, eid.clone(), report))
            }
            _ => None,
        };
        let record = ctx.registry.lock().expect("registry lock").put(&outcome.model, metrics, &id)?;
        let report_id = match report {
            Some((report_id, corpus_id, report)) => {
                save_report(
                    &ctx.dir,
                    &StoredReport {
                        report_id: report_id.clone(),
                        selector_id: record.selector_id.clone(),
                        corpus_id,
                        created_at: Utc::now(),
                        report,
                    },
                )?;
                Some(report_id)
            }
            None => None,
        };
        Ok((record.selector_id, report_id))
    })();

    match result {
        Ok((selector_id, report_id)) => {
            handle.transition(JobState::Finished, |s| {
                s.selector_id = Some(selector_id);
                s.report_id = report_id;
            });
        }
        Err(e) if matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Cancelled { .. })) => {
            handle.transition(JobState::Cancelled, |s| s.error = Some(e.to_string()));
        }
        Err(e) => {
            handle.transition(JobState::Failed, |s| s.error = Some(format!("{e:#}")));
        }
    }
}
