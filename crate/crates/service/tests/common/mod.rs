#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use kdselect_core::data::{write_corpus, LabeledSeries, SidecarEntry};
use kdselect_core::synth::{generate, SynthConfig};
use kdselect_service::server::{router, AppState};
use serde_json::{json, Value};

/// Serves a fresh data directory on an ephemeral port.
pub async fn spawn_server(dir: &std::path::Path) -> String {
    let state = AppState::open(dir, None).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(state)).await.unwrap();
    });
    format!("http://{addr}")
}

/// The synthetic corpus cut to `n` series, interleaved by family.
pub fn synthetic(n: usize, seed: u64) -> Vec<LabeledSeries> {
    let per_family = n.div_ceil(3);
    let mut corpus = generate(&SynthConfig {
        per_family,
        seed,
        ..SynthConfig::default()
    });
    corpus.truncate(n);
    corpus
}

pub fn corpus_csv(corpus: &[LabeledSeries]) -> String {
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus).unwrap();
    String::from_utf8(buf).unwrap()
}

pub fn metadata(corpus: &[LabeledSeries]) -> BTreeMap<String, SidecarEntry> {
    corpus
        .iter()
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

pub fn upload_body(corpus: &[LabeledSeries]) -> Value {
    json!({ "csv": corpus_csv(corpus), "metadata": metadata(corpus) })
}

#[derive(Clone, Copy, Debug)]
pub enum Kind {
    Str,
    Num,
    Int,
    Bool,
    Arr,
    Obj,
    /// Null or anything.
    Opt,
}

fn kind_ok(v: &Value, kind: Kind) -> bool {
    match kind {
        Kind::Str => v.is_string(),
        Kind::Num => v.is_number(),
        Kind::Int => v.is_u64(),
        Kind::Bool => v.is_boolean(),
        Kind::Arr => v.is_array(),
        Kind::Obj => v.is_object(),
        Kind::Opt => true,
    }
}

/// Checks that `v` has each field with the given JSON type.
pub fn check_schema(name: &str, v: &Value, fields: &[(&str, Kind)]) -> Result<(), String> {
    for (field, kind) in fields {
        match v.get(field) {
            Some(x) if kind_ok(x, *kind) => {}
            Some(x) => return Err(format!("{name}.{field}: expected {kind:?}, got {x}")),
            None => return Err(format!("{name}.{field}: missing")),
        }
    }
    Ok(())
}

pub const JOB_STATUS: &[(&str, Kind)] = &[
    ("job_id", Kind::Str),
    ("state", Kind::Str),
    ("corpus_id", Kind::Str),
    ("epoch", Kind::Int),
    ("total_epochs", Kind::Int),
    ("events", Kind::Int),
    ("last_event", Kind::Opt),
    ("selector_id", Kind::Opt),
    ("report_id", Kind::Opt),
    ("error", Kind::Opt),
    ("created_at", Kind::Str),
];

pub const SELECTOR_RECORD: &[(&str, Kind)] = &[
    ("selector_id", Kind::Str),
    ("created_at", Kind::Str),
    ("config", Kind::Obj),
    ("metrics", Kind::Obj),
    ("model_path", Kind::Str),
    ("source", Kind::Str),
];

pub const SELECTION: &[(&str, Kind)] = &[
    ("series_id", Kind::Str),
    ("predictions", Kind::Arr),
    ("votes", Kind::Arr),
    ("selected", Kind::Str),
    ("fallback", Kind::Bool),
];

pub const DETECTION: &[(&str, Kind)] = &[
    ("series_id", Kind::Str),
    ("requested", Kind::Str),
    ("used", Kind::Opt),
    ("fell_back", Kind::Bool),
    ("runs", Kind::Arr),
];

pub const DETECTOR_RUN: &[(&str, Kind)] = &[
    ("detector", Kind::Str),
    ("trace", Kind::Opt),
    ("auc_pr", Kind::Opt),
    ("skipped", Kind::Opt),
];

pub const REPORT: &[(&str, Kind)] = &[
    ("n_series", Kind::Int),
    ("n_skipped", Kind::Int),
    ("mean_auc_selected", Kind::Num),
    ("mean_auc_oracle", Kind::Num),
    ("mean_auc_by_detector", Kind::Arr),
    ("series_top1", Kind::Num),
    ("window_top1", Kind::Num),
    ("n_windows", Kind::Int),
    ("rows", Kind::Arr),
];

pub const BATCH_EVENT: &[(&str, Kind)] = &[
    ("kind", Kind::Str),
    ("epoch", Kind::Int),
    ("batch", Kind::Int),
    ("size", Kind::Int),
    ("loss", Kind::Obj),
    ("grad_norm", Kind::Num),
    ("wall_ms", Kind::Num),
    ("samples_per_sec", Kind::Num),
];

pub const EPOCH_EVENT: &[(&str, Kind)] = &[
    ("kind", Kind::Str),
    ("epoch", Kind::Int),
    ("batches", Kind::Int),
    ("loss", Kind::Obj),
    ("pruning_active", Kind::Bool),
    ("prune", Kind::Obj),
    ("wall_ms", Kind::Num),
    ("samples_per_sec", Kind::Num),
];

pub const PRUNE_STATS: &[(&str, Kind)] = &[
    ("epoch", Kind::Int),
    ("n_total", Kind::Int),
    ("n_kept", Kind::Int),
    ("n_pruned_low", Kind::Int),
    ("n_pruned_bucket", Kind::Int),
    ("n_buckets_multi", Kind::Int),
];

pub const LOSS: &[(&str, Kind)] = &[("ce", Kind::Num), ("pisl", Kind::Num), ("mki", Kind::Num), ("total", Kind::Num)];

/// Validates one NDJSON training event.
pub fn check_event(v: &Value) -> Result<(), String> {
    match v["kind"].as_str() {
        Some("batch") => check_schema("batch", v, BATCH_EVENT)?,
        Some("epoch") => {
            check_schema("epoch", v, EPOCH_EVENT)?;
            check_schema("prune", &v["prune"], PRUNE_STATS)?;
        }
        other => return Err(format!("unknown event kind {other:?}")),
    }
    check_schema("loss", &v["loss"], LOSS)
}

/// Polls a job until it reaches a terminal state, returning every state seen.
pub async fn wait_job(client: &reqwest::Client, base: &str, job_id: &str, limit: Duration) -> (Value, Vec<String>) {
    let start = Instant::now();
    let mut seen: Vec<String> = Vec::new();
    loop {
        let status: Value = client.get(format!("{base}/jobs/{job_id}")).send().await.unwrap().json().await.unwrap();
        let state = status["state"].as_str().unwrap().to_string();
        if seen.last() != Some(&state) {
            seen.push(state.clone());
        }
        if matches!(state.as_str(), "finished" | "failed" | "cancelled") {
            return (status, seen);
        }
        assert!(start.elapsed() < limit, "job {job_id} still {state}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Parses a complete SSE body into `(id, event, data)` triples.
pub fn parse_sse(body: &str) -> Vec<(Option<String>, String, String)> {
    let mut out = Vec::new();
    for block in body.split("\n\n") {
        let (mut id, mut event, mut data) = (None, String::from("message"), Vec::new());
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v).to_string());
            }
        }
        if !data.is_empty() {
            out.push((id, event, data.join("\n")));
        }
    }
    out
}
