//! HTTP API.
//!
//! Mutating requests may carry a request id, either as an `x-request-id`
//! header or a `request_id` body field. A retry with the same id gets the
//! first successful response back instead of repeating the action.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use kdselect_core::data::{LabeledSeries, SidecarEntry};
use kdselect_core::detectors::DetectorId;
use kdselect_core::model::read_model;
use kdselect_core::pipeline::{
    detect_and_score, model_stride, select, write_report_csv, DetectionResult, SelectionResult, TrainConfig,
    TrainFlags,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::jobs::{evaluate_to_report, JobContext, JobError, JobManager, JobSpec, JobState};
use crate::ops::model_detector_params;
use crate::registry::{MetricsSummary, Registry, RegistryError};
use crate::store::{
    list_corpora, load_report, load_stored_corpus, new_report_id, put_corpus, series_info, DataDir,
    SeriesInfo, StoreError,
};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            StoreError::Data(_) | StoreError::Metadata(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            StoreError::Io(_) => Self::internal(e),
        }
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            _ => Self::internal(e),
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            JobError::Finished { .. } => Self::new(StatusCode::CONFLICT, e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

type ApiResult = Result<(StatusCode, Value), ApiError>;

type Slot = Arc<tokio::sync::Mutex<Option<(StatusCode, Value)>>>;

/// Responses of completed mutations by request id.
#[derive(Default)]
struct Idempotency {
    slots: Mutex<HashMap<String, Slot>>,
}

#[derive(Clone)]
pub struct AppState {
    dir: DataDir,
    registry: Arc<Mutex<Registry>>,
    jobs: Arc<JobManager>,
    idem: Arc<Idempotency>,
    seed_override: Option<u64>,
}

impl AppState {
    /// Opens the data directory and starts the training worker. Must run
    /// inside a tokio runtime.
    pub fn open(root: impl Into<std::path::PathBuf>, seed_override: Option<u64>) -> anyhow::Result<Self> {
        let dir = DataDir::open(root)?;
        let registry = Arc::new(Mutex::new(Registry::open(dir.clone())?));
        let jobs = JobManager::start(JobContext {
            dir: dir.clone(),
            registry: registry.clone(),
        });
        Ok(Self {
            dir,
            registry,
            jobs,
            idem: Arc::new(Idempotency::default()),
            seed_override,
        })
    }

    pub fn flush(&self) -> anyhow::Result<()> {
        self.registry.lock().expect("registry lock").flush()?;
        Ok(())
    }
}

fn request_id(headers: &HeaderMap, body_id: Option<&str>) -> Option<String> {
    headers
        .get("x-request-id")
        .and_then(|v| v.to_str().ok())
        .or(body_id)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

/// Runs `action` once per request id; retries replay the stored response.
async fn idempotent<F>(state: &AppState, method: &Method, path: &str, id: Option<String>, action: F) -> Response
where
    F: std::future::Future<Output = ApiResult>,
{
    let Some(id) = id else {
        return into_response(action.await);
    };
    let slot = state
        .idem
        .slots
        .lock()
        .expect("idempotency lock")
        .entry(format!("{method} {path} {id}"))
        .or_default()
        .clone();
    let mut guard = slot.lock().await;
    if let Some((status, body)) = guard.as_ref() {
        let mut resp = (*status, Json(body.clone())).into_response();
        resp.headers_mut().insert("x-idempotent-replay", "true".parse().expect("header"));
        return resp;
    }
    let result = action.await;
    if let Ok((status, body)) = &result {
        *guard = Some((*status, body.clone()));
    }
    into_response(result)
}

fn into_response(result: ApiResult) -> Response {
    match result {
        Ok((status, body)) => (status, Json(body)).into_response(),
        Err(e) => e.into_response(),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, ApiError> {
    serde_json::to_value(v).map_err(ApiError::internal)
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/corpora", get(get_corpora).post(post_corpus))
        .route("/jobs/train", post(post_train))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(get_events))
        .route("/jobs/{id}/cancel", post(post_cancel))
        .route("/selectors", get(get_selectors).post(post_selector))
        .route("/selectors/{id}", get(get_selector).delete(delete_selector))
        .route("/select", post(post_select))
        .route("/detect", post(post_detect))
        .route("/reports", post(post_report))
        .route("/reports/{id}", get(get_report))
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "detectors": DetectorId::ALL.iter().map(|d| d.name()).collect::<Vec<_>>(),
    }))
}

async fn get_corpora(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    Ok(Json(json!({ "corpora": list_corpora(&state.dir)? })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusUpload {
    csv: String,
    #[serde(default)]
    metadata: Option<HashMap<String, SidecarEntry>>,
    #[serde(default)]
    request_id: Option<String>,
}

/// Accepts raw CSV (`text/csv`) or JSON `{csv, metadata}`.
async fn post_corpus(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let upload = if is_json {
        match serde_json::from_slice::<CorpusUpload>(&body) {
            Ok(u) => u,
            Err(e) => return ApiError::bad_request(format!("invalid upload: {e}")).into_response(),
        }
    } else {
        match String::from_utf8(body.to_vec()) {
            Ok(csv) => CorpusUpload {
                csv,
                metadata: None,
                request_id: None,
            },
            Err(_) => return ApiError::bad_request("corpus must be UTF-8").into_response(),
        }
    };
    let rid = request_id(&headers, upload.request_id.as_deref());
    let dir = state.dir.clone();
    let action = async move {
        let info = blocking(move || Ok(put_corpus(&dir, &upload.csv, upload.metadata.as_ref())?)).await?;
        Ok((StatusCode::CREATED, to_value(&info)?))
    };
    idempotent(&state, &Method::POST, "/corpora", rid, action).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    corpus_id: String,
    #[serde(default)]
    config: Option<TrainConfig>,
    #[serde(default)]
    flags: Option<TrainFlags>,
    #[serde(default)]
    eval_corpus_id: Option<String>,
    #[serde(default)]
    request_id: Option<String>,
}

async fn post_train(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<TrainRequest>, JsonRejection>,
) -> Response {
    let req = match body {
        Ok(Json(req)) => req,
        Err(e) => return ApiError::from(e).into_response(),
    };
    let rid = request_id(&headers, req.request_id.as_deref());
    let st = state.clone();
    let action = async move {
        let mut config = req.config.unwrap_or_default();
        if let Some(flags) = req.flags {
            config.flags = flags;
        }
        if let Some(seed) = st.seed_override {
            config.seed = seed;
        }
        config.validate().map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        for id in std::iter::once(&req.corpus_id).chain(&req.eval_corpus_id) {
            if !st.dir.corpus_csv(id).exists() || !crate::store::valid_id(id) {
                return Err(ApiError::new(StatusCode::NOT_FOUND, format!("corpus `{id}` not found")));
            }
        }
        let status = st.jobs.submit(JobSpec {
            corpus_id: req.corpus_id,
            config,
            eval_corpus_id: req.eval_corpus_id,
        });
        Ok((StatusCode::ACCEPTED, to_value(&status)?))
    };
    idempotent(&state, &Method::POST, "/jobs/train", rid, action).await
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(to_value(&state.jobs.get(&id)?.status())?))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: Option<usize>,
}

/// Server-sent events when the client accepts `text/event-stream`,
/// otherwise an NDJSON snapshot of the events from `since` on.
async fn get_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let handle = state.jobs.get(&id)?;
    let wants_sse = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/event-stream"));
    // resume after the last id the client saw
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
        .map(|n| n + 1);
    let from = resume.or(q.since).unwrap_or(0);

    if !wants_sse {
        let (events, job_state) = handle.events_since(from);
        let next = from + events.len();
        let body: String = events.iter().map(|e| e.to_ndjson() + "\n").collect();
        return Ok((
            [
                (header::CONTENT_TYPE, "application/x-ndjson".to_string()),
                (header::HeaderName::from_static("x-next-since"), next.to_string()),
                (header::HeaderName::from_static("x-job-state"), job_state_name(job_state)),
            ],
            body,
        )
            .into_response());
    }
    Ok(Sse::new(event_stream(handle, from)).keep_alive(KeepAlive::default()).into_response())
}

fn job_state_name(state: JobState) -> String {
    serde_json::to_value(state).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Replays stored events, follows new ones, and ends with a `status` event
/// once the job is terminal.
fn event_stream(
    handle: Arc<crate::jobs::JobHandle>,
    from: usize,
) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(Some((handle, from)), |st| async move {
        let (handle, pos) = st?;
        let waker = handle.clone();
        loop {
            let notified = waker.changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let (events, job_state) = handle.events_since(pos);
            if let Some(e) = events.first() {
                let kind = match e {
                    kdselect_core::pipeline::TrainEvent::Batch { .. } => "batch",
                    kdselect_core::pipeline::TrainEvent::Epoch { .. } => "epoch",
                };
                let ev = Event::default().id(pos.to_string()).event(kind).data(e.to_ndjson());
                return Some((Ok(ev), Some((handle, pos + 1))));
            }
            if job_state.is_terminal() {
                let status = serde_json::to_string(&handle.status()).unwrap_or_default();
                return Some((Ok(Event::default().event("status").data(status)), None));
            }
            notified.await;
        }
    })
}

async fn post_cancel(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let rid = request_id(&headers, None);
    let path = format!("/jobs/{id}/cancel");
    let st = state.clone();
    let action = async move { Ok((StatusCode::OK, to_value(&st.jobs.cancel(&id)?)?)) };
    idempotent(&state, &Method::POST, &path, rid, action).await
}

async fn get_selectors(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let list = state.registry.lock().expect("registry lock").list();
    Ok(Json(json!({ "selectors": list })))
}

async fn get_selector(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let reg = state.registry.lock().expect("registry lock");
    Ok(Json(to_value(reg.get(&id)?)?))
}

/// Registers an uploaded model file (the raw bytes as the body).
async fn post_selector(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let rid = request_id(&headers, None);
    let st = state.clone();
    let action = async move {
        let model = read_model(body.as_ref())
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid model file: {e}")))?;
        let record = st
            .registry
            .lock()
            .expect("registry lock")
            .put(&model, MetricsSummary::default(), "upload")?;
        Ok((StatusCode::CREATED, to_value(&record)?))
    };
    idempotent(&state, &Method::POST, "/selectors", rid, action).await
}

async fn delete_selector(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let rid = request_id(&headers, None);
    let path = format!("/selectors/{id}");
    let st = state.clone();
    let action = async move {
        let record = st.registry.lock().expect("registry lock").delete(&id)?;
        Ok((StatusCode::OK, to_value(&record)?))
    };
    idempotent(&state, &Method::DELETE, &path, rid, action).await
}

/// A stored series, or one given inline.
#[derive(Deserialize)]
#[serde(untagged)]
enum SeriesRef {
    Stored {
        corpus_id: String,
        series_id: String,
    },
    Inline {
        id: String,
        values: Vec<f64>,
        #[serde(default)]
        labels: Option<Vec<u8>>,
    },
}

fn resolve_series(dir: &DataDir, series: SeriesRef) -> Result<LabeledSeries, ApiError> {
    match series {
        SeriesRef::Stored { corpus_id, series_id } => load_stored_corpus(dir, &corpus_id)?
            .into_iter()
            .find(|s| s.id == series_id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("series `{series_id}` not in `{corpus_id}`"))),
        SeriesRef::Inline { id, values, labels } => {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "series values must be finite"));
            }
            let labels = labels.unwrap_or_else(|| vec![0; values.len()]);
            if labels.len() != values.len() || labels.iter().any(|&l| l > 1) {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "labels must be 0/1 and match the values in length",
                ));
            }
            Ok(LabeledSeries::new(id, values, labels))
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectRequest {
    selector_id: String,
    series: SeriesRef,
}

async fn post_select(
    State(state): State<AppState>,
    body: Result<Json<SelectRequest>, JsonRejection>,
) -> Result<Json<SelectionResult>, ApiError> {
    let Json(req) = body?;
    let model = state.registry.lock().expect("registry lock").load(&req.selector_id)?;
    let dir = state.dir.clone();
    let result = blocking(move || {
        let series = resolve_series(&dir, req.series)?;
        select(&model, &series, model_stride(&model)).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
    })
    .await?;
    Ok(Json(result))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectRequest {
    corpus_id: String,
    series_id: String,
    #[serde(default)]
    detector: Option<String>,
    #[serde(default)]
    selector_id: Option<String>,
    #[serde(default)]
    compare: bool,
}

#[derive(Serialize)]
struct DetectResponse {
    series: SeriesInfo,
    selection: Option<SelectionResult>,
    detection: DetectionResult,
}

async fn post_detect(
    State(state): State<AppState>,
    body: Result<Json<DetectRequest>, JsonRejection>,
) -> Result<Json<DetectResponse>, ApiError> {
    let Json(req) = body?;
    let model = match (&req.detector, &req.selector_id) {
        (Some(_), None) => None,
        (None, Some(id)) => Some(state.registry.lock().expect("registry lock").load(id)?),
        _ => return Err(ApiError::bad_request("give exactly one of `detector` and `selector_id`")),
    };
    let requested = match &req.detector {
        Some(name) => Some(
            name.parse::<DetectorId>()
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?,
        ),
        None => None,
    };
    let dir = state.dir.clone();
    let response = blocking(move || {
        let series = resolve_series(
            &dir,
            SeriesRef::Stored {
                corpus_id: req.corpus_id,
                series_id: req.series_id,
            },
        )?;
        let (selection, params) = match &model {
            Some(m) => {
                let sel = select(m, &series, model_stride(m))
                    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
                (Some(sel), model_detector_params(m))
            }
            None => (None, kdselect_core::detectors::ZooParams::default().resolved(TrainConfig::default().window)),
        };
        let detector = requested.or(selection.as_ref().map(|s| s.selected)).expect("one source");
        let votes = selection.as_ref().map(|s| s.votes.as_slice());
        let detection = detect_and_score(&series, detector, votes, &params, req.compare);
        Ok(DetectResponse {
            series: series_info(&series),
            selection,
            detection,
        })
    })
    .await?;
    Ok(Json(response))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportRequest {
    selector_id: String,
    corpus_id: String,
    #[serde(default)]
    request_id: Option<String>,
}

/// Evaluates a selector on a stored corpus and keeps the report.
async fn post_report(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<ReportRequest>, JsonRejection>,
) -> Response {
    let req = match body {
        Ok(Json(req)) => req,
        Err(e) => return ApiError::from(e).into_response(),
    };
    let rid = request_id(&headers, req.request_id.as_deref());
    let st = state.clone();
    let action = async move {
        let model = st.registry.lock().expect("registry lock").load(&req.selector_id)?;
        let dir = st.dir.clone();
        let stored = blocking(move || {
            let corpus = load_stored_corpus(&dir, &req.corpus_id)?;
            evaluate_to_report(&dir, &model, &req.selector_id, &req.corpus_id, &corpus, new_report_id())
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("{e:#}")))
        })
        .await?;
        Ok((StatusCode::CREATED, to_value(&stored)?))
    };
    idempotent(&state, &Method::POST, "/reports", rid, action).await
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

/// JSON by default; `?format=csv` gives the per-series table.
async fn get_report(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Result<Response, ApiError> {
    let stored = load_report(&state.dir, &id)?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(stored).into_response()),
        Some("csv") => {
            let mut buf = Vec::new();
            write_report_csv(&mut buf, &stored.report).map_err(ApiError::internal)?;
            Ok(([(header::CONTENT_TYPE, "text/csv")], buf).into_response())
        }
        Some(other) => Err(ApiError::bad_request(format!("unknown format `{other}`"))),
    }
}

/// Binds `addr` and serves until ctrl-c, then flushes the registry.
pub async fn serve(addr: &str, data_dir: std::path::PathBuf, seed_override: Option<u64>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    let state = AppState::open(data_dir, seed_override)?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    state.flush()
}

