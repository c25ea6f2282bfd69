//! JSON-over-HTTP facade for the browser companion: start runs, poll them,
//! fetch reports and segment templates.
//!
//! Runs are content addressed (the run id hashes template, dataset, config
//! and model), execute in the background with at most
//! `max_concurrent_runs` pipelines at a time, and are persisted to the runs
//! directory so a restarted service still knows finished runs.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

use crate::domain::{parse_template, DatasetRecord, EvalTask, PromptTemplate, Segment, Strategy};
use crate::evaluation::MetricId;
use crate::pipeline::{CompressionConfig, Engine, FailedRun, RunReport, RunStatus, StoredRun, TradeoffCurve};
use crate::segmentation::{segment, SegmentationConfig, SegmentationError};

pub const DEFAULT_MAX_CONCURRENT_RUNS: usize = 2;
const PENDING_SUFFIX: &str = ".pending.json";

/// Where a run's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetRef {
    /// A JSONL file readable by the service.
    Path(PathBuf),
    Inline(Vec<DatasetRecord>),
}

fn default_metric() -> MetricId {
    MetricId::TokenF1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub template: String,
    pub dataset: DatasetRef,
    #[serde(default = "default_metric")]
    pub metric: MetricId,
    #[serde(default)]
    pub config: CompressionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RunHandle {
    pub run_id: String,
    pub status: RunStatus,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub template: String,
    #[serde(default)]
    pub config: SegmentationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct SegmentView {
    #[serde(flatten)]
    pub segment: Segment,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct SegmentResponse {
    pub strategy: Strategy,
    /// The template the segments partition (marker lines removed).
    pub source: String,
    pub segments: Vec<SegmentView>,
    pub total_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ErrorBody {
    pub error: String,
}

struct Entry {
    handle: RunHandle,
    stored: Option<StoredRun>,
}

/// Shared service state.
pub struct AppState {
    engine: Engine,
    runs: Mutex<HashMap<String, Entry>>,
    slots: Arc<Semaphore>,
}

impl AppState {
    /// Loads finished runs from the engine's runs directory; runs that were
    /// still in flight when the service stopped are recorded as failed.
    pub fn new(engine: Engine, max_concurrent_runs: usize) -> std::io::Result<Arc<Self>> {
        let mut runs = HashMap::new();
        if let Some(dir) = engine.runs_dir() {
            std::fs::create_dir_all(dir)?;
            recover(dir, &mut runs)?;
        }
        Ok(Arc::new(AppState {
            engine,
            runs: Mutex::new(runs),
            slots: Arc::new(Semaphore::new(max_concurrent_runs.max(1))),
        }))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn update(&self, run_id: &str, status: RunStatus) {
        let mut runs = self.runs.lock().unwrap();
        if let Some(entry) = runs.get_mut(run_id) {
            // forward only
            if status > entry.handle.status {
                entry.handle.status = status;
                entry.handle.progress = entry.handle.progress.max(status.progress());
            }
        }
    }
}

fn handle_of(stored: &StoredRun) -> RunHandle {
    match stored {
        StoredRun::Done(r) => RunHandle {
            run_id: r.run_id.clone(),
            status: RunStatus::Done,
            progress: 1.0,
            error: None,
        },
        StoredRun::Failed(f) => RunHandle {
            run_id: f.run_id.clone(),
            status: RunStatus::Failed,
            progress: 1.0,
            error: Some(f.error.clone()),
        },
    }
}

fn recover(dir: &Path, runs: &mut HashMap<String, Entry>) -> std::io::Result<()> {
    let mut pending = Vec::new();
    for item in std::fs::read_dir(dir)? {
        let path = item?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.ends_with(PENDING_SUFFIX) {
            pending.push(path);
        } else if name.ends_with(".json") && !name.starts_with('.') {
            match StoredRun::load(&path) {
                Ok(stored) => {
                    runs.insert(
                        stored.run_id().to_string(),
                        Entry {
                            handle: handle_of(&stored),
                            stored: Some(stored),
                        },
                    );
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable run record"),
            }
        }
    }
    for path in pending {
        let text = std::fs::read_to_string(&path)?;
        std::fs::remove_file(&path)?;
        let Ok(failed) = serde_json::from_str::<FailedRun>(&text) else {
            continue;
        };
        if runs.contains_key(&failed.run_id) {
            continue;
        }
        let failed = FailedRun {
            error: "interrupted by a service restart".into(),
            ..failed
        };
        let stored = StoredRun::Failed(Box::new(failed));
        let final_path = dir.join(format!("{}.json", stored.run_id()));
        std::fs::write(final_path, serde_json::to_string_pretty(&stored).expect("serializable"))?;
        runs.insert(
            stored.run_id().to_string(),
            Entry {
                handle: handle_of(&stored),
                stored: Some(stored),
            },
        );
    }
    Ok(())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn load_task(dataset: &DatasetRef, metric: MetricId) -> Result<EvalTask, String> {
    match dataset {
        DatasetRef::Path(path) => EvalTask::from_jsonl_file(path, metric).map_err(|e| e.to_string()),
        DatasetRef::Inline(records) => EvalTask::from_records(records.clone(), metric).map_err(|e| e.to_string()),
    }
}

async fn submit_run(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request: RunRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid run request: {e}")),
    };
    if let Err(e) = request.config.validate() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    let template = match parse_template(&request.template) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let task = match load_task(&request.dataset, request.metric) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    if let Err(e) = task.check_against(&template) {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    let run_id = state.engine.run_id(&template, &task, &request.config);
    {
        let mut runs = state.runs.lock().unwrap();
        if let Some(entry) = runs.get(&run_id) {
            return (StatusCode::CONFLICT, Json(entry.handle.clone())).into_response();
        }
        runs.insert(
            run_id.clone(),
            Entry {
                handle: RunHandle {
                    run_id: run_id.clone(),
                    status: RunStatus::Queued,
                    progress: 0.0,
                    error: None,
                },
                stored: None,
            },
        );
    }
    if let Some(dir) = state.engine.runs_dir() {
        let marker = FailedRun {
            run_id: run_id.clone(),
            stage: RunStatus::Queued,
            error: String::new(),
            config: request.config.clone(),
            ledger: Default::default(),
            started_at_ms: state.engine.gateway().clock().now_ms(),
            finished_at_ms: 0,
        };
        let path = dir.join(format!("{run_id}{PENDING_SUFFIX}"));
        if let Err(e) = std::fs::write(path, serde_json::to_string(&marker).expect("serializable")) {
            tracing::warn!(error = %e, "could not write pending marker");
        }
    }
    tokio::spawn(execute(state.clone(), run_id.clone(), template, task, request.config));
    let handle = state.runs.lock().unwrap()[&run_id].handle.clone();
    (StatusCode::ACCEPTED, Json(handle)).into_response()
}

async fn execute(state: Arc<AppState>, run_id: String, template: PromptTemplate, task: EvalTask, config: CompressionConfig) {
    // FIFO: tokio's semaphore serves waiters in arrival order
    let permit = state.slots.clone().acquire_owned().await.expect("semaphore is never closed");
    let worker = state.clone();
    let id = run_id.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        worker
            .engine
            .run_with_progress(&template, &task, &config, &|status| worker.update(&id, status))
    })
    .await;
    drop(permit);
    let stored = match outcome {
        Ok(Ok(report)) => StoredRun::Done(Box::new(report)),
        Ok(Err(failure)) => StoredRun::Failed(failure.report),
        Err(join) => StoredRun::Failed(Box::new(FailedRun {
            run_id: run_id.clone(),
            stage: RunStatus::Failed,
            error: format!("pipeline task panicked: {join}"),
            config: CompressionConfig::default(),
            ledger: Default::default(),
            started_at_ms: 0,
            finished_at_ms: 0,
        })),
    };
    if let Some(dir) = state.engine.runs_dir() {
        let _ = std::fs::remove_file(dir.join(format!("{run_id}{PENDING_SUFFIX}")));
    }
    let mut runs = state.runs.lock().unwrap();
    if let Some(entry) = runs.get_mut(&run_id) {
        entry.handle = handle_of(&stored);
        entry.stored = Some(stored);
    }
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<RunHandle>> {
    let mut handles: Vec<RunHandle> = state.runs.lock().unwrap().values().map(|e| e.handle.clone()).collect();
    handles.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Json(handles)
}

async fn get_run(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.runs.lock().unwrap().get(&id) {
        Some(entry) => Json(entry.handle.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown run {id}")),
    }
}

async fn get_report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.runs.lock().unwrap().get(&id) {
        None => error(StatusCode::NOT_FOUND, format!("unknown run {id}")),
        Some(Entry {
            stored: Some(StoredRun::Done(report)),
            ..
        }) => Json(report.as_ref().clone()).into_response(),
        Some(entry) => (StatusCode::CONFLICT, Json(entry.handle.clone())).into_response(),
    }
}

async fn segment_template(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request: SegmentRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid segment request: {e}")),
    };
    let template = match parse_template(&request.template) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let engine = state.engine.clone();
    let result = tokio::task::spawn_blocking(move || {
        segment(&template, &request.config, Some(engine.gateway())).map(|seg| SegmentResponse {
            strategy: seg.strategy(),
            source: seg.source().raw_text().to_string(),
            total_tokens: engine.count_tokens(seg.source().raw_text()),
            segments: seg
                .segments()
                .iter()
                .map(|s| SegmentView {
                    tokens: engine.count_tokens(&s.text),
                    segment: s.clone(),
                })
                .collect(),
        })
    })
    .await;
    match result {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(SegmentationError::Gateway(e))) => error(StatusCode::BAD_GATEWAY, e.to_string()),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// JSON schemas of every request and response body.
pub fn schemas() -> serde_json::Value {
    serde_json::json!({
        "RunRequest": schemars::schema_for!(RunRequest),
        "RunHandle": schemars::schema_for!(RunHandle),
        "RunReport": schemars::schema_for!(RunReport),
        "StoredRun": schemars::schema_for!(StoredRun),
        "SegmentRequest": schemars::schema_for!(SegmentRequest),
        "SegmentResponse": schemars::schema_for!(SegmentResponse),
        "CompressionConfig": schemars::schema_for!(CompressionConfig),
        "TradeoffCurve": schemars::schema_for!(TradeoffCurve),
        "ErrorBody": schemars::schema_for!(ErrorBody),
    })
}

async fn schema() -> Json<serde_json::Value> {
    Json(schemas())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/runs", post(submit_run).get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/report", get(get_report))
        .route("/api/segment", post(segment_template))
        .route("/api/schema", get(schema))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(listener, state).await
}
