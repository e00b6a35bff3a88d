//! JSON-over-HTTP API over a cogtrace workspace, used by the review UI.
//!
//! Every error, including unknown routes and malformed requests, is a JSON
//! body `{"code": ..., "message": ...}`.

use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cogtrace_core::ingest::{ColumnMapping, IngestError, LogFormat, SegmentationPolicy};
use cogtrace_core::metrics::GoldRating;
use cogtrace_core::model::CognitiveLabel;
use cogtrace_core::store::{
    BackendKind, EngineKind, ExportOptions, JobReport, LabelingConfig, SessionFilter, StoreError, Verdict, Workspace,
    DEFAULT_PAGE_SIZE,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::UnknownDataset(_) => Self::new(StatusCode::NOT_FOUND, "unknown_dataset", message),
            StoreError::UnknownSession(_) => Self::new(StatusCode::NOT_FOUND, "unknown_session", message),
            StoreError::UnknownEvent(..) => Self::new(StatusCode::CONFLICT, "unknown_event", message),
            StoreError::UnlabeledEvents(_) => Self::new(StatusCode::CONFLICT, "unlabeled_events", message),
            StoreError::InvalidDecision(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_decision", message),
            StoreError::Ingest(IngestError::MalformedInput(_)) => {
                Self::new(StatusCode::BAD_REQUEST, "malformed_input", message)
            }
            StoreError::Ingest(IngestError::InvalidPolicy(_)) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_policy", message)
            }
            StoreError::Corrupt { .. } | StoreError::Io(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", message)
            }
        }
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<MultipartRejection> for ApiError {
    fn from(e: MultipartRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub dataset_id: String,
    pub state: JobState,
    pub done: usize,
    pub total: usize,
    pub error: Option<String>,
    pub report: Option<JobReport>,
}

#[derive(Clone)]
pub struct AppState {
    pub workspace: Arc<Workspace>,
    jobs: Arc<Mutex<BTreeMap<String, JobStatus>>>,
    next_job: Arc<AtomicU64>,
    shutdown: Arc<AtomicBool>,
}

impl AppState {
    pub fn new(workspace: Arc<Workspace>) -> Self {
        Self {
            workspace,
            jobs: Arc::default(),
            next_job: Arc::new(AtomicU64::new(1)),
            shutdown: Arc::new(AtomicBool::new(false)),
        }
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        let mut jobs = self.jobs.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(job) = jobs.get_mut(id) {
            f(job);
        }
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }
}

/// Runs blocking workspace work off the async executor.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Workspace) -> Result<T, StoreError> + Send + 'static,
) -> ApiResult<T> {
    let ws = state.workspace.clone();
    tokio::task::spawn_blocking(move || f(&ws))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/datasets", post(create_dataset).get(list_datasets))
        .route("/api/datasets/{id}/sessions", get(list_sessions))
        .route("/api/datasets/{id}/label", post(start_label_job))
        .route("/api/datasets/{id}/flag", post(flag_dataset))
        .route("/api/datasets/{id}/gold", post(upload_gold))
        .route("/api/datasets/{id}/export", get(export_dataset))
        .route("/api/datasets/{id}/stats", get(dataset_stats))
        .route("/api/sessions/{id}", get(session_timeline))
        .route("/api/sessions/{id}/events/{n}/decision", post(record_decision))
        .route("/api/jobs/{id}", get(job_status))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Serves the API on `0.0.0.0:port` until the process exits.
pub async fn serve(workspace: Arc<Workspace>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(AppState::new(workspace))).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed for this endpoint")
}

/// Multipart fields: `file` (required), `mapping` (JSON, required),
/// `policy` (JSON, optional), `format` (`csv`|`json`, optional; guessed
/// from the file name) and `name` (optional).
async fn create_dataset(
    State(state): State<AppState>,
    multipart: Result<Multipart, MultipartRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut multipart = multipart?;
    let mut file: Option<(Option<String>, Bytes)> = None;
    let mut fields: HashMap<String, String> = HashMap::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        if name == "file" {
            let file_name = field.file_name().map(str::to_string);
            let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
            file = Some((file_name, bytes));
        } else {
            let text = field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
            fields.insert(name, text);
        }
    }
    let (file_name, bytes) = file.ok_or_else(|| ApiError::bad_request("missing multipart field \"file\""))?;
    let mapping = ColumnMapping::from_json(
        fields.get("mapping").ok_or_else(|| ApiError::bad_request("missing multipart field \"mapping\""))?,
    )
    .map_err(|e| ApiError::from(StoreError::from(e)))?;
    let policy: SegmentationPolicy = match fields.get("policy") {
        Some(raw) => parse_json(raw.as_bytes())?,
        None => SegmentationPolicy::default(),
    };
    let format: LogFormat = match fields.get("format") {
        Some(f) => f.parse().map_err(|e: IngestError| ApiError::bad_request(e.to_string()))?,
        None if file_name.as_deref().is_some_and(|n| n.ends_with(".json")) => LogFormat::Json,
        None => LogFormat::Csv,
    };
    let name = fields.get("name").cloned().or(file_name).unwrap_or_else(|| "upload".into());
    let outcome = blocking(&state, move |ws| ws.create_dataset(&name, &bytes, format, &mapping, &policy)).await?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(outcome).unwrap_or_default())))
}

async fn list_datasets(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let rows = blocking(&state, |ws| {
        ws.datasets()
            .into_iter()
            .map(|entry| {
                let stats = ws.stats(&entry.id)?;
                Ok(json!({
                    "dataset_id": entry.id,
                    "name": entry.name,
                    "created_at": entry.created_at,
                    "sessions": stats.sessions,
                    "events": stats.events,
                    "labeled": stats.labeled,
                    "decisions": stats.decisions,
                    "flagged": stats.flagged,
                    "rejected_rows": entry.rejected_rows,
                }))
            })
            .collect::<Result<Vec<_>, StoreError>>()
    })
    .await?;
    Ok(Json(json!({ "datasets": rows })))
}

async fn list_sessions(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Path(id) = path?;
    let Query(q) = query?;
    let filter: SessionFilter = q.get("filter").map(|f| f.parse()).transpose().map_err(ApiError::bad_request)?.unwrap_or_default();
    let page = parse_usize(&q, "page")?.unwrap_or(0);
    let page_size = parse_usize(&q, "page_size")?.unwrap_or(DEFAULT_PAGE_SIZE);
    let page = blocking(&state, move |ws| ws.sessions_page(&id, filter, page, page_size)).await?;
    Ok(Json(serde_json::to_value(page).unwrap_or_default()))
}

fn parse_usize(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<usize>> {
    q.get(key)
        .map(|v| v.parse::<usize>().map_err(|_| ApiError::bad_request(format!("{key} must be a non-negative integer"))))
        .transpose()
}

fn parse_flag(q: &HashMap<String, String>, key: &str) -> ApiResult<bool> {
    match q.get(key).map(String::as_str) {
        None | Some("false") | Some("0") => Ok(false),
        Some("true") | Some("1") | Some("") => Ok(true),
        Some(other) => Err(ApiError::bad_request(format!("{key} must be true or false, got {other:?}"))),
    }
}

async fn session_timeline(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Path(id) = path?;
    let Query(q) = query?;
    let dataset = q.get("dataset").cloned();
    let timeline = blocking(&state, move |ws| match dataset {
        Some(ds) => ws.timeline_in(&ds, &id),
        None => ws.timeline(&id),
    })
    .await?;
    Ok(Json(serde_json::to_value(timeline).unwrap_or_default()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    label: String,
    verdict: String,
    #[serde(default)]
    note: Option<String>,
}

async fn record_decision(
    State(state): State<AppState>,
    path: Result<Path<(String, String)>, PathRejection>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Path((session_id, n)) = path?;
    let body: DecisionBody = parse_json(&body)?;
    let label: CognitiveLabel = body
        .label
        .parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "unknown_label", format!("unknown label {:?}", body.label)))?;
    let verdict: Verdict = serde_json::from_value(Value::String(body.verdict.clone()))
        .map_err(|_| ApiError::bad_request(format!("verdict must be accepted or corrected, got {:?}", body.verdict)))?;
    let event_index: usize = n
        .parse()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "unknown_event", format!("unknown event {n:?} in session {session_id}")))?;
    let note = body.note;
    let (dataset_id, decision) =
        blocking(&state, move |ws| ws.record_decision(&session_id, event_index, label, verdict, note)).await?;
    let mut value = serde_json::to_value(decision).unwrap_or_default();
    value["dataset_id"] = Value::String(dataset_id);
    Ok((StatusCode::CREATED, Json(value)))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    #[serde(default)]
    engine: EngineKind,
    #[serde(default)]
    backend: BackendKind,
    #[serde(default)]
    config: Option<Value>,
}

async fn start_label_job(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Path(dataset_id) = path?;
    let body: LabelBody = if body.is_empty() { LabelBody::default() } else { parse_json(&body)? };
    let config = match body.config {
        Some(v) => LabelingConfig::from_json(&v.to_string()).map_err(ApiError::bad_request)?,
        None => LabelingConfig::default(),
    };
    let engine = config.engine(body.engine, body.backend).map_err(ApiError::bad_request)?;
    let total = {
        let id = dataset_id.clone();
        blocking(&state, move |ws| ws.dataset(&id)).await?.sessions
    };
    let job_id = format!("job-{:04}", state.next_job.fetch_add(1, Ordering::SeqCst));
    state.jobs.lock().unwrap_or_else(|p| p.into_inner()).insert(
        job_id.clone(),
        JobStatus {
            job_id: job_id.clone(),
            dataset_id: dataset_id.clone(),
            state: JobState::Queued,
            done: 0,
            total,
            error: None,
            report: None,
        },
    );
    let worker_state = state.clone();
    let jid = job_id.clone();
    tokio::task::spawn_blocking(move || {
        worker_state.update_job(&jid, |j| j.state = JobState::Running);
        let result = worker_state.workspace.run_labeling(&dataset_id, &engine, &worker_state.shutdown, |done, total| {
            worker_state.update_job(&jid, |j| {
                j.done = done;
                j.total = total;
            })
        });
        worker_state.update_job(&jid, |j| match result {
            Ok(report) => {
                j.state = JobState::Done;
                j.done = j.total;
                j.report = Some(report);
            }
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

async fn job_status(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<Json<JobStatus>> {
    let Path(id) = path?;
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_job", format!("unknown job {id}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagBody {
    #[serde(default = "default_rate")]
    rate: f64,
}

fn default_rate() -> f64 {
    0.01
}

async fn flag_dataset(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let Path(id) = path?;
    let body: FlagBody = if body.is_empty() { FlagBody { rate: default_rate() } } else { parse_json(&body)? };
    if !(body.rate > 0.0 && body.rate <= 1.0) {
        return Err(ApiError::bad_request("rate must lie in (0, 1]"));
    }
    let outcome = blocking(&state, move |ws| ws.flag(&id, body.rate)).await?;
    Ok(Json(serde_json::to_value(outcome).unwrap_or_default()))
}

/// Body: a JSON list of `{session_id, event_index, annotator?, label}`.
async fn upload_gold(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Path(id) = path?;
    let ratings: Vec<GoldRating> = parse_json(&body)?;
    let added = blocking(&state, move |ws| ws.add_gold(&id, &ratings)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "added": added }))))
}

async fn export_dataset(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Response> {
    let Path(id) = path?;
    let Query(q) = query?;
    let opts = ExportOptions { extended: parse_flag(&q, "extended")?, force: parse_flag(&q, "force")? };
    let file_name = format!("{id}.csv");
    let bytes = blocking(&state, move |ws| ws.export_csv(&id, opts)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{file_name}\"")),
        ],
        bytes,
    )
        .into_response())
}

async fn dataset_stats(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<Json<Value>> {
    let Path(id) = path?;
    let stats = blocking(&state, move |ws| ws.stats(&id)).await?;
    Ok(Json(serde_json::to_value(stats).unwrap_or_default()))
}
