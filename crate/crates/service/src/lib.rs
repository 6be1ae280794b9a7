//! HTTP facade over the [`Engine`]: patient onboarding, question answering,
//! knowledge ingestion, evaluation jobs and health.
//!
//! Pipelines run on the blocking pool behind a semaphore sized by
//! `service.max_concurrent_pipelines`; extra requests wait for a permit
//! rather than running. Error bodies are `{stage, message, trace_id}`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use carecontext_core::config::Config;
use carecontext_core::corpus::{DocumentFormat, Metadata, PATIENT_ID_KEY};
use carecontext_core::engine::{Engine, IngestInput, PipelineError, Providers};
use carecontext_core::error::{ErrorClass, Stage};
use carecontext_core::evaluation::sheets::{load_dataset, DatasetRow};
use carecontext_core::provider::ProviderMode;
use carecontext_core::retrieval::Evidence;

/// Response header carrying pipeline wall-clock time. Kept out of the body
/// so that identical requests produce identical bodies.
pub const LATENCY_HEADER: &str = "x-pipeline-latency-ms";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid bind address {0:?}")]
    Bind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Error body shared by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub stage: Stage,
    pub message: String,
    pub trace_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, stage: Stage, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { stage, message: message.into(), trace_id: None, raw_reply: None } }
    }

    fn pipeline(e: PipelineError, validation: StatusCode) -> Self {
        let status = match e.class {
            ErrorClass::Validation => validation,
            ErrorClass::NotFound => StatusCode::NOT_FOUND,
            ErrorClass::Provider => StatusCode::BAD_GATEWAY,
            ErrorClass::Config | ErrorClass::Io => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            body: ErrorBody { stage: e.stage, message: e.message, trace_id: e.trace_id, raw_reply: e.raw_reply },
        }
    }

    fn body(rejection: BytesRejection, stage: Stage) -> Self {
        ApiError::new(rejection.status(), stage, rejection.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done { report_id: String },
    Failed { error: ErrorBody },
}

pub struct AppState {
    engine: Arc<Engine>,
    pipelines: Arc<Semaphore>,
    timeout: Duration,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        let svc = &engine.config().service;
        AppState {
            pipelines: Arc::new(Semaphore::new(svc.max_concurrent_pipelines)),
            timeout: Duration::from_millis(svc.request_timeout_ms),
            engine: Arc::new(engine),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Runs `f` on the blocking pool once a pipeline permit is available.
    async fn pipeline<T, F>(&self, stage: Stage, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Engine) -> T + Send + 'static,
    {
        let run = async {
            let permit = self.pipelines.clone().acquire_owned().await.expect("semaphore is never closed");
            let engine = self.engine.clone();
            tokio::task::spawn_blocking(move || {
                let _permit = permit;
                f(&engine)
            })
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, stage, format!("pipeline task failed: {e}")))
        };
        tokio::time::timeout(self.timeout, run)
            .await
            .unwrap_or_else(|_| Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, stage, "request timed out")))
    }
}

/// Engine for the service: when the configured providers cannot be built
/// (typically a missing API key in live mode) the service still starts,
/// reports `degraded` on `/health`, and fails provider-backed calls.
pub fn engine_for_service(config: Config) -> Result<Engine, PipelineError> {
    let providers = match Providers::from_config(&config, |k| std::env::var(k).ok()) {
        Ok(p) => p,
        Err(e) if config.mode == ProviderMode::Live && e.class == ErrorClass::Config => {
            log::warn!("providers unavailable, starting degraded: {e}");
            Providers::unconfigured(&config, e.message)
        }
        Err(e) => return Err(e),
    };
    Engine::with_providers(config, providers)
}

pub fn router(state: Arc<AppState>) -> Router {
    let config = state.engine.config();
    let limit = config.service.max_body_bytes;
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/patients", get(list_patients).post(add_patient))
        .route("/patients/{id}", get(patient_context))
        .route("/patients/{id}/ask", post(ask))
        .route("/knowledge/ingest", post(ingest))
        .route("/eval/run", post(eval_run))
        .route("/eval/jobs/{id}", get(eval_job))
        .route("/reports/{id}", get(report))
        .layer(DefaultBodyLimit::max(limit));
    if !config.service.cors_allow.is_empty() {
        let origins: Vec<HeaderValue> =
            config.service.cors_allow.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE])
                .expose_headers([HeaderName::from_static(LATENCY_HEADER)]),
        );
    }
    app.with_state(state)
}

/// Binds `service.bind` and serves until Ctrl-C.
pub async fn serve(engine: Engine) -> Result<(), ServiceError> {
    let bind = engine.config().service.bind.clone();
    let addr: SocketAddr = bind.parse().map_err(|_| ServiceError::Bind(bind.clone()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let app = router(Arc::new(AppState::new(engine)));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let engine = state.engine.clone();
    match tokio::task::spawn_blocking(move || engine.health()).await {
        Ok(h) => Json(h).into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, Stage::Config, e.to_string()).into_response(),
    }
}

async fn list_patients(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "patients": state.engine.patients() }))
}

#[derive(Debug, Deserialize)]
struct PatientJson {
    transcript: String,
    #[serde(default)]
    patient_id: Option<String>,
    #[serde(default)]
    metadata: Metadata,
}

#[derive(Debug, Default, Deserialize)]
struct PatientQuery {
    patient_id: Option<String>,
}

/// `POST /patients`: a plain-text transcript (patient id in `?patient_id=`)
/// or JSON `{transcript, patient_id?, metadata?}`.
async fn add_patient(
    State(state): State<Arc<AppState>>,
    Query(query): Query<PatientQuery>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let body = body.map_err(|r| ApiError::body(r, Stage::Ingestion))?;
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let (bytes, mut metadata) = if is_json {
        let p: PatientJson = serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, Stage::Ingestion, format!("malformed body: {e}")))?;
        let mut m = p.metadata;
        if let Some(id) = p.patient_id {
            m.insert(PATIENT_ID_KEY.into(), id);
        }
        (p.transcript.into_bytes(), m)
    } else {
        (body.to_vec(), Metadata::new())
    };
    if let Some(id) = query.patient_id {
        metadata.insert(PATIENT_ID_KEY.into(), id);
    }
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, Stage::Ingestion, "transcript is empty"));
    }
    let outcome = state
        .pipeline(Stage::Annotation, move |e| e.add_patient(&bytes, DocumentFormat::PlainText, metadata))
        .await?
        .map_err(|e| ApiError::pipeline(e, StatusCode::BAD_REQUEST))?;
    let body = serde_json::json!({
        "patient_id": outcome.patient_id,
        "annotation_status": "annotated",
        "document_id": outcome.document_id,
        "chunks": outcome.chunks,
        "sections": outcome.context.sections,
        "trace_id": outcome.trace_id,
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn patient_context(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let engine = state.engine.clone();
    let context = tokio::task::spawn_blocking(move || engine.patient_context(&id))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, Stage::Storage, e.to_string()))?
        .map_err(|e| ApiError::pipeline(e, StatusCode::BAD_REQUEST))?;
    Ok(Json(serde_json::json!({
        "patient_id": context.patient_id,
        "sections": context.sections,
        "annotation_model": context.annotation_model,
        "created_at": context.created_at,
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
struct AskBody {
    question: String,
    #[serde(default)]
    model: Option<String>,
}

/// Body of a successful `/ask`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    pub citations: Vec<String>,
    pub citations_inferred: bool,
    pub patient_id: String,
    pub query: String,
    pub model_name: String,
    pub trace_id: String,
    pub disclaimer: String,
    pub patient_evidence: Vec<Evidence>,
    pub medical_evidence: Vec<Evidence>,
    pub knowledge_probe: String,
}

async fn ask(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let body = body.map_err(|r| ApiError::body(r, Stage::PatientRetrieval))?;
    let req: AskBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, Stage::PatientRetrieval, format!("malformed body: {e}")))?;
    if req.question.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, Stage::PatientRetrieval, "question is empty"));
    }
    let outcome = state
        .pipeline(Stage::Generation, move |e| match &req.model {
            Some(m) => e.ask_with_model(&id, &req.question, m),
            None => e.ask(&id, &req.question),
        })
        .await?
        .map_err(|e| ApiError::pipeline(e, StatusCode::UNPROCESSABLE_ENTITY))?;
    let latency = outcome.response.latency.as_millis().to_string();
    let r = outcome.response;
    let body = AskResponse {
        answer: r.answer,
        citations: r.citations,
        citations_inferred: r.citations_inferred,
        patient_id: r.patient_id,
        query: r.query,
        model_name: r.model_name,
        trace_id: r.trace_id,
        disclaimer: outcome.disclaimer,
        patient_evidence: outcome.context.patient_evidence,
        medical_evidence: outcome.context.medical_evidence,
        knowledge_probe: outcome.probe,
    };
    let mut resp = Json(body).into_response();
    if let Ok(v) = HeaderValue::from_str(&latency) {
        resp.headers_mut().insert(HeaderName::from_static(LATENCY_HEADER), v);
    }
    Ok(resp)
}

#[derive(Debug, Deserialize)]
struct IngestDocument {
    name: String,
    text: String,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    metadata: Metadata,
}

#[derive(Debug, Deserialize)]
struct IngestBody {
    documents: Vec<IngestDocument>,
}

/// `POST /knowledge/ingest`: 200 when every document succeeds, 207 with
/// per-document status otherwise.
async fn ingest(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> Result<Response, ApiError> {
    let body = body.map_err(|r| ApiError::body(r, Stage::Ingestion))?;
    let req: IngestBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, Stage::Ingestion, format!("malformed body: {e}")))?;
    if req.documents.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, Stage::Ingestion, "no documents given"));
    }
    let mut inputs = Vec::new();
    for d in req.documents {
        let format = match d.format.as_deref() {
            None | Some("text") | Some("txt") => DocumentFormat::PlainText,
            Some("markdown") | Some("md") => DocumentFormat::Markdown,
            Some(other) => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    Stage::Ingestion,
                    format!("unknown format {other:?} for {}", d.name),
                ))
            }
        };
        inputs.push(IngestInput { name: d.name, bytes: d.text.into_bytes(), format, metadata: d.metadata });
    }
    let report = state
        .pipeline(Stage::Ingestion, move |e| e.ingest_documents(inputs))
        .await?
        .map_err(|e| ApiError::pipeline(e, StatusCode::BAD_REQUEST))?;
    let status = if report.failed == 0 { StatusCode::OK } else { StatusCode::MULTI_STATUS };
    Ok((status, Json(report)).into_response())
}

#[derive(Debug, Deserialize)]
struct EvalBody {
    /// Path of a dataset sheet, relative to the data directory.
    #[serde(default)]
    dataset: Option<String>,
    /// Inline rows, as an alternative to `dataset`.
    #[serde(default)]
    rows: Option<Vec<DatasetRow>>,
    models: Vec<String>,
}

/// `POST /eval/run`: starts an evaluation job and returns `202 {job_id}`.
async fn eval_run(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> Result<Response, ApiError> {
    let body = body.map_err(|r| ApiError::body(r, Stage::Evaluation))?;
    let req: EvalBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, Stage::Evaluation, format!("malformed body: {e}")))?;
    let rows = match (req.rows, req.dataset) {
        (Some(rows), None) => rows,
        (None, Some(path)) => {
            let rel = std::path::Path::new(&path);
            if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, Stage::Evaluation, "dataset must be a path inside the data directory"));
            }
            load_dataset(&state.engine.config().data_dir.join(rel))
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, Stage::Evaluation, e.to_string()))?
        }
        _ => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, Stage::Evaluation, "give exactly one of `dataset` or `rows`"))
        }
    };
    let job_id = format!("job-{}", state.next_job.fetch_add(1, Ordering::SeqCst));
    state.jobs.lock().insert(job_id.clone(), JobStatus::Queued);
    let (job_state, id) = (state.clone(), job_id.clone());
    tokio::spawn(async move {
        let marker = (job_state.clone(), id.clone());
        let result = job_state
            .pipeline(Stage::Evaluation, move |e| {
                marker.0.jobs.lock().insert(marker.1, JobStatus::Running);
                e.run_eval(&rows, &req.models)
            })
            .await;
        let status = match result {
            Ok(Ok(out)) => JobStatus::Done { report_id: out.report_id },
            Ok(Err(e)) => JobStatus::Failed { error: ApiError::pipeline(e, StatusCode::BAD_REQUEST).body },
            Err(e) => JobStatus::Failed { error: e.body },
        };
        job_state.jobs.lock().insert(id, status);
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id }))).into_response())
}

async fn eval_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobStatus>, ApiError> {
    state
        .jobs
        .lock()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, Stage::Evaluation, format!("unknown job {id}")))
}

async fn report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, Stage::Evaluation, format!("unknown report {id}"));
    if !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
        return Err(not_found());
    }
    let dir = state.engine.config().reports_dir();
    let json = std::fs::read(dir.join(format!("{id}.json"))).map_err(|_| not_found())?;
    let table = std::fs::read_to_string(dir.join(format!("{id}.md"))).map_err(|_| not_found())?;
    let report: serde_json::Value = serde_json::from_slice(&json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, Stage::Storage, e.to_string()))?;
    Ok(Json(serde_json::json!({ "report_id": id, "report": report, "table": table })).into_response())
}
