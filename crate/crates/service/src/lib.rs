//! HTTP front end for the enclip ensemble search engine.

pub mod encoder;
pub mod request;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use enclip_core::evalkit::EvalReport;
use enclip_core::ModelSet;
use serde::Serialize;
use serde_json::json;

pub use encoder::{EncoderError, HttpEncoder};
pub use request::{handle_eval, handle_search, prepare_eval, EvalRequest, SearchRequest, ServiceError};

const IMAGE_EXTENSIONS: &[(&str, &str)] = &[
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("png", "image/png"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
];

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum JobStatus {
    Running { done: usize, total: usize },
    Done { report: Box<EvalReport> },
    Failed { error: String },
}

#[derive(Default)]
struct Jobs {
    next: AtomicU64,
    table: Mutex<HashMap<u64, JobStatus>>,
}

impl Jobs {
    fn set(&self, id: u64, status: JobStatus) {
        self.table.lock().expect("job table poisoned").insert(id, status);
    }

    fn progress(&self, id: u64, finished: usize, total: usize) {
        let mut table = self.table.lock().expect("job table poisoned");
        if let Some(JobStatus::Running { done, .. }) = table.get(&id) {
            let done = (*done).max(finished);
            table.insert(id, JobStatus::Running { done, total });
        }
    }

    fn get(&self, id: u64) -> Option<JobStatus> {
        self.table.lock().expect("job table poisoned").get(&id).cloned()
    }
}

#[derive(Clone)]
pub struct AppState {
    set: Arc<ModelSet>,
    encoder: Option<HttpEncoder>,
    images_dir: Option<PathBuf>,
    jobs: Arc<Jobs>,
}

impl AppState {
    pub fn new(set: ModelSet, encoder: Option<HttpEncoder>, images_dir: Option<PathBuf>) -> Self {
        Self {
            set: Arc::new(set),
            encoder,
            images_dir,
            jobs: Arc::new(Jobs::default()),
        }
    }

    pub fn model_set(&self) -> &ModelSet {
        &self.set
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/search", post(search))
        .route("/eval", post(start_eval))
        .route("/eval/{job_id}", get(eval_status))
        .route("/images/{item_id}", get(image))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        use enclip_core::evalkit::EvalError;
        let status = match &e {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Upstream(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Pipeline(enclip_core::Error::Search(_)) => StatusCode::BAD_REQUEST,
            ServiceError::Pipeline(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Eval(EvalError::Pipeline { .. }) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Eval(_) => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "z": state.set.z(),
        "dim": state.set.dim(),
        "corpus_size": state.set.corpus_size(),
    }))
}

async fn models(State(state): State<AppState>) -> Json<serde_json::Value> {
    let models: Vec<_> = state
        .set
        .models()
        .iter()
        .enumerate()
        .map(|(n, m)| {
            json!({
                "index": n,
                "model_id": m.model_id(),
                "epoch": m.epoch(),
                "dim": m.dim(),
                "count": m.len(),
            })
        })
        .collect();
    Json(json!({ "models": models }))
}

async fn search(State(state): State<AppState>, Json(req): Json<SearchRequest>) -> Result<Response, ApiError> {
    let result = handle_search(state.set.clone(), state.encoder.as_ref(), req).await?;
    Ok(Json(result).into_response())
}

async fn start_eval(State(state): State<AppState>, Json(req): Json<EvalRequest>) -> Result<Response, ApiError> {
    // Load and encode up front so file and configuration errors come back synchronously.
    let (queries, qrels) = prepare_eval(&state.set, &req, state.encoder.as_ref()).await?;
    let config = req.eval_config();
    let id = state.jobs.next.fetch_add(1, Ordering::Relaxed) + 1;
    state.jobs.set(
        id,
        JobStatus::Running {
            done: 0,
            total: queries.len(),
        },
    );
    let jobs = state.jobs.clone();
    let set = state.set.clone();
    tokio::task::spawn_blocking(move || {
        let progress = |finished: usize, total: usize| jobs.progress(id, finished, total);
        let status = match enclip_core::evalkit::run_eval_with_progress(&set, &queries, &qrels, &config, &progress) {
            Ok(report) => JobStatus::Done {
                report: Box::new(report),
            },
            Err(e) => JobStatus::Failed { error: e.to_string() },
        };
        jobs.set(id, status);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id.to_string() }))).into_response())
}

async fn eval_status(State(state): State<AppState>, UrlPath(job_id): UrlPath<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("unknown job {job_id:?}"));
    let id: u64 = job_id.parse().map_err(|_| not_found())?;
    let status = state.jobs.get(id).ok_or_else(not_found)?;
    let mut body = serde_json::to_value(&status).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    body["job_id"] = json!(job_id);
    Ok(Json(body).into_response())
}

/// Whether `item_id` can be used as a file stem without escaping the images directory.
pub fn is_safe_item_id(item_id: &str) -> bool {
    !(item_id.is_empty() || item_id.starts_with('.') || item_id.contains(['/', '\\', '\0']) || item_id.contains(".."))
}

/// Finds `<item_id>.<ext>` inside `dir`, refusing anything that resolves outside it.
pub fn resolve_image(dir: &Path, item_id: &str) -> Option<(PathBuf, &'static str)> {
    if !is_safe_item_id(item_id) {
        return None;
    }
    let root = dir.canonicalize().ok()?;
    IMAGE_EXTENSIONS.iter().find_map(|(ext, mime)| {
        let path = root.join(format!("{item_id}.{ext}")).canonicalize().ok()?;
        (path.starts_with(&root) && path.is_file()).then_some((path, *mime))
    })
}

async fn image(State(state): State<AppState>, UrlPath(item_id): UrlPath<String>) -> Result<Response, ApiError> {
    let dir = state
        .images_dir
        .as_ref()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no images directory configured".into()))?;
    if !is_safe_item_id(&item_id) {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("invalid item id {item_id:?}")));
    }
    let (path, mime) = resolve_image(dir, &item_id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no image for {item_id:?}")))?;
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(path))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response())
}
