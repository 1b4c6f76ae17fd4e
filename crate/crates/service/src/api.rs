use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::error::ApiError;
use crate::search::{run_search, SearchRequest, SearchResponse};
use crate::subset::{parse_spec, ExportJobs, JobStatus};
use crate::AppState;

/// (method, path, summary) for every route, served at `GET /api`.
pub const ENDPOINTS: &[(&str, &str, &str)] = &[
    ("GET", "/api", "this listing"),
    ("POST", "/search", "nearest samples to a text, image, embedding or sample query"),
    ("GET", "/sample/{id}", "metadata row and tags of one sample"),
    ("POST", "/subset/export", "start a metadata export for a predicate; returns a job id"),
    ("GET", "/subset/{job}", "the exported Parquet file once done, 202 while pending"),
    ("GET", "/subset/{job}/status", "export job status"),
    ("GET", "/stats", "dataset statistics report"),
];

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any)
        .expose_headers([header::HeaderName::from_static("x-row-count")]);
    let mut app = Router::new()
        .route("/api", get(api_listing))
        .route("/search", post(search))
        .route("/sample/{id}", get(sample))
        .route("/subset/export", post(export))
        .route("/subset/{job}", get(subset_file))
        .route("/subset/{job}/status", get(subset_status))
        .route("/stats", get(stats))
        .with_state(state);
    if let Some(dir) = ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(cors)
}

async fn api_listing() -> Json<serde_json::Value> {
    Json(json!({
        "endpoints": ENDPOINTS
            .iter()
            .map(|(method, path, summary)| json!({"method": method, "path": path, "summary": summary}))
            .collect::<Vec<_>>()
    }))
}

async fn search(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SearchResponse>, ApiError> {
    let req: SearchRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("search request: {e}")))?;
    tokio::task::spawn_blocking(move || run_search(&state, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
}

async fn sample(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::NotFound(format!("no sample {id}")))?;
    let view = state
        .dataset
        .view(id)
        .ok_or_else(|| ApiError::NotFound(format!("no sample {id}")))?;
    Ok(Json(view).into_response())
}

async fn export(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let spec = parse_spec(&body)?;
    let job = ExportJobs::job_id(state.dataset.metadata_digest(), &spec.predicate);
    let (status, start) = state.exports.submit(&job);
    if start {
        tokio::spawn(ExportJobs::run(state.clone(), job.clone(), spec.predicate));
    }
    Ok((StatusCode::ACCEPTED, Json(job_body(&job, &status))).into_response())
}

fn job_body(job: &str, status: &JobStatus) -> serde_json::Value {
    let mut v = serde_json::to_value(status).expect("status serializes");
    v["job"] = json!(job);
    v
}

fn known_job(state: &AppState, job: &str) -> Result<JobStatus, ApiError> {
    state
        .exports
        .status(job)
        .ok_or_else(|| ApiError::NotFound(format!("no export job {job}")))
}

async fn subset_status(State(state): State<Arc<AppState>>, UrlPath(job): UrlPath<String>) -> Result<Response, ApiError> {
    let status = known_job(&state, &job)?;
    Ok(Json(job_body(&job, &status)).into_response())
}

async fn subset_file(State(state): State<Arc<AppState>>, UrlPath(job): UrlPath<String>) -> Result<Response, ApiError> {
    match known_job(&state, &job)? {
        JobStatus::Done { rows } => {
            let bytes = tokio::fs::read(state.exports.output_path(&job))
                .await
                .map_err(|e| ApiError::Internal(format!("export {job}: {e}")))?;
            Ok((
                [
                    (header::CONTENT_TYPE, "application/vnd.apache.parquet".to_string()),
                    (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{job}.parquet\"")),
                    (header::HeaderName::from_static("x-row-count"), rows.to_string()),
                ],
                bytes,
            )
                .into_response())
        }
        JobStatus::Failed { error } => Err(ApiError::Internal(format!("export {job} failed: {error}"))),
        pending => Ok((StatusCode::ACCEPTED, Json(job_body(&job, &pending))).into_response()),
    }
}

async fn stats(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let missing = || ApiError::NotFound("statistics have not been computed".into());
    let path = state.stats_path.as_ref().ok_or_else(missing)?;
    let body = state
        .stats_cache
        .get_or_try_init(|| async {
            match tokio::fs::read(path).await {
                Ok(b) => Ok(Bytes::from(b)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(missing()),
                Err(e) => Err(ApiError::Internal(format!("stats: {e}"))),
            }
        })
        .await?
        .clone();
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}
