//! HTTP surface of the reader study.
//!
//! | Method | Path | Body / result |
//! |---|---|---|
//! | POST | `/sessions` | `SessionRequest` → `SessionInfo` |
//! | GET | `/sessions/{id}/next` | next unanswered item or completion status |
//! | GET | `/sessions/{id}/items/{item}` | one item, with the recorded answer if any |
//! | POST | `/sessions/{id}/responses` | `Submission` → `Ack` |
//! | GET | `/sessions/{id}/export.csv` | responses joined with ground truth |
//! | GET | `/images/{token}` | PNG bytes |

use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dcesynth::error::Error;
use dcesynth::reader::{Ack, ItemPayload, NextItem, ReaderService, SessionInfo, SessionRequest, Submission};

pub type SharedService = Arc<Mutex<ReaderService>>;

/// Maps library errors onto HTTP statuses with a JSON `{"error": ...}` body.
pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::InvalidValue(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
            Error::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn lock(state: &SharedService) -> std::sync::MutexGuard<'_, ReaderService> {
    // A panic while holding the lock leaves the registry usable: every
    // mutation is a single push/insert.
    state.lock().unwrap_or_else(|p| p.into_inner())
}

async fn create_session(
    State(state): State<SharedService>,
    Json(req): Json<SessionRequest>,
) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let info = lock(&state).create_session(&req)?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn next_item(State(state): State<SharedService>, Path(id): Path<String>) -> ApiResult<Json<NextItem>> {
    Ok(Json(lock(&state).next_item(&id)?))
}

async fn get_item(
    State(state): State<SharedService>,
    Path((id, item)): Path<(String, String)>,
) -> ApiResult<Json<ItemPayload>> {
    Ok(Json(lock(&state).item(&id, &item)?))
}

async fn submit(
    State(state): State<SharedService>,
    Path(id): Path<String>,
    Json(sub): Json<Submission>,
) -> ApiResult<Json<Ack>> {
    Ok(Json(lock(&state).submit(&id, &sub)?))
}

async fn export(State(state): State<SharedService>, Path(id): Path<String>) -> ApiResult<Response> {
    let csv = lock(&state).export_csv(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn image(State(state): State<SharedService>, Path(token): Path<String>) -> ApiResult<Response> {
    let path = lock(&state).image_path(&token)?.to_path_buf();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")],
        bytes,
    )
        .into_response())
}

pub fn router(service: SharedService) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/items/{item}", get(get_item))
        .route("/sessions/{id}/responses", post(submit))
        .route("/sessions/{id}/export.csv", get(export))
        .route("/images/{token}", get(image))
        .with_state(service)
}
