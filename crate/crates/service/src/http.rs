//! JSON-over-HTTP front end.
//!
//! Handlers share an immutable [`Assessor`] and never write request content
//! anywhere: not to disk, not to logs.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use heae_core::SeverityLabel;
use serde_json::json;
use tokio::net::TcpListener;

use crate::assess::{parse_assess_request, parse_whatif_request, AssessError, Assessor};

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8741;

#[derive(Clone)]
struct AppState {
    assessor: Arc<Assessor>,
}

impl IntoResponse for AssessError {
    fn into_response(self) -> Response {
        match self {
            AssessError::Validation(details) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({ "error": "validation_error", "details": details })),
            )
                .into_response(),
            other => internal(&other),
        }
    }
}

fn internal(err: &dyn std::fmt::Display) -> Response {
    let id = uuid::Uuid::new_v4();
    tracing::error!(%id, error = %err, "request failed");
    (
        StatusCode::INTERNAL_SERVER_ERROR,
        Json(json!({ "error": "internal_error", "id": id.to_string() })),
    )
        .into_response()
}

/// Pre-serialized JSON so identical results give identical bytes.
fn json_bytes<T: serde::Serialize>(value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(body) => ([(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => internal(&e),
    }
}

async fn health(State(s): State<AppState>) -> Response {
    json_bytes(&json!({ "status": "ok", "model_id": s.assessor.model_id() }))
}

async fn labels() -> Response {
    let names: Vec<&str> = SeverityLabel::ALL.iter().map(|l| l.name()).collect();
    json_bytes(&names)
}

async fn run_blocking<T, F>(f: F) -> Result<T, Response>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, AssessError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(IntoResponse::into_response),
        Err(e) => Err(internal(&e)),
    }
}

async fn assess(State(s): State<AppState>, body: Bytes) -> Response {
    let req = match parse_assess_request(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match run_blocking(move || s.assessor.assess(&req)).await {
        Ok(r) => json_bytes(&r),
        Err(resp) => resp,
    }
}

async fn whatif(State(s): State<AppState>, body: Bytes) -> Response {
    let req = match parse_whatif_request(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match run_blocking(move || s.assessor.whatif(&req)).await {
        Ok(points) => json_bytes(&points),
        Err(resp) => resp,
    }
}

pub fn router(assessor: Arc<Assessor>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/labels", get(labels))
        .route("/api/assess", post(assess))
        .route("/api/whatif", post(whatif))
        .with_state(AppState { assessor })
}

/// Binds `addr` and returns the listener plus its bound address (useful with
/// port 0).
pub async fn bind(addr: SocketAddr) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    assessor: Arc<Assessor>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(assessor))
        .with_graceful_shutdown(shutdown)
        .await
}
