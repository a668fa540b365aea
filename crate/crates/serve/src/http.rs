//! HTTP/1.1 JSON front end.
//!
//! | method | path            | body                     |
//! |--------|-----------------|--------------------------|
//! | POST   | `/v1/recommend` | `RecommendRequest`       |
//! | GET    | `/v1/stats`     |                          |
//! | GET    | `/health`       | 200 once a state is loaded |
//! | POST   | `/v1/reload`    | `{"dir": "<path>"}`      |
//!
//! Errors are `{"code", "message"}` with a matching status.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::error::ServeError;
use crate::service::{RecommendRequest, Service};

#[derive(Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = match self {
            ServeError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServeError::NotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            ServeError::Artifact(_) | ServeError::Inconsistent(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServeError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { code: self.code(), message: self.to_string() })).into_response()
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ServeError> {
    serde_json::from_slice(body).map_err(|e| ServeError::BadRequest(e.to_string()))
}

async fn recommend(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    let req: RecommendRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => {
            svc.record_error();
            return e.into_response();
        }
    };
    match svc.handle_recommend(&req) {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn stats(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.stats()).into_response()
}

async fn health(State(svc): State<Arc<Service>>) -> Response {
    match svc.state() {
        Some(s) => Json(serde_json::json!({ "status": "ok", "version": s.version })).into_response(),
        None => ServeError::NotLoaded.into_response(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReloadRequest {
    dir: PathBuf,
}

async fn reload(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    let req: ReloadRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let worker = svc.clone();
    match tokio::task::spawn_blocking(move || worker.reload(&req.dir)).await {
        Ok(Ok(version)) => Json(serde_json::json!({ "version": version })).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServeError::Internal(e.to_string()).into_response(),
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/recommend", post(recommend))
        .route("/v1/stats", get(stats))
        .route("/health", get(health))
        .route("/v1/reload", post(reload))
        .with_state(svc)
}

/// Binds `addr` and serves until `shutdown` resolves. Returns the bound
/// address through `on_bound` (useful with port 0).
pub async fn serve(
    svc: Arc<Service>,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::info!(%local, "listening");
    on_bound(local);
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}
