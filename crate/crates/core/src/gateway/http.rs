use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::json;

use super::{ApiError, Gateway};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({"error": self.code, "detail": self.detail}))).into_response()
    }
}

async fn submit(State(g): State<Gateway>, body: Bytes) -> Result<Response, ApiError> {
    let resp = g.submit_json(&body, g.now())?;
    Ok((StatusCode::ACCEPTED, Json(resp)).into_response())
}

async fn list(State(g): State<Gateway>) -> Response {
    Json(g.campaigns()).into_response()
}

async fn campaign(State(g): State<Gateway>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(g.campaign(&id)?).into_response())
}

async fn bounces(State(g): State<Gateway>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(g.bounces(&id)?).into_response())
}

async fn metrics(State(g): State<Gateway>) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], g.metrics_text()).into_response()
}

async fn trace(State(g): State<Gateway>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(g.trace(&id)?).into_response())
}

async fn health(State(g): State<Gateway>) -> Response {
    Json(g.health()).into_response()
}

async fn not_found() -> ApiError {
    ApiError { status: 404, code: "NotFound", detail: "no such route".into() }
}

pub fn router(gateway: Gateway) -> Router {
    Router::new()
        .route("/campaigns", get(list).post(submit))
        .route("/campaigns/{id}", get(campaign))
        .route("/campaigns/{id}/bounces", get(bounces))
        .route("/metrics", get(metrics))
        .route("/traces/{campaign_id}", get(trace))
        .route("/health", get(health))
        .fallback(not_found)
        .with_state(gateway)
}
