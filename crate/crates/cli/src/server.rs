//! HTTP routes over [`Service`]. Every body is JSON; errors are
//! `{"error": {"kind": ..., "message": ...}}`.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::service::{Service, ServiceError, Transcript, TurnPayload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub text: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Pipeline(_) | ServiceError::Join(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({"error": {"kind": self.kind(), "message": self.to_string()}});
        (status, Json(body)).into_response()
    }
}

fn bad_json(message: String) -> Response {
    ServiceError::BadRequest(message).into_response()
}

async fn healthz(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "sessions": svc.session_count()}))
}

async fn create_session(State(svc): State<Arc<Service>>) -> Json<SessionCreated> {
    Json(SessionCreated {
        session_id: svc.create_session(),
    })
}

async fn turn(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Result<Json<TurnRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<TurnPayload>, Response> {
    let Json(req) = body.map_err(|e| bad_json(e.body_text()))?;
    svc.turn(&id, &req.text).await.map(Json).map_err(IntoResponse::into_response)
}

async fn transcript(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Json<Transcript>, ServiceError> {
    svc.transcript(&id).await.map(Json)
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/session", post(create_session))
        .route("/v1/session/:id/turn", post(turn))
        .route("/v1/session/:id/transcript", get(transcript))
        .with_state(svc)
}

/// Serves until the process is stopped, sweeping idle sessions in the
/// background.
pub async fn serve(svc: Arc<Service>) -> anyhow::Result<()> {
    let addr = format!("{}:{}", svc.config().host, svc.config().port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let sweeper = svc.clone();
    let every = Duration::from_secs(svc.config().sweep_interval_secs.max(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            sweeper.sweep();
        }
    });
    axum::serve(listener, router(svc)).await?;
    Ok(())
}
