//! Local HTTP control surface of one agent.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::CorsLayer;

use crate::runtime::AgentHandle;
use crate::types::{AgentCommand, AgentError, AgentEvent};

struct ApiError(AgentError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = json!({"code": self.0.code(), "message": self.0.to_string()});
        (status, Json(body)).into_response()
    }
}

pub fn router(agent: Arc<AgentHandle>) -> Router {
    Router::new()
        .route("/control/command", post(command))
        .route("/status", get(status))
        .route("/events", get(events))
        .layer(CorsLayer::permissive())
        .with_state(agent)
}

pub async fn serve(listener: tokio::net::TcpListener, agent: Arc<AgentHandle>) -> std::io::Result<()> {
    axum::serve(listener, router(agent)).await
}

async fn command(State(agent): State<Arc<AgentHandle>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let cmd: AgentCommand =
        serde_json::from_slice(&body).map_err(|e| ApiError(AgentError::Invalid(e.to_string())))?;
    agent.command(cmd).await.map_err(ApiError)?;
    Ok(Json(json!({"ok": true})))
}

async fn status(State(agent): State<Arc<AgentHandle>>) -> Json<crate::types::AgentStatus> {
    Json(agent.status())
}

fn sse(ev: &AgentEvent) -> Event {
    let data = match ev {
        AgentEvent::Status(s) => serde_json::to_string(s),
        AgentEvent::Prompt(p) => serde_json::to_string(p),
    }
    .expect("event serializes");
    Event::default().event(ev.name()).data(data)
}

/// The current status first, then every change and prompt.
async fn events(State(agent): State<Arc<AgentHandle>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = agent.subscribe();
    let first = Some(AgentEvent::Status(agent.status()));
    let stream = futures::stream::unfold((first, rx), |(first, mut rx)| async move {
        if let Some(ev) = first {
            return Some((Ok(sse(&ev)), (None, rx)));
        }
        match rx.recv().await {
            Ok(ev) => Some((Ok(sse(&ev)), (None, rx))),
            Err(RecvError::Lagged(_)) | Err(RecvError::Closed) => None,
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
