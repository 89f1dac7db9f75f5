//! HTTP/JSON surface of the coordinator, plus the microcell event stream.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use eaas_core::{DeviceProfile, Role};
use futures::Stream;
use serde::de::DeserializeOwned;
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::error::{CoordError, ErrorCode};
use crate::model::{DeviceIdBody, NewListing, NewTransaction, PartyReport, StateBody, TransactionIdBody};
use crate::reconcile::DEFAULT_BUCKET_S;
use crate::service::Coordinator;

pub struct ApiError(pub CoordError);

impl From<CoordError> for ApiError {
    fn from(e: CoordError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.0.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

type Shared = Arc<Coordinator>;
type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError(CoordError::validation("invalid request body").with_detail(e.to_string())))
}

fn routes() -> Router<Shared> {
    Router::new()
        .route("/v1/devices", post(register_device))
        .route("/v1/devices/{id}", get(get_device))
        .route("/v1/microcells/{id}/listings", post(post_listing).get(list_open))
        .route("/v1/microcells/{id}/events", get(events))
        .route("/v1/listings/{id}", delete(withdraw_listing))
        .route("/v1/transactions", post(create_transaction))
        .route("/v1/transactions/{id}", get(get_transaction))
        .route("/v1/transactions/{id}/reports", put(submit_report))
        .route("/v1/transactions/{id}/loss-report", get(loss_report))
}

pub fn router(coord: Shared) -> Router {
    routes()
        .fallback(|| async {
            ApiError(CoordError::new(ErrorCode::NotFound, "no such route"))
        })
        .layer(CorsLayer::permissive())
        .with_state(coord)
}

/// The API plus static files from `dir` for every other path.
pub fn router_with_static(coord: Shared, dir: &std::path::Path) -> Router {
    routes()
        .fallback_service(ServeDir::new(dir))
        .layer(CorsLayer::permissive())
        .with_state(coord)
}

async fn register_device(State(c): State<Shared>, body: Bytes) -> ApiResult<DeviceIdBody> {
    let profile: DeviceProfile = parse(&body)?;
    Ok(Json(DeviceIdBody {
        device_id: c.register_device(profile)?,
    }))
}

async fn get_device(State(c): State<Shared>, Path(id): Path<String>) -> ApiResult<DeviceProfile> {
    Ok(Json(c.get_device(&id)?))
}

async fn post_listing(
    State(c): State<Shared>,
    Path(cell): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let req: NewListing = parse(&body)?;
    Ok((StatusCode::CREATED, Json(c.post_listing(&cell, req)?)))
}

async fn list_open(
    State(c): State<Shared>,
    Path(cell): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<impl IntoResponse, ApiError> {
    let role = match q.get("role").map(String::as_str) {
        None | Some("") => None,
        Some(r) => Some(
            serde_json::from_value::<Role>(serde_json::Value::String(r.to_string()))
                .map_err(|_| CoordError::validation("role must be provider or consumer").with_detail(r))?,
        ),
    };
    Ok(Json(c.list_open(&cell, role)))
}

async fn withdraw_listing(State(c): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(c.withdraw_listing(&id)?))
}

async fn create_transaction(State(c): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: NewTransaction = parse(&body)?;
    let transaction_id = c.create_transaction(req)?;
    Ok((StatusCode::CREATED, Json(TransactionIdBody { transaction_id })))
}

async fn get_transaction(State(c): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(c.get_transaction(&id)?))
}

async fn submit_report(State(c): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<StateBody> {
    let report: PartyReport = parse(&body)?;
    Ok(Json(StateBody {
        state: c.submit_report(&id, report)?,
    }))
}

async fn loss_report(
    State(c): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<impl IntoResponse, ApiError> {
    let bucket_s = match q.get("bucket_s") {
        None => DEFAULT_BUCKET_S,
        Some(s) => s
            .parse::<f64>()
            .map_err(|_| CoordError::validation("bucket_s must be a number").with_detail(s))?,
    };
    Ok(Json(c.loss_report(&id, bucket_s)?))
}

/// One SSE event per committed change; a subscriber that falls further
/// behind than the buffer is disconnected rather than slowing writers.
async fn events(
    State(c): State<Shared>,
    Path(cell): Path<String>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = c.subscribe(&cell);
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(ev) => {
                let data = serde_json::to_string(&ev).expect("event serializes");
                let sse = Event::default().event(ev.kind).id(ev.seq.to_string()).data(data);
                Some((Ok(sse), rx))
            }
            Err(RecvError::Lagged(_)) | Err(RecvError::Closed) => None,
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
