//! Edge coordinator: device registry, per-microcell listings, the
//! transaction ledger and dual-report reconciliation, served over HTTP.

pub mod api;
pub mod client;
pub mod error;
pub mod ledger;
pub mod model;
pub mod reconcile;
pub mod service;

use std::net::SocketAddr;
use std::sync::Arc;

pub use client::{CoordinatorApi, HttpCoordinator};
pub use error::{CoordError, ErrorCode};
pub use model::{
    Bucket, CellEvent, GoalMode, LossReport, NewListing, NewTransaction, PartyReport, TransactionRecord, TxState,
};
pub use reconcile::{reconcile, validate_report, DEFAULT_BUCKET_S};
pub use service::{Coordinator, CoordinatorConfig};

/// Serves `coord` on an already-bound listener until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    coord: Arc<Coordinator>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, api::router(coord))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn_server(addr: SocketAddr, coord: Arc<Coordinator>) -> std::io::Result<SocketAddr> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(serve(listener, coord, std::future::pending()));
    Ok(local)
}
