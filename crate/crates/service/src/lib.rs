//! JSON-over-HTTP front end for the review loop: prediction records, human
//! corrections, retraining cycles and metrics. State lives in plain files
//! under the data directory.

mod config;
mod http;
mod state;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

pub use config::{ServiceConfig, DATA_ENV};
pub use http::{router, ApiError};
pub use state::{
    bootstrap_model, write_atomic, AppState, ArchitectureSummary, DataPaths, MetricsView,
    ModelInfo, ModelMeta, ReviewReply, StackSizes,
};

use refeednet::{Error, Result};

/// Binds the listener. A port already in use is reported as an I/O error.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Io {
            path: format!("listen address {addr}").into(),
            source: e,
        })
}

/// Serves `state` on `listener` until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let addr = listener.local_addr().ok();
    log::info!("listening on {addr:?}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::Io {
            path: "http server".into(),
            source: e,
        })
}

/// Opens the state, binds `cfg.addr` and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let listener = bind(cfg.addr).await?;
    let state = tokio::task::spawn_blocking(move || AppState::open(cfg))
        .await
        .map_err(|e| Error::Validation(e.to_string()))??;
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
