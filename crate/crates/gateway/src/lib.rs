//! HTTP API and event stream over a running control loop.
//!
//! Every JSON payload carries `schema_version`. When a token is configured,
//! requests need `Authorization: Bearer <token>`; the stream also accepts
//! `?token=` since browser event sources cannot set headers. A stream
//! subscriber that falls more than the hub's buffer behind is disconnected
//! and has to reconnect and refetch snapshots.

mod hub;
mod routes;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use dlcf_core::orchestrator::{DecisionHandle, Orchestrator, RunSummary};

pub use hub::{ApiEvent, Hub, API_SCHEMA_VERSION};
pub use routes::router;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Serve(std::io::Error),
}

#[derive(Clone)]
pub struct GatewayConfig {
    pub token: Option<String>,
    /// Where finished runs keep `summary.json`.
    pub runs_dir: Option<PathBuf>,
    pub heartbeat: Duration,
    /// How long a decision POST waits for the loop to answer.
    pub decision_wait: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            token: None,
            runs_dir: None,
            heartbeat: Duration::from_secs(5),
            decision_wait: Duration::from_secs(10),
        }
    }
}

/// What the handlers share.
#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    /// Absent when the loop runs without the verification gate.
    pub decisions: Option<DecisionHandle>,
    pub cfg: GatewayConfig,
}

pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, GatewayError> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| GatewayError::Bind { addr, source })
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), GatewayError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(GatewayError::Serve)
}

/// Runs `steps` loop steps on a dedicated thread, refreshing the hub's
/// reservoir and summary snapshots after each one.
pub fn spawn_loop(
    mut orch: Orchestrator,
    hub: Arc<Hub>,
    steps: usize,
) -> JoinHandle<dlcf_core::Result<RunSummary>> {
    std::thread::spawn(move || {
        hub.set_policies(orch.reservoir().records().cloned().collect());
        let mut summary = orch.summary(None);
        for _ in 0..steps {
            summary = orch.run_loop(1)?;
            hub.set_policies(orch.reservoir().records().cloned().collect());
            hub.set_summary(summary.clone());
        }
        Ok(summary)
    })
}
