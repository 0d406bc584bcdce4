//! Session-based HTTP API for monitoring a trial stage by stage.
//!
//! Each session keeps an append-only log in the data directory and is rebuilt
//! from it on start-up. Mutations of one session are serialised; a second
//! concurrent mutation gets 409. Reads are served from immutable snapshots.

pub mod api;
pub mod session;
pub mod store;

use clap::Args;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

pub use api::{router, AppState};

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Port to listen on.
    #[arg(long, env = "SEQGRAPH_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Directory holding one log file per session.
    #[arg(long, env = "SEQGRAPH_DATA_DIR", default_value = "seqgraph-sessions")]
    pub data_dir: PathBuf,
    /// Time budget for the bracket computations of one stage, in milliseconds.
    #[arg(long, env = "SEQGRAPH_TIMEOUT_MS", default_value_t = 30_000)]
    pub timeout_ms: u64,
}

/// Runs the server until interrupted.
pub fn serve(args: &ServeArgs) -> std::io::Result<()> {
    let state = AppState::open(args.data_dir.clone(), Duration::from_millis(args.timeout_ms))?;
    let addr = SocketAddr::from(([127, 0, 0, 1], args.port));
    tokio::runtime::Runtime::new()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
