//! HTTP control plane: submit plans, start and stop sessions, stream live
//! samples over server-sent events, download exports and run scripts.
//!
//! ```text
//! POST /api/plans                         plan JSON -> 201 {id, session}
//! GET  /api/sessions                      list of session views
//! GET  /api/sessions/{id}                 session view
//! POST /api/sessions/{id}/start           idle -> running
//! POST /api/sessions/{id}/stop            running -> complete (partial)
//! GET  /api/sessions/{id}/stream          SSE; ?modalities=a,b&decimate=k
//! GET  /api/sessions/{id}/export          ?format=csv|s2p|snapshot
//! POST /api/script                        script document -> report
//! ```

mod api;
mod config;
mod export;
mod script;
mod state;
mod stream;

pub use api::{router, ApiError};
pub use config::{ServiceConfig, ENV_BIND_ADDR, ENV_DATA_DIR, ENV_TOKEN};
pub use export::{tar_bundle, ExportFormat};
pub use script::{default_script_plan, ScriptCommand, ScriptDocument, ScriptEntry, ScriptReport};
pub use state::{ApiSessionView, AppState, PlanSummary, SessionEntry, StreamItem};

use std::io;

use tokio::net::TcpListener;

/// Bind and serve until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> io::Result<()> {
    let listener = TcpListener::bind(&config.bind_addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let app = router(AppState::new(config));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
