use std::path::PathBuf;
use std::time::Duration;

use mpada_core::sim::{InstrumentTarget, Scenario, SimConfig};

pub const ENV_BIND_ADDR: &str = "MPADA_BIND_ADDR";
pub const ENV_TOKEN: &str = "MPADA_TOKEN";
pub const ENV_DATA_DIR: &str = "MPADA_DATA_DIR";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind_addr: String,
    /// Shared bearer token. `None` disables authentication.
    pub token: Option<String>,
    /// Finished sessions are archived under `data_dir/<id>/`.
    pub data_dir: PathBuf,
    /// Instrument for plans that do not name one.
    pub instrument: InstrumentTarget,
    /// Timing and seed for embedded simulators.
    pub sim: SimConfig,
    pub connect_timeout: Duration,
    /// Default frequency-point decimation for streamed traces.
    pub stream_decimation: usize,
    /// Per-subscriber event backlog before a stream is dropped.
    pub stream_backlog: usize,
    /// Engine live-tap capacity.
    pub tap_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind_addr: "127.0.0.1:8080".into(),
            token: None,
            data_dir: PathBuf::from("mpada-data"),
            instrument: InstrumentTarget::Simulator(Scenario::Loop(Default::default())),
            sim: SimConfig::default(),
            connect_timeout: Duration::from_secs(2),
            stream_decimation: 1,
            stream_backlog: 4096,
            tap_capacity: 65536,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `MPADA_BIND_ADDR`, `MPADA_TOKEN` and
    /// `MPADA_DATA_DIR`. An empty token counts as unset.
    pub fn from_env() -> Self {
        let mut c = ServiceConfig::default();
        if let Ok(v) = std::env::var(ENV_BIND_ADDR) {
            c.bind_addr = v;
        }
        c.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        if let Ok(v) = std::env::var(ENV_DATA_DIR) {
            c.data_dir = PathBuf::from(v);
        }
        c
    }
}
