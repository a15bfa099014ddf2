//! `mpada`: run acquisition plans, analyze session archives, serve the
//! HTTP API and run the instrument simulator.
//!
//! Exit codes: 0 session complete, 2 session aborted, 1 configuration,
//! connection or input error.

mod analyze;
mod remote;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mpada", version, about = "Multi-port time-series S-parameter acquisition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a plan and write its session archive.
    Run(RunArgs),
    /// Analysis pipelines over archives and exported files.
    Analyze {
        #[command(subcommand)]
        which: AnalyzeCommand,
    },
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Run the simulated VNA over TCP.
    Sim(SimArgs),
}

#[derive(Args)]
pub struct SimTiming {
    /// Simulator RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emulate sweep duration and response latency jitter.
    #[arg(long)]
    pub realistic: bool,
}

#[derive(Args)]
pub struct RunArgs {
    /// Plan document (JSON, or YAML by extension).
    #[arg(long)]
    pub plan: PathBuf,
    /// `TCPIP0::<host>::<port>::SOCKET`, `sim[:loop|:thru|:tomography[:A|B|C|none]]`,
    /// or an `http(s)://` service URL. Defaults to the plan's instrument.
    #[arg(long)]
    pub address: Option<String>,
    /// Output directory; the archive goes to `<out>/<session-id>/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the plan's duration, in milliseconds.
    #[arg(long)]
    pub duration_override: Option<u64>,
    #[command(flatten)]
    pub sim: SimTiming,
    /// Print a JSON run summary on standard output.
    #[arg(long)]
    pub json: bool,
    /// Bearer token for service URLs.
    #[arg(long, env = "MPADA_TOKEN")]
    pub token: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum WindowArg {
    None,
    Hann,
}

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// Coherent subtraction and time-domain conversion.
    Clutter {
        /// Scatterer-present data: a session archive or a directory of s2p files (one per angle).
        #[arg(long)]
        sp: PathBuf,
        /// Reference data without the scatterer, same layout as --sp.
        #[arg(long)]
        so: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Zero-pad each row to this many points before the inverse transform.
        #[arg(long)]
        pad_to: Option<usize>,
        #[arg(long, value_enum, default_value = "none")]
        window: WindowArg,
        #[arg(long)]
        json: bool,
    },
    /// Sampling-interval error statistics.
    Jitter {
        /// A session archive, or one modality CSV file.
        #[arg(long)]
        input: PathBuf,
        /// Restrict to one modality (archives only).
        #[arg(long)]
        modality: Option<String>,
        /// Target interval; required for CSV input, taken from the plan otherwise.
        #[arg(long)]
        target_ms: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Lag between flux-derived and S21-derived angle series.
    Sync {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "flux")]
        flux: String,
        #[arg(long, default_value = "s21")]
        rf: String,
        #[arg(long, default_value_t = 100.0)]
        dt_ms: f64,
        #[arg(long, default_value_t = 10)]
        max_lag: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
pub struct ServeArgs {
    /// Listen address [env: MPADA_BIND_ADDR].
    #[arg(long)]
    pub bind: Option<String>,
    /// Archive directory [env: MPADA_DATA_DIR].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Default instrument for plans that do not name one.
    #[arg(long, default_value = "sim:loop")]
    pub address: String,
    #[command(flatten)]
    pub sim: SimTiming,
}

#[derive(Args)]
pub struct SimArgs {
    #[arg(long, default_value = "127.0.0.1:5025")]
    pub bind: String,
    /// thru, loop, or tomography[:A|B|C|none].
    #[arg(long, default_value = "thru")]
    pub scenario: String,
    /// Reported minimum sweep time.
    #[arg(long, default_value_t = 20)]
    pub min_sweep_ms: u64,
    #[command(flatten)]
    pub sim: SimTiming,
}

/// Terminal error: exit code plus a message for standard error.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run::run(a),
        Command::Analyze { which } => analyze::analyze(which),
        Command::Serve(a) => run::serve(a),
        Command::Sim(a) => run::sim(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
