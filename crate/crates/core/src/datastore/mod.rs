//! Persistence: Touchstone traces, CSV time series and session archives.

pub mod archive;
pub mod timeseries;
pub mod touchstone;

use thiserror::Error;

pub use archive::{build_archive, read_archive, read_manifest, trace_files, write_archive, Manifest};
pub use timeseries::{modality_csv, parse_timeseries_csv, write_timeseries_csv, ModalityKind};
pub use touchstone::{format_significant, read_touchstone, write_touchstone, TouchstoneFile};

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("session is still running")]
    SessionRunning,
    #[error("modality {0:?} mixes payload kinds")]
    MixedModality(String),
    #[error("modality id {0:?} is not a safe file name")]
    BadModalityId(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for DatastoreError {
    fn from(e: std::io::Error) -> Self {
        DatastoreError::Io(e.to_string())
    }
}

impl From<csv::Error> for DatastoreError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        DatastoreError::Parse { line, message: e.to_string() }
    }
}
