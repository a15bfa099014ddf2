//! Coherent-subtraction imaging and timing statistics.

pub mod jitter;
pub mod sync;
pub mod timedomain;

use thiserror::Error;

pub use jitter::{default_thresholds, delay_statistics, interval_errors, tick_timestamps, CdfPoint, DelayStats};
pub use sync::{angle_series_from_flux, angle_series_from_s21, cross_correlation_lag, resample, synchrony_lag};
pub use timedomain::{
    coherent_subtract_time_domain, coherent_subtract_time_domain_with, fft_rows, ifft_rows, magnitude, peak_bins,
    ComplexMatrix, TomographyDataset, TransformOptions, Window,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestamps not strictly increasing at index {0}")]
    NonIncreasing(usize),
}
