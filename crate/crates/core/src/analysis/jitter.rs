//! Sampling-interval error statistics.

use serde::{Deserialize, Serialize};

use crate::acquisition::{Payload, Session};
use crate::analysis::AnalysisError;

/// `τ[n] = |(t[n] - t[n-1]) - T̄|` for n = 1..len.
pub fn interval_errors(timestamps: &[f64], target_ms: f64) -> Result<Vec<f64>, AnalysisError> {
    if timestamps.len() < 2 {
        return Err(AnalysisError::Empty("need at least two timestamps".into()));
    }
    timestamps
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            if w[1] > w[0] {
                Ok(((w[1] - w[0]) - target_ms).abs())
            } else {
                Err(AnalysisError::NonIncreasing(i + 1))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub d_ms: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub tau: Vec<f64>,
    pub mse_ms2: f64,
    pub variance_ms2: f64,
    pub mean_abs_ms: f64,
    pub cdf: Vec<CdfPoint>,
}

impl DelayStats {
    /// Fraction of τ strictly below `d_ms`.
    pub fn probability_below(&self, d_ms: f64) -> f64 {
        self.tau.iter().filter(|&&t| t < d_ms).count() as f64 / self.tau.len() as f64
    }
}

/// Thresholds 1..=50 ms.
pub fn default_thresholds() -> Vec<f64> {
    (1..=50).map(f64::from).collect()
}

pub fn mean(xs: &[f64]) -> Result<f64, AnalysisError> {
    if xs.is_empty() {
        return Err(AnalysisError::Empty("no values".into()));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn delay_statistics(tau: &[f64], thresholds: &[f64]) -> Result<DelayStats, AnalysisError> {
    let mean_abs_ms = mean(tau)?;
    let mse_ms2 = tau.iter().map(|t| t * t).sum::<f64>() / tau.len() as f64;
    let variance_ms2 = tau.iter().map(|t| (t - mean_abs_ms).powi(2)).sum::<f64>() / tau.len() as f64;
    let mut stats = DelayStats {
        tau: tau.to_vec(),
        mse_ms2,
        variance_ms2,
        mean_abs_ms,
        cdf: Vec::new(),
    };
    stats.cdf = thresholds
        .iter()
        .map(|&d| CdfPoint {
            d_ms: d,
            probability: stats.probability_below(d),
        })
        .collect();
    Ok(stats)
}

/// Per-tick timestamps of one modality. For multi-path sweeps only the
/// first path of each tick is kept.
pub fn tick_timestamps(session: &Session, modality: &str) -> Vec<f64> {
    let samples = session.modality(modality);
    let first_step = samples.iter().find_map(|s| match &s.payload {
        Payload::Trace { step_id, .. } => Some(*step_id),
        _ => None,
    });
    samples
        .iter()
        .filter(|s| match (&s.payload, first_step) {
            (Payload::Trace { step_id, .. }, Some(first)) => *step_id == first,
            _ => true,
        })
        .map(|s| s.t_ms)
        .collect()
}
