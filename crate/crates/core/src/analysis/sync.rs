//! Cross-modal alignment of the loop sensor's two angle estimates.

use crate::acquisition::{Payload, TimestampedSample};
use crate::analysis::AnalysisError;
use crate::peripheral::flux_to_angle;
use crate::sim::models::LoopScenario;

/// `(t_ms, θ)` from Hall flux samples. Degenerate samples are skipped.
pub fn angle_series_from_flux(samples: &[TimestampedSample]) -> Vec<(f64, f64)> {
    samples
        .iter()
        .filter_map(|s| match &s.payload {
            Payload::Flux { flux } => flux_to_angle(flux).ok().map(|a| (s.t_ms, a.theta_deg())),
            Payload::Angle { angle } => Some((s.t_ms, angle.theta_deg())),
            _ => None,
        })
        .collect()
}

/// `(t_ms, θ)` by inverting |S21| at the grid point closest to resonance.
pub fn angle_series_from_s21(samples: &[TimestampedSample], model: &LoopScenario) -> Vec<(f64, f64)> {
    samples
        .iter()
        .filter_map(|s| match &s.payload {
            Payload::Trace { trace, .. } => {
                let freqs = trace.grid().frequencies();
                let (i, f) = freqs
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - model.resonance_hz).abs().total_cmp(&(b.1 - model.resonance_hz).abs()))?;
                Some((s.t_ms, model.invert_magnitude(trace.values()[i].norm(), *f)))
            }
            _ => None,
        })
        .collect()
}

/// Linear interpolation of `series` at `t0 + k * dt` for k in 0..n.
/// Points outside the series are clamped to its ends.
pub fn resample(series: &[(f64, f64)], t0: f64, dt: f64, n: usize) -> Result<Vec<f64>, AnalysisError> {
    if series.is_empty() {
        return Err(AnalysisError::Empty("nothing to resample".into()));
    }
    Ok((0..n)
        .map(|k| {
            let t = t0 + dt * k as f64;
            let j = series.partition_point(|p| p.0 <= t);
            if j == 0 {
                series[0].1
            } else if j == series.len() {
                series[j - 1].1
            } else {
                let (a, b) = (series[j - 1], series[j]);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            }
        })
        .collect())
}

/// Lag `k` in `[-max_lag, max_lag]` maximizing the normalized correlation
/// `Σ a[n] b[n + k]` of the mean-removed series.
pub fn cross_correlation_lag(a: &[f64], b: &[f64], max_lag: usize) -> Result<i64, AnalysisError> {
    let n = a.len().min(b.len());
    if n < 2 || max_lag >= n {
        return Err(AnalysisError::Empty("series too short for the requested lag range".into()));
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let mut best = (f64::NEG_INFINITY, 0i64);
    for k in -(max_lag as i64)..=(max_lag as i64) {
        let (mut num, mut ea, mut eb) = (0.0, 0.0, 0.0);
        for i in 0..n as i64 {
            let j = i + k;
            if j < 0 || j >= n as i64 {
                continue;
            }
            let (x, y) = (a[i as usize] - ma, b[j as usize] - mb);
            num += x * y;
            ea += x * x;
            eb += y * y;
        }
        let r = if ea > 0.0 && eb > 0.0 { num / (ea * eb).sqrt() } else { 0.0 };
        if r > best.0 {
            best = (r, k);
        }
    }
    Ok(best.1)
}

/// Lag in samples of period `dt_ms` between the flux-derived and
/// S21-derived angle series over their common time span.
pub fn synchrony_lag(
    flux: &[(f64, f64)],
    rf: &[(f64, f64)],
    dt_ms: f64,
    max_lag: usize,
) -> Result<i64, AnalysisError> {
    let (fa, fb) = (flux.first(), flux.last());
    let (ra, rb) = (rf.first(), rf.last());
    let (Some(fa), Some(fb), Some(ra), Some(rb)) = (fa, fb, ra, rb) else {
        return Err(AnalysisError::Empty("empty angle series".into()));
    };
    let t0 = fa.0.max(ra.0);
    let t1 = fb.0.min(rb.0);
    if t1 <= t0 {
        return Err(AnalysisError::Empty("series do not overlap".into()));
    }
    let n = ((t1 - t0) / dt_ms).floor() as usize + 1;
    let a = resample(flux, t0, dt_ms, n)?;
    let b = resample(rf, t0, dt_ms, n)?;
    cross_correlation_lag(&a, &b, max_lag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_known_shift() {
        let s: Vec<f64> = (0..200).map(|i| (i as f64 * 0.157).sin() + 0.3 * (i as f64 * 0.05).cos()).collect();
        for shift in [-3i64, 0, 2, 5] {
            let b: Vec<f64> = (0..200).map(|i| s[((i - shift).rem_euclid(200)) as usize]).collect();
            assert_eq!(cross_correlation_lag(&s, &b, 10).unwrap(), shift);
        }
    }

    #[test]
    fn resample_interpolates() {
        let series = [(0.0, 0.0), (10.0, 10.0), (20.0, 0.0)];
        assert_eq!(resample(&series, 0.0, 5.0, 5).unwrap(), vec![0.0, 5.0, 10.0, 5.0, 0.0]);
        assert_eq!(resample(&series, -5.0, 30.0, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn model_round_trip_has_zero_lag() {
        let m = LoopScenario::default();
        let ts: Vec<f64> = (0..100).map(|i| 1.7e12 + 100.0 * i as f64).collect();
        let flux: Vec<(f64, f64)> = ts.iter().map(|&t| (t, m.theta_at(t))).collect();
        let rf: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| (t + 1.0, m.invert_magnitude(m.s21(m.theta_at(t + 1.0), m.resonance_hz).norm(), m.resonance_hz)))
            .collect();
        assert_eq!(synchrony_lag(&flux, &rf, 100.0, 10).unwrap(), 0);
    }
}
