//! Coherent subtraction and time-domain conversion of angle-resolved S21.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::acquisition::{Payload, Session};
use crate::analysis::AnalysisError;
use crate::vna::{ComplexTrace, FrequencyGrid};

pub type ComplexMatrix = Vec<Vec<Complex64>>;

/// `M x N` S21 matrix (angles by frequency points) for one scatterer
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct TomographyDataset {
    position: String,
    grid: FrequencyGrid,
    s21: ComplexMatrix,
}

impl TomographyDataset {
    pub fn new(position: impl Into<String>, grid: FrequencyGrid, s21: ComplexMatrix) -> Result<Self, AnalysisError> {
        if s21.is_empty() {
            return Err(AnalysisError::Empty("no angle rows".into()));
        }
        if let Some(i) = s21.iter().position(|r| r.len() != grid.n_points()) {
            return Err(AnalysisError::Shape(format!(
                "row {i} has {} points, grid has {}",
                s21[i].len(),
                grid.n_points()
            )));
        }
        Ok(TomographyDataset {
            position: position.into(),
            grid,
            s21,
        })
    }

    /// Rows from `(angle index, trace)` pairs. Traces sharing an angle are
    /// averaged coherently (complex mean per frequency point).
    pub fn from_traces(position: impl Into<String>, traces: &[(usize, &ComplexTrace)]) -> Result<Self, AnalysisError> {
        let first = traces.first().ok_or_else(|| AnalysisError::Empty("no traces".into()))?;
        let grid = *first.1.grid();
        let mut groups: BTreeMap<usize, Vec<&ComplexTrace>> = BTreeMap::new();
        for (m, t) in traces {
            if t.grid() != &grid {
                return Err(AnalysisError::Shape("traces use different frequency grids".into()));
            }
            groups.entry(*m).or_default().push(t);
        }
        let rows = groups
            .into_values()
            .map(|g| {
                let mut acc = vec![Complex64::new(0.0, 0.0); grid.n_points()];
                for t in &g {
                    for (a, v) in acc.iter_mut().zip(t.values()) {
                        *a += v;
                    }
                }
                let n = g.len() as f64;
                acc.into_iter().map(|a| a / n).collect()
            })
            .collect();
        Self::new(position, grid, rows)
    }

    /// Group a sequential session's traces by angle: a trace's angle index
    /// is the number of stepper advances recorded before it.
    pub fn from_session(position: impl Into<String>, session: &Session) -> Result<Self, AnalysisError> {
        let mut advances: Vec<f64> = session
            .buffers
            .values()
            .flatten()
            .filter(|s| matches!(&s.payload, Payload::Actuation { event } if event.event == "advance"))
            .map(|s| s.t_ms)
            .collect();
        advances.sort_by(f64::total_cmp);
        let traces: Vec<(usize, &ComplexTrace)> = session
            .merged()
            .into_iter()
            .filter_map(|s| match &s.payload {
                Payload::Trace { trace, .. } => Some((advances.partition_point(|&a| a < s.t_ms), trace)),
                _ => None,
            })
            .collect();
        Self::from_traces(position, &traces)
    }

    pub fn position(&self) -> &str {
        &self.position
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn rows(&self) -> &ComplexMatrix {
        &self.s21
    }

    pub fn n_angles(&self) -> usize {
        self.s21.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    None,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransformOptions {
    /// Zero-pad each row to this length before the inverse transform.
    pub pad_to: Option<usize>,
    pub window: Window,
}

fn window_weights(window: Window, n: usize) -> Vec<f64> {
    match window {
        Window::None => vec![1.0; n],
        Window::Hann if n < 2 => vec![1.0; n],
        Window::Hann => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
            .collect(),
    }
}

/// Row-wise inverse DFT with `1/L` scaling, `L` the (padded) length.
pub fn ifft_rows(rows: &[Vec<Complex64>], opts: TransformOptions) -> Result<ComplexMatrix, AnalysisError> {
    let n = rows.first().map_or(0, Vec::len);
    let len = opts.pad_to.unwrap_or(n);
    if len < n {
        return Err(AnalysisError::Shape(format!("pad length {len} shorter than row length {n}")));
    }
    let w = window_weights(opts.window, n);
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(len);
    let scale = 1.0 / len as f64;
    rows.iter()
        .map(|r| {
            if r.len() != n {
                return Err(AnalysisError::Shape("ragged matrix".into()));
            }
            let mut buf: Vec<Complex64> = r.iter().zip(&w).map(|(v, w)| v * w).collect();
            buf.resize(len, Complex64::new(0.0, 0.0));
            ifft.process(&mut buf);
            Ok(buf.into_iter().map(|v| v * scale).collect())
        })
        .collect()
}

/// Row-wise forward DFT, unscaled.
pub fn fft_rows(rows: &[Vec<Complex64>]) -> ComplexMatrix {
    let mut planner = FftPlanner::new();
    rows.iter()
        .map(|r| {
            let fft = planner.plan_fft_forward(r.len());
            let mut buf = r.clone();
            fft.process(&mut buf);
            buf
        })
        .collect()
}

/// `IFFT(S_p - S_o)` row by row, no padding or window.
pub fn coherent_subtract_time_domain(sp: &TomographyDataset, so: &TomographyDataset) -> Result<ComplexMatrix, AnalysisError> {
    coherent_subtract_time_domain_with(sp, so, TransformOptions::default())
}

pub fn coherent_subtract_time_domain_with(
    sp: &TomographyDataset,
    so: &TomographyDataset,
    opts: TransformOptions,
) -> Result<ComplexMatrix, AnalysisError> {
    if sp.grid != so.grid {
        return Err(AnalysisError::Shape("datasets use different frequency grids".into()));
    }
    if sp.n_angles() != so.n_angles() {
        return Err(AnalysisError::Shape(format!(
            "angle counts differ: {} vs {}",
            sp.n_angles(),
            so.n_angles()
        )));
    }
    let diff: ComplexMatrix = sp
        .s21
        .iter()
        .zip(&so.s21)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    ifft_rows(&diff, opts)
}

pub fn magnitude(m: &[Vec<Complex64>]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.iter().map(|v| v.norm()).collect()).collect()
}

/// Index of the largest magnitude in each row (first one on ties).
pub fn peak_bins(m: &[Vec<Complex64>]) -> Vec<usize> {
    m.iter()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if v.norm() > r[best].norm() {
                    best = i;
                }
            }
            best
        })
        .collect()
}
