//! Closed-form scenario physics for the simulated rig.
//!
//! These are toy models chosen so every quantity has an exact oracle; they
//! make no claim of electromagnetic accuracy.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::peripheral::MagneticFluxSample;
use crate::vna::{ComplexTrace, FrequencyGrid, PortPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("angle index {index} out of range (M = {n_angles})")]
    AngleIndex { index: usize, n_angles: usize },
    #[error("delay bin {delay} does not fit a {n_points}-point grid")]
    DelayBin { delay: usize, n_points: usize },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Scatterer placement for the tomography phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScattererPosition {
    None,
    A,
    B,
    C,
}

impl ScattererPosition {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" | "O" => Some(Self::None),
            "A" => Some(Self::A),
            "B" => Some(Self::B),
            "C" => Some(Self::C),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "NONE",
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
        }
    }
}

/// Rotating phantom with an optional scatterer at one of three positions.
///
/// The scatterer term has an angle-independent delay bin `d_p` and an
/// angle-dependent complex amplitude, so its inverse transform peaks at
/// `d_p` for every angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyScenario {
    pub n_angles: usize,
    pub steps_per_angle: i64,
    pub position: ScattererPosition,
    /// Delay bins for positions A, B, C.
    pub delay_bins: [usize; 3],
    pub clutter_amplitude: f64,
    pub background_db: f64,
}

impl Default for TomographyScenario {
    fn default() -> Self {
        TomographyScenario {
            n_angles: 72,
            steps_per_angle: 5,
            position: ScattererPosition::None,
            delay_bins: [12, 27, 41],
            clutter_amplitude: 0.1,
            background_db: -40.0,
        }
    }
}

impl TomographyScenario {
    pub fn with_position(mut self, position: ScattererPosition) -> Self {
        self.position = position;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_angles == 0 || self.steps_per_angle <= 0 {
            return Err(ModelError::Invalid("n_angles and steps_per_angle must be positive".into()));
        }
        let [a, b, c] = self.delay_bins;
        if a == b || b == c || a == c {
            return Err(ModelError::Invalid("delay bins must be distinct".into()));
        }
        Ok(())
    }

    pub fn delay_bin(&self, position: ScattererPosition) -> Option<usize> {
        match position {
            ScattererPosition::None => None,
            ScattererPosition::A => Some(self.delay_bins[0]),
            ScattererPosition::B => Some(self.delay_bins[1]),
            ScattererPosition::C => Some(self.delay_bins[2]),
        }
    }

    /// Angle index selected by a cumulative stepper position.
    pub fn angle_index(&self, stepper_position: i64) -> usize {
        (stepper_position.div_euclid(self.steps_per_angle)).rem_euclid(self.n_angles as i64) as usize
    }

    /// Flat-magnitude background whose phase slope depends on the switch path.
    pub fn background(&self, n: usize, n_points: usize, path_code: u32) -> Complex64 {
        let mag = 10f64.powf(self.background_db / 20.0);
        let slope = (path_code % 7) as f64 + 0.5;
        Complex64::from_polar(mag, -2.0 * PI * slope * n as f64 / n_points as f64)
    }

    /// Complex clutter amplitude at angle index `m`.
    pub fn clutter_gain(&self, m: usize) -> Complex64 {
        let phase = 2.0 * PI * m as f64 / self.n_angles as f64;
        Complex64::from_polar(self.clutter_amplitude * (1.0 + 0.5 * phase.cos()), phase)
    }
}

/// S21 of the tomography phantom at angle `m` for one switch path.
pub fn tomography_s21(
    scn: &TomographyScenario,
    m: usize,
    grid: &FrequencyGrid,
    path: &PortPath,
    path_code: u32,
) -> Result<ComplexTrace, ModelError> {
    if m >= scn.n_angles {
        return Err(ModelError::AngleIndex {
            index: m,
            n_angles: scn.n_angles,
        });
    }
    let n_points = grid.n_points();
    let delay = scn.delay_bin(scn.position);
    if let Some(d) = delay {
        if d >= n_points {
            return Err(ModelError::DelayBin { delay: d, n_points });
        }
    }
    let gain = scn.clutter_gain(m);
    let values = (0..n_points)
        .map(|n| {
            let mut v = scn.background(n, n_points, path_code);
            if let Some(d) = delay {
                let f_norm = n as f64 / n_points as f64;
                v += gain * Complex64::from_polar(1.0, -2.0 * PI * f_norm * d as f64);
            }
            v
        })
        .collect();
    ComplexTrace::new(*grid, values, path.clone()).map_err(|e| ModelError::Invalid(e.to_string()))
}

/// Sinusoidal joint flexion: `center + amplitude * sin(2π t / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub center_deg: f64,
    pub amplitude_deg: f64,
    pub period_s: f64,
}

impl Default for MotionProfile {
    fn default() -> Self {
        MotionProfile {
            center_deg: 60.0,
            amplitude_deg: 45.0,
            period_s: 4.0,
        }
    }
}

impl MotionProfile {
    /// Angle in degrees at epoch time `t_ms`, wrapped into [0, 360).
    pub fn theta_deg(&self, t_ms: f64) -> f64 {
        let phase = 2.0 * PI * (t_ms / 1e3).rem_euclid(self.period_s) / self.period_s;
        (self.center_deg + self.amplitude_deg * phase.sin()).rem_euclid(360.0)
    }
}

/// Resonant loop pair with matched Hall-effect ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopScenario {
    pub resonance_hz: f64,
    /// Peak coupling, in (0, 1].
    pub peak_coupling: f64,
    pub quality_factor: f64,
    pub flux_magnitude: f64,
    pub flux_z_offset: f64,
    pub motion: MotionProfile,
}

impl Default for LoopScenario {
    fn default() -> Self {
        LoopScenario {
            resonance_hz: 34e6,
            peak_coupling: 0.8,
            quality_factor: 20.0,
            flux_magnitude: 1.0,
            flux_z_offset: 0.2,
            motion: MotionProfile::default(),
        }
    }
}

impl LoopScenario {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.peak_coupling > 0.0 && self.peak_coupling <= 1.0) {
            return Err(ModelError::Invalid("peak coupling must be in (0, 1]".into()));
        }
        if !(self.resonance_hz > 0.0 && self.quality_factor > 0.0) {
            return Err(ModelError::Invalid("resonance and Q must be positive".into()));
        }
        Ok(())
    }

    /// Lorentzian line shape, 1 at resonance.
    pub fn line_shape(&self, f_hz: f64) -> f64 {
        let x = 2.0 * self.quality_factor * (f_hz - self.resonance_hz) / self.resonance_hz;
        1.0 / (1.0 + x * x)
    }

    pub fn theta_at(&self, t_ms: f64) -> f64 {
        self.motion.theta_deg(t_ms)
    }

    /// Complex S21 with the magnitude of [`loop_s21_magnitude`] and a
    /// resonator phase.
    pub fn s21(&self, theta_deg: f64, f_hz: f64) -> Complex64 {
        let x = 2.0 * self.quality_factor * (f_hz - self.resonance_hz) / self.resonance_hz;
        Complex64::from_polar(loop_s21_magnitude(self, theta_deg, f_hz), -x.atan())
    }

    /// Invert |S21| at `f_hz` back to a flexion angle in [0, 180].
    pub fn invert_magnitude(&self, magnitude: f64, f_hz: f64) -> f64 {
        let c = 2.0 * magnitude / (self.peak_coupling * self.line_shape(f_hz)) - 1.0;
        c.clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// `|S21| = k0 * (1 + cos θ) / 2 * L(f)`.
pub fn loop_s21_magnitude(scn: &LoopScenario, theta_deg: f64, f_hz: f64) -> f64 {
    scn.peak_coupling * (1.0 + theta_deg.to_radians().cos()) / 2.0 * scn.line_shape(f_hz)
}

/// `b = B0 * (cos θ, sin θ, z0)` at angle `theta_deg`.
pub fn sim_flux_at_angle(scn: &LoopScenario, theta_deg: f64) -> MagneticFluxSample {
    let t = theta_deg.to_radians();
    MagneticFluxSample::new([
        scn.flux_magnitude * t.cos(),
        scn.flux_magnitude * t.sin(),
        scn.flux_magnitude * scn.flux_z_offset,
    ])
    .expect("finite by construction")
}

/// Hall flux at epoch time `t_ms`.
pub fn sim_flux(scn: &LoopScenario, t_ms: f64) -> MagneticFluxSample {
    sim_flux_at_angle(scn, scn.theta_at(t_ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peripheral::flux_to_angle;

    fn grid() -> FrequencyGrid {
        FrequencyGrid::new(20e6, 60e6, 101).unwrap()
    }

    #[test]
    fn loop_magnitude_examples() {
        let s = LoopScenario::default();
        assert!((loop_s21_magnitude(&s, 0.0, 34e6) - s.peak_coupling).abs() < 1e-15);
        assert!(loop_s21_magnitude(&s, 180.0, 34e6).abs() < 1e-15);
        assert!((loop_s21_magnitude(&s, 60.0, 34e6) - 0.75 * s.peak_coupling).abs() < 1e-15);
        // monotone decreasing on [0, 180]
        let mut prev = f64::INFINITY;
        for i in 0..=180 {
            let m = loop_s21_magnitude(&s, i as f64, 34e6);
            assert!(m < prev);
            prev = m;
        }
        assert!(s.line_shape(40e6) < 1.0);
    }

    #[test]
    fn flux_examples() {
        let s = LoopScenario::default();
        let b = sim_flux_at_angle(&s, 0.0);
        assert_eq!(b.b(), [1.0, 0.0, 0.2]);
        let b = sim_flux_at_angle(&s, 90.0).b();
        assert!(b[0].abs() < 1e-15 && (b[1] - 1.0).abs() < 1e-15 && b[2] == 0.2);
    }

    #[test]
    fn modalities_share_theta() {
        let s = LoopScenario::default();
        for k in 0..400 {
            let t = 1.7e12 + k as f64 * 37.0;
            let theta = s.theta_at(t);
            let from_flux = flux_to_angle(&sim_flux(&s, t)).unwrap().theta_deg();
            assert!((from_flux - theta).abs() < 1e-9, "{from_flux} vs {theta}");
            let mag = loop_s21_magnitude(&s, theta, s.resonance_hz);
            let inverted = s.invert_magnitude(mag, s.resonance_hz);
            assert!((inverted - theta).abs() < 1e-6, "{inverted} vs {theta}");
            assert!((s.s21(theta, 34e6).norm() - mag).abs() < 1e-15);
        }
    }

    #[test]
    fn tomography_background_only_without_scatterer() {
        let scn = TomographyScenario::default();
        let g = grid();
        for m in [0, 17, 71] {
            let t = tomography_s21(&scn, m, &g, &PortPath::direct(), 3).unwrap();
            for (n, v) in t.values().iter().enumerate() {
                assert_eq!(*v, scn.background(n, 101, 3));
            }
        }
    }

    #[test]
    fn tomography_deterministic_and_bounded() {
        let scn = TomographyScenario::default().with_position(ScattererPosition::B);
        let g = grid();
        let a = tomography_s21(&scn, 5, &g, &PortPath::direct(), 1).unwrap();
        let b = tomography_s21(&scn, 5, &g, &PortPath::direct(), 1).unwrap();
        assert_eq!(a, b);
        assert!(tomography_s21(&scn, 72, &g, &PortPath::direct(), 1).is_err());
        let small = FrequencyGrid::new(1e6, 2e6, 10).unwrap();
        assert!(matches!(
            tomography_s21(&scn, 0, &small, &PortPath::direct(), 1),
            Err(ModelError::DelayBin { .. })
        ));
    }

    #[test]
    fn stepper_geometry() {
        let scn = TomographyScenario::default();
        assert_eq!(scn.angle_index(0), 0);
        assert_eq!(scn.angle_index(5), 1);
        assert_eq!(scn.angle_index(355), 71);
        assert_eq!(scn.angle_index(360), 0);
    }
}
