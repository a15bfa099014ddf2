//! Typed VNA control over SCPI: sweep setup, trigger and trace readout.

use std::collections::BTreeSet;
use std::time::Duration;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scpi::connection::ConnectionError;
use crate::scpi::{InstrumentError, ResourceAddress, Response, ScpiConnection};
use crate::switch::Pin;

pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum VnaError {
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("connection error: {0}")]
    Connection(#[from] ConnectionError),
    #[error("instrument rejected configuration: {0}")]
    Rejected(InstrumentError),
    #[error("instrument error: {0}")]
    Instrument(InstrumentError),
    #[error("configuration readback mismatch: {0}")]
    Readback(String),
    #[error("sweep not configured")]
    NotConfigured,
    #[error("trace decode: {0}")]
    Decode(String),
    #[error("unexpected response to {query}: {response:?}")]
    UnexpectedResponse { query: String, response: String },
}

impl VnaError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, VnaError::Connection(ConnectionError::Timeout))
    }
}

/// Linearly spaced sweep points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct FrequencyGrid {
    start_hz: f64,
    stop_hz: f64,
    n_points: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    start_hz: f64,
    stop_hz: f64,
    n_points: usize,
}

impl TryFrom<RawGrid> for FrequencyGrid {
    type Error = VnaError;
    fn try_from(r: RawGrid) -> Result<Self, Self::Error> {
        FrequencyGrid::new(r.start_hz, r.stop_hz, r.n_points)
    }
}

impl From<FrequencyGrid> for RawGrid {
    fn from(g: FrequencyGrid) -> Self {
        RawGrid {
            start_hz: g.start_hz,
            stop_hz: g.stop_hz,
            n_points: g.n_points,
        }
    }
}

impl FrequencyGrid {
    pub fn new(start_hz: f64, stop_hz: f64, n_points: usize) -> Result<Self, VnaError> {
        if !start_hz.is_finite() || !stop_hz.is_finite() {
            return Err(VnaError::InvalidGrid("non-finite frequency".into()));
        }
        if start_hz < 0.0 {
            return Err(VnaError::InvalidGrid("negative start frequency".into()));
        }
        match n_points {
            0 => Err(VnaError::InvalidGrid("n_points must be >= 1".into())),
            1 if start_hz != stop_hz => Err(VnaError::InvalidGrid(
                "single-point grid requires start == stop".into(),
            )),
            n if n >= 2 && start_hz >= stop_hz => Err(VnaError::InvalidGrid(format!(
                "start {start_hz} Hz must be below stop {stop_hz} Hz"
            ))),
            _ => Ok(FrequencyGrid {
                start_hz,
                stop_hz,
                n_points,
            }),
        }
    }

    pub fn single(f_hz: f64) -> Result<Self, VnaError> {
        Self::new(f_hz, f_hz, 1)
    }

    pub fn start_hz(&self) -> f64 {
        self.start_hz
    }

    pub fn stop_hz(&self) -> f64 {
        self.stop_hz
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn step_hz(&self) -> f64 {
        if self.n_points < 2 {
            0.0
        } else {
            (self.stop_hz - self.start_hz) / (self.n_points - 1) as f64
        }
    }

    pub fn frequency(&self, index: usize) -> f64 {
        if index + 1 == self.n_points {
            self.stop_hz
        } else {
            self.start_hz + self.step_hz() * index as f64
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.frequency(i)).collect()
    }

    /// Rebuild a grid from explicit frequencies, checking linear spacing.
    pub fn from_frequencies(freqs: &[f64]) -> Result<Self, VnaError> {
        let (&first, &last) = match (freqs.first(), freqs.last()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(VnaError::InvalidGrid("no frequencies".into())),
        };
        let grid = FrequencyGrid::new(first, last, freqs.len())?;
        let tol = 1e-9 * last.abs().max(1.0);
        for (i, &f) in freqs.iter().enumerate() {
            if (grid.frequency(i) - f).abs() > tol {
                return Err(VnaError::InvalidGrid(format!(
                    "frequency {f} at index {i} is not linearly spaced"
                )));
            }
        }
        Ok(grid)
    }
}

/// Transmit/receive port labels of one measured path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PortPath {
    pub tx: String,
    pub rx: String,
}

impl PortPath {
    pub fn new(tx: impl Into<String>, rx: impl Into<String>) -> Self {
        PortPath {
            tx: tx.into(),
            rx: rx.into(),
        }
    }

    /// Path used when a plan has no switch sequence: the VNA's own ports.
    pub fn direct() -> Self {
        PortPath::new("P1", "P2")
    }
}

/// One sweep of S21 over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexTrace {
    grid: FrequencyGrid,
    values: Vec<Complex64>,
    path: PortPath,
}

impl ComplexTrace {
    pub fn new(grid: FrequencyGrid, values: Vec<Complex64>, path: PortPath) -> Result<Self, VnaError> {
        if values.len() != grid.n_points() {
            return Err(VnaError::Decode(format!(
                "{} values for {} points",
                values.len(),
                grid.n_points()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(VnaError::Decode(format!("non-finite value at point {i}")));
        }
        Ok(ComplexTrace { grid, values, path })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn path(&self) -> &PortPath {
        &self.path
    }
}

/// Decode interleaved (re, im) little-endian f64 pairs from a block.
pub fn decode_real64_block(bytes: &[u8]) -> Result<Vec<f64>, VnaError> {
    if bytes.len() % 8 != 0 {
        return Err(VnaError::Decode(format!(
            "block length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn encode_real64(values: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 16);
    for v in values {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

/// Turn a flat list of numbers into complex points for an `n_points` sweep.
pub fn pair_values(numbers: &[f64], n_points: usize) -> Result<Vec<Complex64>, VnaError> {
    if numbers.len() % 2 != 0 {
        return Err(VnaError::Decode(format!(
            "odd count of numbers ({}) cannot form re/im pairs",
            numbers.len()
        )));
    }
    if numbers.len() != 2 * n_points {
        return Err(VnaError::Decode(format!(
            "length mismatch: {} numbers for {} points (expected {})",
            numbers.len(),
            n_points,
            2 * n_points
        )));
    }
    Ok(numbers
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect())
}

pub fn decode_trace_response(response: &Response, n_points: usize) -> Result<Vec<Complex64>, VnaError> {
    let numbers = match response {
        Response::Block(bytes) => decode_real64_block(bytes)?,
        Response::Ascii(text) => {
            if let Some(err) = InstrumentError::parse(text) {
                return Err(VnaError::Instrument(err));
            }
            text.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| VnaError::Decode(format!("bad number {t:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    pair_values(&numbers, n_points)
}

/// Rig-state notifications a simulated instrument may want to observe.
#[derive(Debug, Clone, PartialEq)]
pub enum RigEvent {
    Pins(BTreeSet<Pin>),
    StepperPosition(i64),
}

/// What the acquisition engine needs from an RF instrument.
pub trait RfInstrument: Send {
    fn identify(&mut self) -> Result<String, VnaError>;
    fn configure_sweep(&mut self, grid: &FrequencyGrid) -> Result<(), VnaError>;
    fn min_sweep_time(&mut self) -> Result<Duration, VnaError>;
    fn trigger_and_read(&mut self, path: &PortPath) -> Result<ComplexTrace, VnaError>;
    fn rig_event(&mut self, _event: &RigEvent) -> Result<(), VnaError> {
        Ok(())
    }
}

/// SCPI VNA driver. Owns its connection.
#[derive(Debug)]
pub struct VnaClient {
    conn: ScpiConnection,
    grid: Option<FrequencyGrid>,
    sim_link: bool,
}

impl VnaClient {
    pub fn connect(address: &ResourceAddress, timeout: Duration) -> Result<Self, VnaError> {
        Ok(Self::new(ScpiConnection::connect(address, timeout)?))
    }

    pub fn new(conn: ScpiConnection) -> Self {
        VnaClient {
            conn,
            grid: None,
            sim_link: false,
        }
    }

    /// Forward rig events (pins, stepper position) to the instrument. Only
    /// the built-in simulator understands these commands.
    pub fn enable_sim_link(&mut self, on: bool) {
        self.sim_link = on;
    }

    pub fn connection(&mut self) -> &mut ScpiConnection {
        &mut self.conn
    }

    pub fn grid(&self) -> Option<&FrequencyGrid> {
        self.grid.as_ref()
    }

    fn query_ascii(&mut self, body: &str) -> Result<String, VnaError> {
        match self.conn.query(body)? {
            Response::Ascii(s) => match InstrumentError::parse(&s) {
                Some(e) => Err(VnaError::Instrument(e)),
                None => Ok(s),
            },
            Response::Block(_) => Err(VnaError::UnexpectedResponse {
                query: body.to_string(),
                response: "<block>".into(),
            }),
        }
    }

    fn query_f64(&mut self, body: &str) -> Result<f64, VnaError> {
        let s = self.query_ascii(body)?;
        s.trim().parse().map_err(|_| VnaError::UnexpectedResponse {
            query: body.to_string(),
            response: s,
        })
    }

    /// Send commands, then synchronise with `*OPC?`. Error lines emitted by
    /// the instrument before the `1` are collected.
    fn write_synced(&mut self, bodies: &[String]) -> Result<(), Vec<InstrumentError>> {
        let io_err = |e: ConnectionError| vec![InstrumentError::new(0, e.to_string())];
        for b in bodies {
            self.conn.write(b).map_err(io_err)?;
        }
        self.conn.write("*OPC?").map_err(io_err)?;
        let mut errors = Vec::new();
        loop {
            match self.conn.read_response().map_err(io_err)? {
                Response::Ascii(s) if s.trim() == "1" => break,
                Response::Ascii(s) => match InstrumentError::parse(&s) {
                    Some(e) => errors.push(e),
                    None => errors.push(InstrumentError::new(0, format!("unexpected response {s:?}"))),
                },
                Response::Block(_) => errors.push(InstrumentError::new(0, "unexpected block")),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    fn command(&mut self, bodies: &[String]) -> Result<(), VnaError> {
        self.write_synced(bodies).map_err(|mut errs| {
            let e = errs.remove(0);
            if e.code == 0 {
                VnaError::Connection(ConnectionError::Timeout)
            } else {
                VnaError::Instrument(e)
            }
        })
    }

    /// Send one command and synchronise; the first instrument error wins.
    pub fn send_command(&mut self, body: &str) -> Result<(), VnaError> {
        self.command(&[body.to_string()])
    }

    pub fn reset(&mut self) -> Result<(), VnaError> {
        self.grid = None;
        self.command(&["*RST".to_string()])
    }

    pub fn query_grid(&mut self) -> Result<(f64, f64, usize), VnaError> {
        let start = self.query_f64(":SENS:FREQ:STAR?")?;
        let stop = self.query_f64(":SENS:FREQ:STOP?")?;
        let points = self.query_f64(":SENS:SWE:POIN?")?;
        Ok((start, stop, points as usize))
    }

    pub fn calibration_state(&mut self) -> Result<String, VnaError> {
        self.query_ascii(":SENS:CORR:STAT?")
    }
}

/// Connect and identify. Rig events are forwarded only when the peer is
/// the built-in simulator.
pub fn connect_instrument(address: &ResourceAddress, timeout: Duration) -> Result<VnaClient, VnaError> {
    let mut client = VnaClient::connect(address, timeout)?;
    let id = client.identify()?;
    client.enable_sim_link(id.trim() == crate::sim::vna::IDENTITY);
    Ok(client)
}

impl RfInstrument for VnaClient {
    fn identify(&mut self) -> Result<String, VnaError> {
        self.query_ascii("*IDN?")
    }

    fn configure_sweep(&mut self, grid: &FrequencyGrid) -> Result<(), VnaError> {
        let cmds = vec![
            format!(":SENS:SWE:POIN {}", grid.n_points()),
            format!(":SENS:FREQ:STAR {}", grid.start_hz()),
            format!(":SENS:FREQ:STOP {}", grid.stop_hz()),
            ":FORM:DATA REAL,64".to_string(),
        ];
        self.write_synced(&cmds).map_err(|errs| {
            let e = errs.into_iter().next().expect("non-empty");
            if e.code == 0 {
                VnaError::Connection(ConnectionError::Timeout)
            } else {
                VnaError::Rejected(e)
            }
        })?;
        let (start, stop, points) = self.query_grid()?;
        if start != grid.start_hz() || stop != grid.stop_hz() || points != grid.n_points() {
            return Err(VnaError::Readback(format!(
                "instrument reports {start}..{stop} Hz / {points} points"
            )));
        }
        self.grid = Some(*grid);
        Ok(())
    }

    fn min_sweep_time(&mut self) -> Result<Duration, VnaError> {
        let s = self.query_f64(":SENS:SWE:TIME?")?;
        if !s.is_finite() || s < 0.0 {
            return Err(VnaError::UnexpectedResponse {
                query: ":SENS:SWE:TIME?".into(),
                response: s.to_string(),
            });
        }
        Ok(Duration::from_secs_f64(s))
    }

    fn trigger_and_read(&mut self, path: &PortPath) -> Result<ComplexTrace, VnaError> {
        let grid = self.grid.ok_or(VnaError::NotConfigured)?;
        self.command(&[":INIT:IMM".to_string()])?;
        let response = self.conn.query(":CALC:DATA? SDATA")?;
        let values = decode_trace_response(&response, grid.n_points())?;
        ComplexTrace::new(grid, values, path.clone())
    }

    fn rig_event(&mut self, event: &RigEvent) -> Result<(), VnaError> {
        if !self.sim_link {
            return Ok(());
        }
        let body = match event {
            RigEvent::Pins(pins) => {
                let list: Vec<&str> = pins.iter().map(|p| p.as_str()).collect();
                if list.is_empty() {
                    ":SIM:RIG:PINS NONE".to_string()
                } else {
                    format!(":SIM:RIG:PINS {}", list.join(","))
                }
            }
            RigEvent::StepperPosition(p) => format!(":SIM:RIG:STEP {p}"),
        };
        self.command(&[body])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_invariants() {
        assert!(FrequencyGrid::new(20e6, 60e6, 101).is_ok());
        assert!(FrequencyGrid::new(34e6, 34e6, 1).is_ok());
        assert!(FrequencyGrid::new(60e6, 20e6, 101).is_err());
        assert!(FrequencyGrid::new(20e6, 60e6, 0).is_err());
        assert!(FrequencyGrid::new(20e6, 60e6, 1).is_err());
        assert!(FrequencyGrid::new(f64::NAN, 60e6, 2).is_err());
        let g = FrequencyGrid::new(20e6, 60e6, 101).unwrap();
        let f = g.frequencies();
        assert_eq!(f[0], 20e6);
        assert_eq!(f[100], 60e6);
        assert_eq!(f[50], 40e6);
        assert_eq!(FrequencyGrid::from_frequencies(&f).unwrap(), g);
        assert!(FrequencyGrid::from_frequencies(&[1.0, 2.0, 4.0]).is_err());
    }

    #[test]
    fn grid_serde_validates() {
        let g: FrequencyGrid =
            serde_json::from_str(r#"{"start_hz":2e7,"stop_hz":6e7,"n_points":101}"#).unwrap();
        assert_eq!(g.n_points(), 101);
        assert!(serde_json::from_str::<FrequencyGrid>(r#"{"start_hz":6e7,"stop_hz":2e7,"n_points":101}"#).is_err());
    }

    #[test]
    fn decode_rejects_bad_lengths() {
        let text: Vec<String> = (0..200).map(|i| i.to_string()).collect();
        let r = Response::Ascii(text.join(","));
        let err = decode_trace_response(&r, 101).unwrap_err();
        assert!(matches!(err, VnaError::Decode(_)), "{err}");

        let odd = Response::Ascii("1,2,3".into());
        assert!(decode_trace_response(&odd, 1).unwrap_err().to_string().contains("odd"));

        assert!(decode_real64_block(&[0u8; 7]).is_err());
    }

    #[test]
    fn decode_block_and_ascii_agree() {
        let vals = vec![Complex64::new(1.0, -0.5), Complex64::new(0.25, 2.0)];
        let block = Response::Block(encode_real64(&vals));
        assert_eq!(decode_trace_response(&block, 2).unwrap(), vals);
        let ascii = Response::Ascii("1,-0.5,0.25,2".into());
        assert_eq!(decode_trace_response(&ascii, 2).unwrap(), vals);
    }

    #[test]
    fn trace_rejects_non_finite() {
        let g = FrequencyGrid::single(34e6).unwrap();
        assert!(ComplexTrace::new(g, vec![Complex64::new(f64::NAN, 0.0)], PortPath::direct()).is_err());
        assert!(ComplexTrace::new(g, vec![], PortPath::direct()).is_err());
    }
}
