//! Simulated 2-port VNA: state and the SCPI dialect it answers.
//!
//! | header                        | set                    | query            |
//! |-------------------------------|------------------------|------------------|
//! | `*IDN?`                       |                        | identity         |
//! | `*RST`                        | defaults               |                  |
//! | `*OPC?`                       |                        | `1`              |
//! | `:SENSe:FREQuency:STARt`      | Hz                     | Hz               |
//! | `:SENSe:FREQuency:STOP`       | Hz                     | Hz               |
//! | `:SENSe:SWEep:POINts`         | 1..=10001              | count            |
//! | `:SENSe:SWEep:TIME?`          |                        | min sweep, s     |
//! | `:SENSe:CORRection:STATe`     | `ON`/`OFF`/`1`/`0`     | `1`/`0`          |
//! | `:FORMat:DATA`                | `REAL,64` / `ASCii`    | `REAL,64`/`ASC`  |
//! | `:INITiate:IMMediate`         | run one sweep          |                  |
//! | `:CALCulate:DATA? SDATA`      |                        | trace            |
//! | `:SIMulation:SCENario`        | `THRU`/`TOMO`/`LOOP`   | name             |
//! | `:SIMulation:TOMOgraphy:POSition` | `NONE`/`A`/`B`/`C` | name             |
//! | `:SIMulation:RIG:PINS`        | `GP0,GP2` / `NONE`     | pin list         |
//! | `:SIMulation:RIG:STEP`        | stepper position       | position         |
//!
//! Successful commands produce no output. Any rejected message produces one
//! `-<code>,"<text>"` line; the connection is never closed on bad input.

use std::collections::BTreeSet;
use std::time::Duration;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::wall_clock_ms;
use crate::scpi::{encode_block, InstrumentError, ScpiMessage};
use crate::sim::models::{tomography_s21, LoopScenario, ScattererPosition, TomographyScenario};
use crate::switch::Pin;
use crate::vna::{FrequencyGrid, PortPath};

pub const IDENTITY: &str = "MPADA,SIMVNA,0,1.0";
pub const MIN_FREQ_HZ: f64 = 10e3;
pub const MAX_FREQ_HZ: f64 = 6e9;
pub const MAX_POINTS: usize = 10_001;

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    IdealThrough,
    Tomography(TomographyScenario),
    Loop(LoopScenario),
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::IdealThrough => "THRU",
            Scenario::Tomography(_) => "TOMO",
            Scenario::Loop(_) => "LOOP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Real64,
    Ascii,
}

/// Knobs that are not reachable over SCPI.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub min_sweep_time: Duration,
    /// Sleep for the sweep time on `:INIT:IMM`.
    pub emulate_sweep_time: bool,
    /// Extra uniform response latency in [0, max) on `:INIT:IMM`.
    pub latency_jitter: Duration,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scenario: Scenario::IdealThrough,
            min_sweep_time: Duration::from_millis(20),
            emulate_sweep_time: false,
            latency_jitter: Duration::ZERO,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn with_scenario(mut self, scenario: Scenario) -> Self {
        self.scenario = scenario;
        self
    }

    /// Realistic timing: real sweep delay plus 0-3 ms latency jitter.
    pub fn realistic(mut self) -> Self {
        self.emulate_sweep_time = true;
        self.latency_jitter = Duration::from_millis(3);
        self
    }
}

#[derive(Debug, Clone)]
pub struct SimVnaState {
    start_hz: f64,
    stop_hz: f64,
    points: usize,
    format: DataFormat,
    calibrated: bool,
    scenario: Scenario,
    min_sweep_time: Duration,
    emulate_sweep_time: bool,
    latency_jitter: Duration,
    rng: ChaCha8Rng,
    last_trace: Option<Vec<Complex64>>,
    pins: BTreeSet<Pin>,
    stepper_position: i64,
    pin_log: Vec<BTreeSet<Pin>>,
    sweeps: u64,
}

const DEFAULT_START: f64 = 20e6;
const DEFAULT_STOP: f64 = 60e6;
const DEFAULT_POINTS: usize = 101;

impl SimVnaState {
    pub fn new(config: SimConfig) -> Self {
        SimVnaState {
            start_hz: DEFAULT_START,
            stop_hz: DEFAULT_STOP,
            points: DEFAULT_POINTS,
            format: DataFormat::Real64,
            calibrated: false,
            scenario: config.scenario,
            min_sweep_time: config.min_sweep_time,
            emulate_sweep_time: config.emulate_sweep_time,
            latency_jitter: config.latency_jitter,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            last_trace: None,
            pins: BTreeSet::new(),
            stepper_position: 0,
            pin_log: Vec::new(),
            sweeps: 0,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn set_scenario(&mut self, scenario: Scenario) {
        self.scenario = scenario;
        self.last_trace = None;
    }

    pub fn pin_log(&self) -> &[BTreeSet<Pin>] {
        &self.pin_log
    }

    pub fn stepper_position(&self) -> i64 {
        self.stepper_position
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }

    fn reset(&mut self) {
        self.start_hz = DEFAULT_START;
        self.stop_hz = DEFAULT_STOP;
        self.points = DEFAULT_POINTS;
        self.format = DataFormat::Real64;
        self.calibrated = false;
        self.last_trace = None;
    }

    /// Stable small code for the active pin set; selects the background.
    fn path_code(&self) -> u32 {
        self.pins.iter().fold(0u32, |acc, p| acc.wrapping_mul(31).wrapping_add(p.number() + 1))
    }

    fn sweep(&mut self) -> Result<(), InstrumentError> {
        let grid = FrequencyGrid::new(self.start_hz, self.stop_hz, self.points)
            .map_err(|e| InstrumentError::new(-221, format!("Settings conflict; {e}")))?;
        let values = match &self.scenario {
            Scenario::IdealThrough => vec![Complex64::new(1.0, 0.0); grid.n_points()],
            Scenario::Tomography(scn) => {
                let m = scn.angle_index(self.stepper_position);
                tomography_s21(scn, m, &grid, &PortPath::direct(), self.path_code())
                    .map_err(|e| InstrumentError::new(-221, format!("Settings conflict; {e}")))?
                    .values()
                    .to_vec()
            }
            Scenario::Loop(scn) => {
                let theta = scn.theta_at(wall_clock_ms());
                grid.frequencies().iter().map(|&f| scn.s21(theta, f)).collect()
            }
        };
        if self.emulate_sweep_time {
            let mut delay = self.min_sweep_time;
            if !self.latency_jitter.is_zero() {
                delay += self.latency_jitter.mul_f64(self.rng.gen::<f64>());
            }
            std::thread::sleep(delay);
        }
        self.sweeps += 1;
        self.last_trace = Some(values);
        Ok(())
    }
}

/// Match one header against a pattern such as `:SENSe:FREQuency:STARt`.
/// Each node may be given in short (uppercase part) or long form, in any case.
fn header_matches(header: &str, pattern: &str) -> bool {
    let h: Vec<&str> = header.trim_start_matches(':').split(':').collect();
    let p: Vec<&str> = pattern.trim_start_matches(':').split(':').collect();
    h.len() == p.len()
        && h.iter().zip(&p).all(|(hn, pn)| {
            let short: String = pn.chars().filter(|c| !c.is_ascii_lowercase()).collect();
            hn.eq_ignore_ascii_case(pn) || hn.eq_ignore_ascii_case(&short)
        })
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn parse_frequency(arg: &str) -> Option<f64> {
    let a = arg.trim();
    let upper = a.to_ascii_uppercase();
    let (num, scale) = [("GHZ", 1e9), ("MHZ", 1e6), ("KHZ", 1e3), ("HZ", 1.0)]
        .iter()
        .find_map(|(suffix, scale)| upper.strip_suffix(suffix).map(|n| (n.trim().to_string(), *scale)))
        .unwrap_or((upper.clone(), 1.0));
    let v: f64 = num.parse().ok()?;
    let v = v * scale;
    v.is_finite().then_some(v)
}

fn parse_bool(arg: &str) -> Option<bool> {
    match arg.trim().to_ascii_uppercase().as_str() {
        "1" | "ON" => Some(true),
        "0" | "OFF" => Some(false),
        _ => None,
    }
}

fn undefined() -> InstrumentError {
    InstrumentError::new(-113, "Undefined header")
}

fn missing() -> InstrumentError {
    InstrumentError::new(-109, "Missing parameter")
}

fn data_type() -> InstrumentError {
    InstrumentError::new(-104, "Data type error")
}

fn out_of_range() -> InstrumentError {
    InstrumentError::new(-222, "Data out of range")
}

/// Process one message; returns the bytes to send back (possibly none).
pub fn vna_sim_respond(state: &mut SimVnaState, message: &ScpiMessage) -> Vec<u8> {
    match respond(state, message) {
        Ok(Some(bytes)) => bytes,
        Ok(None) => Vec::new(),
        Err(e) => e.to_line().into_bytes(),
    }
}

fn line(s: impl Into<String>) -> Option<Vec<u8>> {
    let mut v = s.into().into_bytes();
    v.push(b'\n');
    Some(v)
}

fn respond(state: &mut SimVnaState, message: &ScpiMessage) -> Result<Option<Vec<u8>>, InstrumentError> {
    let header_full = message.header();
    let is_query = message.is_query();
    let header = header_full.trim_end_matches('?');
    let arg = message.arguments();

    if header.starts_with('*') {
        return match (header.to_ascii_uppercase().as_str(), is_query) {
            ("*IDN", true) => Ok(line(IDENTITY)),
            ("*OPC", true) => Ok(line("1")),
            ("*RST", false) => {
                state.reset();
                Ok(None)
            }
            ("*CLS", false) | ("*OPC", false) => Ok(None),
            _ => Err(undefined()),
        };
    }

    if header_matches(header, ":SENSe:FREQuency:STARt") || header_matches(header, ":SENSe:FREQuency:STOP") {
        let is_start = header_matches(header, ":SENSe:FREQuency:STARt");
        if is_query {
            let v = if is_start { state.start_hz } else { state.stop_hz };
            return Ok(line(fmt_num(v)));
        }
        if arg.is_empty() {
            return Err(missing());
        }
        let v = parse_frequency(arg).ok_or_else(data_type)?;
        if !(MIN_FREQ_HZ..=MAX_FREQ_HZ).contains(&v) {
            return Err(out_of_range());
        }
        if is_start {
            state.start_hz = v;
        } else {
            state.stop_hz = v;
        }
        state.last_trace = None;
        return Ok(None);
    }

    if header_matches(header, ":SENSe:SWEep:POINts") {
        if is_query {
            return Ok(line(state.points.to_string()));
        }
        if arg.is_empty() {
            return Err(missing());
        }
        let n: usize = arg.trim().parse().map_err(|_| data_type())?;
        if !(1..=MAX_POINTS).contains(&n) {
            return Err(out_of_range());
        }
        state.points = n;
        state.last_trace = None;
        return Ok(None);
    }

    if header_matches(header, ":SENSe:SWEep:TIME") {
        return if is_query {
            Ok(line(fmt_num(state.min_sweep_time.as_secs_f64())))
        } else {
            Err(undefined())
        };
    }

    if header_matches(header, ":SENSe:CORRection:STATe") {
        if is_query {
            return Ok(line(if state.calibrated { "1" } else { "0" }));
        }
        state.calibrated = parse_bool(arg).ok_or_else(data_type)?;
        return Ok(None);
    }

    if header_matches(header, ":FORMat:DATA") || header_matches(header, ":FORMat") {
        if is_query {
            return Ok(line(match state.format {
                DataFormat::Real64 => "REAL,64",
                DataFormat::Ascii => "ASC",
            }));
        }
        let a = arg.replace(' ', "").to_ascii_uppercase();
        state.format = match a.as_str() {
            "REAL,64" | "REAL" => DataFormat::Real64,
            "ASC" | "ASCII" => DataFormat::Ascii,
            "" => return Err(missing()),
            _ => return Err(data_type()),
        };
        return Ok(None);
    }

    if header_matches(header, ":INITiate:IMMediate") || header_matches(header, ":INITiate") {
        if is_query {
            return Err(undefined());
        }
        state.sweep()?;
        return Ok(None);
    }

    if header_matches(header, ":CALCulate:DATA") {
        if !is_query {
            return Err(undefined());
        }
        let a = arg.to_ascii_uppercase();
        if a != "SDATA" && a != "SDAT" {
            return Err(InstrumentError::new(-224, "Illegal parameter value"));
        }
        let trace = state
            .last_trace
            .as_ref()
            .ok_or_else(|| InstrumentError::new(-230, "Data corrupt or stale"))?;
        return Ok(Some(match state.format {
            DataFormat::Real64 => {
                let mut b = encode_block(&crate::vna::encode_real64(trace))
                    .map_err(|_| InstrumentError::new(-223, "Too much data"))?;
                b.push(b'\n');
                b
            }
            DataFormat::Ascii => {
                let nums: Vec<String> = trace
                    .iter()
                    .flat_map(|v| [fmt_num(v.re), fmt_num(v.im)])
                    .collect();
                line(nums.join(",")).expect("some")
            }
        }));
    }

    if header_matches(header, ":SIMulation:SCENario") {
        if is_query {
            return Ok(line(state.scenario.name()));
        }
        let scn = match arg.to_ascii_uppercase().as_str() {
            "THRU" => Scenario::IdealThrough,
            "TOMO" => Scenario::Tomography(TomographyScenario::default()),
            "LOOP" => Scenario::Loop(LoopScenario::default()),
            "" => return Err(missing()),
            _ => return Err(InstrumentError::new(-224, "Illegal parameter value")),
        };
        if scn.name() != state.scenario.name() {
            state.set_scenario(scn);
        }
        return Ok(None);
    }

    if header_matches(header, ":SIMulation:TOMOgraphy:POSition") {
        let Scenario::Tomography(scn) = &mut state.scenario else {
            return Err(InstrumentError::new(-221, "Settings conflict; scenario is not TOMO"));
        };
        if is_query {
            return Ok(line(scn.position.as_str()));
        }
        if arg.is_empty() {
            return Err(missing());
        }
        scn.position = ScattererPosition::parse(arg)
            .ok_or_else(|| InstrumentError::new(-224, "Illegal parameter value"))?;
        state.last_trace = None;
        return Ok(None);
    }

    if header_matches(header, ":SIMulation:RIG:PINS") {
        if is_query {
            let list: Vec<&str> = state.pins.iter().map(Pin::as_str).collect();
            return Ok(line(if list.is_empty() { "NONE".to_string() } else { list.join(",") }));
        }
        if arg.is_empty() {
            return Err(missing());
        }
        let mut pins = BTreeSet::new();
        if !arg.eq_ignore_ascii_case("NONE") {
            for p in arg.split(',') {
                pins.insert(Pin::new(p.trim()).ok_or_else(data_type)?);
            }
        }
        state.pin_log.push(pins.clone());
        state.pins = pins;
        return Ok(None);
    }

    if header_matches(header, ":SIMulation:RIG:STEP") {
        if is_query {
            return Ok(line(state.stepper_position.to_string()));
        }
        if arg.is_empty() {
            return Err(missing());
        }
        state.stepper_position = arg.trim().parse().map_err(|_| data_type())?;
        return Ok(None);
    }

    Err(undefined())
}
