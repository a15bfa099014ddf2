//! Non-RF peripherals: a registry loaded from configuration, plus stepper,
//! Hall-effect and GPIO-bridge devices.
//!
//! Devices talk to hardware through small backend traits. Simulated backends
//! are the default. The serial backends implement the byte-level contract a
//! USB-to-UART microcontroller bridge would speak:
//!
//! ```text
//! host -> "STEP <n>\n"         device -> "OK\n" | "ERR <msg>\n"
//! host -> "FLUX?\n"            device -> "<bx>,<by>,<bz>\n"
//! host -> "PINS <GPa,GPb|NONE>\n"  device -> "OK\n" | "ERR <msg>\n"
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{wall_clock_ms, SessionClock};
use crate::config::OrderedMap;
use crate::sim::models::{sim_flux, LoopScenario};
use crate::switch::{Pin, PinDriver, SimPinDriver};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeripheralError {
    #[error("config: {0}")]
    Config(String),
    #[error("config: duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("config: {key}: unknown peripheral {module}/{object}")]
    UnknownPeripheral { key: String, module: String, object: String },
    #[error("{0}: n_steps must be >= 1")]
    InvalidSteps(String),
    #[error("{device}: bad actuation arguments: {reason}")]
    BadArguments { device: String, reason: String },
    #[error("{device}: sampling error: {reason}")]
    Sampling { device: String, reason: String },
    #[error("{device}: actuation error: {reason}")]
    Actuation { device: String, reason: String },
    #[error("degenerate field: Bx = By = 0")]
    DegenerateField,
    #[error("non-finite flux component")]
    NonFinite,
    #[error("angle {0} outside [0, 360)")]
    AngleRange(f64),
}

/// 3-axis magnetic flux, arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagneticFluxSample {
    b: [f64; 3],
}

impl MagneticFluxSample {
    pub fn new(b: [f64; 3]) -> Result<Self, PeripheralError> {
        if b.iter().all(|v| v.is_finite()) {
            Ok(MagneticFluxSample { b })
        } else {
            Err(PeripheralError::NonFinite)
        }
    }

    pub fn b(&self) -> [f64; 3] {
        self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSample {
    theta_deg: f64,
}

impl AngleSample {
    pub fn new(theta_deg: f64) -> Result<Self, PeripheralError> {
        if (0.0..360.0).contains(&theta_deg) {
            Ok(AngleSample { theta_deg })
        } else {
            Err(PeripheralError::AngleRange(theta_deg))
        }
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta_deg
    }
}

/// In-plane rotation angle, `atan2(By, Bx)` mapped into [0, 360).
pub fn flux_to_angle(b: &MagneticFluxSample) -> Result<AngleSample, PeripheralError> {
    let [bx, by, _] = b.b;
    if bx == 0.0 && by == 0.0 {
        return Err(PeripheralError::DegenerateField);
    }
    let mut deg = by.atan2(bx).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    // -0.0 and tiny negative angles can round up to exactly 360.
    if deg >= 360.0 {
        deg = 0.0;
    }
    AngleSample::new(deg)
}

/// A stepper/actuator event record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationEvent {
    pub t_ms: f64,
    pub device: String,
    pub event: String,
    pub n_steps: i64,
    pub position: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensorReading {
    Flux(MagneticFluxSample),
    Angle(AngleSample),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Sample,
    Actuate,
}

pub trait Sensor: Send {
    fn sample(&mut self) -> Result<SensorReading, PeripheralError>;
}

pub trait Actuator: Send {
    fn actuate(&mut self, args: &serde_json::Value, clock: &SessionClock) -> Result<ActuationEvent, PeripheralError>;
}

pub enum PeripheralHandle {
    Sensor(Box<dyn Sensor>),
    Actuator(Box<dyn Actuator>),
}

impl PeripheralHandle {
    pub fn capability(&self) -> Capability {
        match self {
            PeripheralHandle::Sensor(_) => Capability::Sample,
            PeripheralHandle::Actuator(_) => Capability::Actuate,
        }
    }
}

impl fmt::Debug for PeripheralHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PeripheralHandle({:?})", self.capability())
    }
}

/// One registry record: `{enable, module, object, label}` under a unique key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorFields {
    pub enable: bool,
    pub module: String,
    pub object: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeripheralDescriptor {
    pub key: String,
    pub enable: bool,
    pub module: String,
    pub object: String,
    pub label: String,
}

#[derive(Debug)]
pub struct Peripheral {
    pub descriptor: PeripheralDescriptor,
    pub handle: PeripheralHandle,
}

impl Peripheral {
    pub fn key(&self) -> &str {
        &self.descriptor.key
    }

    pub fn capability(&self) -> Capability {
        self.handle.capability()
    }
}

struct Kind {
    module: &'static str,
    object: &'static str,
    capability: Capability,
    build: fn(&str) -> PeripheralHandle,
}

const KNOWN_KINDS: &[Kind] = &[
    Kind {
        module: "rp2040_u2if_interface.core",
        object: "RP2040",
        capability: Capability::Actuate,
        build: |key| PeripheralHandle::Actuator(Box::new(GpioBridge::new(key, Box::new(SimPinDriver::new())))),
    },
    Kind {
        module: "generic_stepper.main",
        object: "GenericStepper",
        capability: Capability::Actuate,
        build: |key| PeripheralHandle::Actuator(Box::new(StepperMotor::new(key, Box::new(SimStepperBackend::default())))),
    },
    Kind {
        module: "hall_tlv493d.main",
        object: "TLV493D",
        capability: Capability::Sample,
        build: |key| PeripheralHandle::Sensor(Box::new(HallSensor::new(key, Box::new(SimHallBackend::new(LoopScenario::default()))))),
    },
];

/// Capability a (module, object) pair declares, if it is a known kind.
pub fn known_capability(module: &str, object: &str) -> Option<Capability> {
    KNOWN_KINDS
        .iter()
        .find(|k| k.module == module && k.object == object)
        .map(|k| k.capability)
}

/// Parsed registry: all descriptors, with the enabled ones instantiated.
#[derive(Debug, Default)]
pub struct Registry {
    descriptors: Vec<PeripheralDescriptor>,
    instances: Vec<Peripheral>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn descriptors(&self) -> &[PeripheralDescriptor] {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|p| p.key())
    }

    pub fn get(&self, key: &str) -> Option<&Peripheral> {
        self.instances.iter().find(|p| p.key() == key)
    }

    /// Look up by registry key, falling back to the descriptor's module path.
    pub fn resolve_key(&self, name: &str) -> Option<&str> {
        self.instances
            .iter()
            .find(|p| p.key() == name)
            .or_else(|| self.instances.iter().find(|p| p.descriptor.module == name))
            .map(|p| p.key())
    }

    pub fn capabilities(&self) -> Vec<(String, Capability)> {
        self.instances
            .iter()
            .map(|p| (p.key().to_string(), p.capability()))
            .collect()
    }

    /// Add an already-built peripheral (custom or fault-injecting backends).
    pub fn insert(&mut self, descriptor: PeripheralDescriptor, handle: PeripheralHandle) -> Result<(), PeripheralError> {
        if self.descriptors.iter().any(|d| d.key == descriptor.key) {
            return Err(PeripheralError::DuplicateKey(descriptor.key));
        }
        self.descriptors.push(descriptor.clone());
        if descriptor.enable {
            self.instances.push(Peripheral { descriptor, handle });
        }
        Ok(())
    }

    pub fn take(&mut self, key: &str) -> Option<Peripheral> {
        let idx = self.instances.iter().position(|p| p.key() == key)?;
        Some(self.instances.remove(idx))
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Peripheral> {
        self.instances.iter_mut().find(|p| p.key() == key)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Peripheral> {
        self.instances.iter_mut()
    }

    /// `(key, module, capability)` for every instantiated peripheral.
    pub fn entries(&self) -> Vec<(String, String, Capability)> {
        self.instances
            .iter()
            .map(|p| (p.key().to_string(), p.descriptor.module.clone(), p.capability()))
            .collect()
    }
}

/// Parse the raw document (JSON, or YAML of the same shape).
pub fn parse_registry_document(document: &str) -> Result<OrderedMap<DescriptorFields>, PeripheralError> {
    let trimmed = document.trim_start();
    let parsed = if trimmed.starts_with('{') {
        serde_json::from_str::<OrderedMap<DescriptorFields>>(document).map_err(|e| e.to_string())
    } else {
        serde_yaml::from_str::<OrderedMap<DescriptorFields>>(document).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| {
        if let Some(key) = e.split("duplicate key \"").nth(1).and_then(|r| r.split('"').next()) {
            PeripheralError::DuplicateKey(key.to_string())
        } else if e.contains("duplicate entry") {
            PeripheralError::DuplicateKey(e.clone())
        } else {
            PeripheralError::Config(e)
        }
    })
}

/// Build a registry from parsed entries. Only enabled entries are
/// instantiated; disabled ones are kept as descriptors.
pub fn registry_from_entries(entries: OrderedMap<DescriptorFields>) -> Result<Registry, PeripheralError> {
    let mut reg = Registry::default();
    for (key, f) in entries {
        let descriptor = PeripheralDescriptor {
            key: key.clone(),
            enable: f.enable,
            module: f.module,
            object: f.object,
            label: f.label,
        };
        if !descriptor.enable {
            reg.descriptors.push(descriptor);
            continue;
        }
        let kind = KNOWN_KINDS
            .iter()
            .find(|k| k.module == descriptor.module && k.object == descriptor.object)
            .ok_or_else(|| PeripheralError::UnknownPeripheral {
                key: key.clone(),
                module: descriptor.module.clone(),
                object: descriptor.object.clone(),
            })?;
        let handle = (kind.build)(&key);
        reg.insert(descriptor, handle)?;
    }
    Ok(reg)
}

/// Load a registry document (JSON or YAML).
pub fn load_registry(document: &str) -> Result<Registry, PeripheralError> {
    registry_from_entries(parse_registry_document(document)?)
}

// ---- stepper ----

pub trait StepperBackend: Send {
    fn pulse(&mut self, n_steps: i64) -> Result<(), String>;
}

/// Open-loop simulated stepper. Optionally fails on the given call number
/// (0-based) to exercise error paths.
#[derive(Debug, Default)]
pub struct SimStepperBackend {
    calls: usize,
    fail_on_call: Option<usize>,
}

impl SimStepperBackend {
    pub fn failing_on(call: usize) -> Self {
        SimStepperBackend {
            calls: 0,
            fail_on_call: Some(call),
        }
    }
}

impl StepperBackend for SimStepperBackend {
    fn pulse(&mut self, _n_steps: i64) -> Result<(), String> {
        let call = self.calls;
        self.calls += 1;
        if self.fail_on_call == Some(call) {
            return Err("driver fault".into());
        }
        Ok(())
    }
}

/// Stepper motor with a software (open-loop) position counter.
pub struct StepperMotor {
    key: String,
    position: i64,
    backend: Box<dyn StepperBackend>,
}

impl StepperMotor {
    pub fn new(key: &str, backend: Box<dyn StepperBackend>) -> Self {
        StepperMotor {
            key: key.to_string(),
            position: 0,
            backend,
        }
    }

    pub fn position(&self) -> i64 {
        self.position
    }

    pub fn advance(&mut self, n_steps: i64, clock: &SessionClock) -> Result<ActuationEvent, PeripheralError> {
        if n_steps < 1 {
            return Err(PeripheralError::InvalidSteps(self.key.clone()));
        }
        self.backend
            .pulse(n_steps)
            .map_err(|reason| PeripheralError::Actuation {
                device: self.key.clone(),
                reason,
            })?;
        self.position += n_steps;
        Ok(ActuationEvent {
            t_ms: clock.now_ms(),
            device: self.key.clone(),
            event: "advance".into(),
            n_steps,
            position: self.position,
        })
    }
}

impl Actuator for StepperMotor {
    fn actuate(&mut self, args: &serde_json::Value, clock: &SessionClock) -> Result<ActuationEvent, PeripheralError> {
        let n = args
            .get("n_steps")
            .and_then(serde_json::Value::as_i64)
            .ok_or_else(|| PeripheralError::BadArguments {
                device: self.key.clone(),
                reason: "expected {\"n_steps\": <integer>}".into(),
            })?;
        self.advance(n, clock)
    }
}

// ---- Hall sensor ----

pub trait HallBackend: Send {
    fn read(&mut self) -> Result<[f64; 3], String>;
}

/// Hall flux derived from the loop scenario's current true angle.
#[derive(Debug, Clone)]
pub struct SimHallBackend {
    scenario: LoopScenario,
    connected: bool,
}

impl SimHallBackend {
    pub fn new(scenario: LoopScenario) -> Self {
        SimHallBackend {
            scenario,
            connected: true,
        }
    }

    pub fn disconnected(scenario: LoopScenario) -> Self {
        SimHallBackend {
            scenario,
            connected: false,
        }
    }
}

impl HallBackend for SimHallBackend {
    fn read(&mut self) -> Result<[f64; 3], String> {
        if !self.connected {
            return Err("device not connected".into());
        }
        Ok(sim_flux(&self.scenario, wall_clock_ms()).b())
    }
}

pub struct HallSensor {
    key: String,
    backend: Box<dyn HallBackend>,
}

impl HallSensor {
    pub fn new(key: &str, backend: Box<dyn HallBackend>) -> Self {
        HallSensor {
            key: key.to_string(),
            backend,
        }
    }

    pub fn read_flux(&mut self) -> Result<MagneticFluxSample, PeripheralError> {
        let b = self.backend.read().map_err(|reason| PeripheralError::Sampling {
            device: self.key.clone(),
            reason,
        })?;
        MagneticFluxSample::new(b).map_err(|e| PeripheralError::Sampling {
            device: self.key.clone(),
            reason: e.to_string(),
        })
    }
}

impl Sensor for HallSensor {
    fn sample(&mut self) -> Result<SensorReading, PeripheralError> {
        self.read_flux().map(SensorReading::Flux)
    }
}

// ---- GPIO bridge ----

/// Microcontroller GPIO bridge. Actuation args: `{"pins": ["GP0", ...]}`
/// drives exactly those pins high among all pins it has seen.
pub struct GpioBridge {
    key: String,
    driver: Box<dyn PinDriver>,
    bank: BTreeSet<Pin>,
}

impl GpioBridge {
    pub fn new(key: &str, driver: Box<dyn PinDriver>) -> Self {
        GpioBridge {
            key: key.to_string(),
            driver,
            bank: BTreeSet::new(),
        }
    }
}

impl Actuator for GpioBridge {
    fn actuate(&mut self, args: &serde_json::Value, clock: &SessionClock) -> Result<ActuationEvent, PeripheralError> {
        let bad = |reason: &str| PeripheralError::BadArguments {
            device: self.key.clone(),
            reason: reason.to_string(),
        };
        let list = args
            .get("pins")
            .and_then(serde_json::Value::as_array)
            .ok_or_else(|| bad("expected {\"pins\": [..]}"))?;
        let mut high = BTreeSet::new();
        for v in list {
            let pin = v.as_str().and_then(Pin::new).ok_or_else(|| bad("invalid pin name"))?;
            high.insert(pin);
        }
        self.bank.extend(high.iter().cloned());
        self.driver
            .drive(&high, &self.bank)
            .map_err(|e| PeripheralError::Actuation {
                device: self.key.clone(),
                reason: e.to_string(),
            })?;
        Ok(ActuationEvent {
            t_ms: clock.now_ms(),
            device: self.key.clone(),
            event: "set_pins".into(),
            n_steps: 0,
            position: high.len() as i64,
        })
    }
}

// ---- serial bridge backends ----

/// Line-oriented request/response over any byte stream.
pub struct SerialLink<S: Read + Write> {
    stream: BufReader<S>,
}

impl<S: Read + Write> SerialLink<S> {
    pub fn new(stream: S) -> Self {
        SerialLink {
            stream: BufReader::new(stream),
        }
    }

    pub fn transact(&mut self, request: &str) -> Result<String, String> {
        let inner = self.stream.get_mut();
        inner
            .write_all(request.as_bytes())
            .and_then(|_| inner.write_all(b"\n"))
            .and_then(|_| inner.flush())
            .map_err(|e| format!("write: {e}"))?;
        let mut line = String::new();
        let n = self
            .stream
            .read_line(&mut line)
            .map_err(|e| format!("read: {e}"))?;
        if n == 0 {
            return Err("device not connected".into());
        }
        let line = line.trim_end().to_string();
        match line.strip_prefix("ERR") {
            Some(msg) => Err(msg.trim().to_string()),
            None => Ok(line),
        }
    }
}

impl<S: Read + Write + Send> StepperBackend for SerialLink<S> {
    fn pulse(&mut self, n_steps: i64) -> Result<(), String> {
        match self.transact(&format!("STEP {n_steps}"))?.as_str() {
            "OK" => Ok(()),
            other => Err(format!("unexpected reply {other:?}")),
        }
    }
}

impl<S: Read + Write + Send> HallBackend for SerialLink<S> {
    fn read(&mut self) -> Result<[f64; 3], String> {
        let reply = self.transact("FLUX?")?;
        let parts: Vec<f64> = reply
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("bad flux reply {reply:?}"))?;
        match parts.as_slice() {
            [x, y, z] => Ok([*x, *y, *z]),
            _ => Err(format!("bad flux reply {reply:?}")),
        }
    }
}

impl<S: Read + Write + Send> PinDriver for SerialLink<S> {
    fn drive(&mut self, high: &BTreeSet<Pin>, _bank: &BTreeSet<Pin>) -> Result<(), crate::switch::SwitchError> {
        let list = if high.is_empty() {
            "NONE".to_string()
        } else {
            high.iter().map(Pin::as_str).collect::<Vec<_>>().join(",")
        };
        match self.transact(&format!("PINS {list}")) {
            Ok(ref s) if s == "OK" => Ok(()),
            Ok(s) => Err(crate::switch::SwitchError::Driver(format!("unexpected reply {s:?}"))),
            Err(e) => Err(crate::switch::SwitchError::Driver(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    const LISTING1: &str = r#"rp2040_u2if_interface_core:
  enable: True
  module: rp2040_u2if_interface.core
  object: RP2040
  label: "RP2040 U2IF Resource Manager"
tof_rp2040_u2if:
  enable: False
  module: tof_rp2040_u2if.vl53l0x.main
  object: VL53L0X
  label: "VL53L0X RP2040 U2IF"
"#;

    #[test]
    fn listing_document_instantiates_enabled_only() {
        let reg = load_registry(LISTING1).unwrap();
        assert_eq!(reg.descriptors().len(), 2);
        assert_eq!(reg.len(), 1);
        let p = reg.get("rp2040_u2if_interface_core").unwrap();
        assert_eq!(p.descriptor.label, "RP2040 U2IF Resource Manager");
        assert_eq!(p.capability(), Capability::Actuate);
        assert!(reg.get("tof_rp2040_u2if").is_none());
    }

    #[test]
    fn registry_edge_cases() {
        assert!(load_registry("{}").unwrap().is_empty());
        assert!(load_registry("").unwrap().is_empty());
        let dup = r#"{"a": {"enable": false, "module": "m", "object": "o", "label": "l"},
                      "a": {"enable": false, "module": "m", "object": "o", "label": "l"}}"#;
        assert!(matches!(load_registry(dup), Err(PeripheralError::DuplicateKey(_))));
        let dup_yaml = "a:\n  enable: false\n  module: m\n  object: o\n  label: l\na:\n  enable: false\n  module: m\n  object: o\n  label: l\n";
        assert!(matches!(load_registry(dup_yaml), Err(PeripheralError::DuplicateKey(_))));
        let unknown = r#"{"x": {"enable": true, "module": "nope", "object": "Nope", "label": "l"}}"#;
        assert!(matches!(load_registry(unknown), Err(PeripheralError::UnknownPeripheral { .. })));
        let extra = r#"{"x": {"enable": true, "module": "m", "object": "o", "label": "l", "port": 3}}"#;
        assert!(matches!(load_registry(extra), Err(PeripheralError::Config(_))));
    }

    #[test]
    fn instantiation_count_matches_enabled() {
        let doc = r#"{
            "stepper": {"enable": true, "module": "generic_stepper.main", "object": "GenericStepper", "label": "s"},
            "hall": {"enable": true, "module": "hall_tlv493d.main", "object": "TLV493D", "label": "h"},
            "off": {"enable": false, "module": "hall_tlv493d.main", "object": "TLV493D", "label": "h2"}
        }"#;
        let reg = load_registry(doc).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.get("hall").unwrap().capability(), Capability::Sample);
        assert_eq!(reg.resolve_key("generic_stepper.main"), Some("stepper"));
    }

    #[test]
    fn stepper_advances() {
        let clock = SessionClock::start();
        let mut s = StepperMotor::new("stepper", Box::new(SimStepperBackend::default()));
        let ev = s.advance(5, &clock).unwrap();
        assert_eq!(ev.position, 5);
        assert_eq!(ev.n_steps, 5);
        for _ in 1..72 {
            s.advance(5, &clock).unwrap();
        }
        assert_eq!(s.position(), 360);
        assert_eq!(s.advance(0, &clock), Err(PeripheralError::InvalidSteps("stepper".into())));
        assert!(s.actuate(&serde_json::json!({"n_steps": "x"}), &clock).is_err());
        assert_eq!(s.position(), 360);
    }

    #[test]
    fn flux_to_angle_examples() {
        let a = |b: [f64; 3]| flux_to_angle(&MagneticFluxSample::new(b).unwrap()).map(|a| a.theta_deg());
        assert_eq!(a([1.0, 0.0, 0.2]).unwrap(), 0.0);
        assert_eq!(a([0.0, 1.0, -0.1]).unwrap(), 90.0);
        assert_eq!(a([-1.0, 0.0, 0.0]).unwrap(), 180.0);
        assert!((a([0.0, -1.0, 0.0]).unwrap() - 270.0).abs() < 1e-12);
        assert_eq!(a([0.0, 0.0, 1.0]), Err(PeripheralError::DegenerateField));
        assert!(a([1.0, -0.0, 0.0]).unwrap() < 360.0);
        assert!(a([1.0, -1e-300, 0.0]).unwrap() < 360.0);
        assert!(MagneticFluxSample::new([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn hall_disconnected_is_sampling_error() {
        let mut h = HallSensor::new("hall", Box::new(SimHallBackend::disconnected(LoopScenario::default())));
        assert!(matches!(h.sample(), Err(PeripheralError::Sampling { .. })));
        let mut h = HallSensor::new("hall", Box::new(SimHallBackend::new(LoopScenario::default())));
        assert!(matches!(h.sample(), Ok(SensorReading::Flux(_))));
    }

    /// In-memory duplex stream: reads canned replies, records writes.
    struct Duplex {
        input: Cursor<Vec<u8>>,
        output: Vec<u8>,
    }

    impl Read for Duplex {
        fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
            self.input.read(buf)
        }
    }

    impl Write for Duplex {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.output.extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn serial_contract() {
        let d = Duplex {
            input: Cursor::new(b"0.5,-0.25,0.1\nERR i2c nack\n".to_vec()),
            output: Vec::new(),
        };
        let mut link = SerialLink::new(d);
        assert_eq!(HallBackend::read(&mut link).unwrap(), [0.5, -0.25, 0.1]);
        assert_eq!(HallBackend::read(&mut link).unwrap_err(), "i2c nack");
        assert_eq!(HallBackend::read(&mut link).unwrap_err(), "device not connected");
        assert_eq!(link.stream.get_ref().output, b"FLUX?\nFLUX?\nFLUX?\n");

        let d = Duplex {
            input: Cursor::new(b"OK\nOK\n".to_vec()),
            output: Vec::new(),
        };
        let mut link = SerialLink::new(d);
        link.pulse(5).unwrap();
        let high: BTreeSet<Pin> = [Pin::new("GP0").unwrap(), Pin::new("GP2").unwrap()].into();
        link.drive(&high, &high).unwrap();
        assert_eq!(link.stream.get_ref().output, b"STEP 5\nPINS GP0,GP2\n");
    }
}
