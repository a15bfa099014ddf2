//! RF switch sequencing: port-label to GPIO pin maps and ordered TX/RX
//! sweep sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::OrderedMap;
use crate::vna::PortPath;

pub const DEFAULT_SETTLE: Duration = Duration::from_millis(5);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwitchError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {path}: invalid pin name {pin:?} (expected GP<digits>)")]
    PinName { path: String, pin: String },
    #[error("config: {0}: duplicate pin within one port")]
    DuplicatePin(String),
    #[error("config: sequence is empty")]
    EmptySequence,
    #[error("config: sequence key {0:?} is not a positive integer")]
    StepKey(String),
    #[error("config: sequence step {key}: expected [tx, rx], got {len} labels")]
    Arity { key: String, len: usize },
    #[error("unknown port label {0:?}")]
    UnknownLabel(String),
    #[error("pin driver: {0}")]
    Driver(String),
}

/// A GPIO pin name, `GP<digits>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pin(String);

impl Pin {
    pub fn new(name: &str) -> Option<Pin> {
        let digits = name.strip_prefix("GP")?;
        if digits.is_empty() || digits.len() > 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        Some(Pin(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn number(&self) -> u32 {
        self.0[2..].parse().unwrap_or(0)
    }
}

impl TryFrom<String> for Pin {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Pin::new(&s).ok_or(s)
    }
}

impl From<Pin> for String {
    fn from(p: Pin) -> String {
        p.0
    }
}

impl fmt::Display for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Port label to the set of pins that must be high to select it. An empty
/// set is the default (all-low) position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PortPinMap {
    mapping: BTreeMap<String, BTreeSet<Pin>>,
}

impl PortPinMap {
    pub fn from_entries(entries: OrderedMap<Vec<String>>) -> Result<Self, SwitchError> {
        let mut mapping = BTreeMap::new();
        for (label, pins) in entries {
            let mut set = BTreeSet::new();
            for p in pins {
                let pin = Pin::new(&p).ok_or_else(|| SwitchError::PinName {
                    path: label.clone(),
                    pin: p.clone(),
                })?;
                if !set.insert(pin) {
                    return Err(SwitchError::DuplicatePin(label.clone()));
                }
            }
            mapping.insert(label, set);
        }
        Ok(PortPinMap { mapping })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.mapping.keys().map(String::as_str)
    }

    pub fn pins_for(&self, label: &str) -> Option<&BTreeSet<Pin>> {
        self.mapping.get(label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.mapping.contains_key(label)
    }

    /// Every pin mentioned anywhere in the map.
    pub fn all_pins(&self) -> BTreeSet<Pin> {
        self.mapping.values().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn to_entries(&self) -> OrderedMap<Vec<String>> {
        OrderedMap(
            self.mapping
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|p| p.0.clone()).collect()))
                .collect(),
        )
    }
}

impl Serialize for PortPinMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_entries().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PortPinMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = OrderedMap::<Vec<String>>::deserialize(d)?;
        PortPinMap::from_entries(entries).map_err(serde::de::Error::custom)
    }
}

/// Parse a JSON pin-map document.
pub fn load_pin_map(document: &str) -> Result<PortPinMap, SwitchError> {
    let entries: OrderedMap<Vec<String>> =
        serde_json::from_str(document).map_err(|e| SwitchError::Parse(e.to_string()))?;
    PortPinMap::from_entries(entries)
}

/// Union of the pin sets of both labels; all other pins go low.
pub fn resolve_path_pins(map: &PortPinMap, tx: &str, rx: &str) -> Result<BTreeSet<Pin>, SwitchError> {
    let t = map
        .pins_for(tx)
        .ok_or_else(|| SwitchError::UnknownLabel(tx.to_string()))?;
    let r = map
        .pins_for(rx)
        .ok_or_else(|| SwitchError::UnknownLabel(rx.to_string()))?;
    Ok(t.union(r).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepStep {
    pub step_id: u32,
    pub path: PortPath,
}

/// Ordered list of TX/RX paths, sorted by numeric step key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSequence {
    steps: Vec<SweepStep>,
}

impl SweepSequence {
    pub fn from_entries(entries: OrderedMap<Vec<String>>) -> Result<Self, SwitchError> {
        if entries.is_empty() {
            return Err(SwitchError::EmptySequence);
        }
        let mut steps = Vec::with_capacity(entries.len());
        for (key, labels) in entries {
            let step_id: u32 = match key.parse() {
                Ok(n) if n > 0 && key.bytes().all(|b| b.is_ascii_digit()) => n,
                _ => return Err(SwitchError::StepKey(key)),
            };
            if labels.len() != 2 {
                return Err(SwitchError::Arity {
                    key,
                    len: labels.len(),
                });
            }
            if steps.iter().any(|s: &SweepStep| s.step_id == step_id) {
                return Err(SwitchError::StepKey(key));
            }
            steps.push(SweepStep {
                step_id,
                path: PortPath::new(labels[0].clone(), labels[1].clone()),
            });
        }
        steps.sort_by_key(|s| s.step_id);
        Ok(SweepSequence { steps })
    }

    pub fn steps(&self) -> &[SweepStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, step_id: u32) -> Option<&SweepStep> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }

    /// Check every label resolves in `map`.
    pub fn validate_against(&self, map: &PortPinMap) -> Result<(), SwitchError> {
        for s in &self.steps {
            resolve_path_pins(map, &s.path.tx, &s.path.rx)?;
        }
        Ok(())
    }

    fn to_entries(&self) -> OrderedMap<Vec<String>> {
        OrderedMap(
            self.steps
                .iter()
                .map(|s| (s.step_id.to_string(), vec![s.path.tx.clone(), s.path.rx.clone()]))
                .collect(),
        )
    }
}

impl Serialize for SweepSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_entries().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SweepSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = OrderedMap::<Vec<String>>::deserialize(d)?;
        SweepSequence::from_entries(entries).map_err(serde::de::Error::custom)
    }
}

/// Parse a JSON sweep-sequence document.
pub fn load_sequence(document: &str) -> Result<SweepSequence, SwitchError> {
    let entries: OrderedMap<Vec<String>> =
        serde_json::from_str(document).map_err(|e| SwitchError::Parse(e.to_string()))?;
    SweepSequence::from_entries(entries)
}

/// Drives a bank of GPIO pins.
pub trait PinDriver: Send {
    /// Set `high` pins high and every other pin in `bank` low.
    fn drive(&mut self, high: &BTreeSet<Pin>, bank: &BTreeSet<Pin>) -> Result<(), SwitchError>;
}

/// One pin-state change as applied by a driver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinStateEntry {
    pub high: BTreeSet<Pin>,
    pub low: BTreeSet<Pin>,
}

/// In-memory pin bank that records every applied state.
#[derive(Debug, Clone, Default)]
pub struct SimPinDriver {
    state: Arc<Mutex<BTreeMap<Pin, bool>>>,
    log: Arc<Mutex<Vec<PinStateEntry>>>,
}

impl SimPinDriver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn high_pins(&self) -> BTreeSet<Pin> {
        self.state
            .lock()
            .expect("pin state poisoned")
            .iter()
            .filter(|(_, &v)| v)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn log(&self) -> Vec<PinStateEntry> {
        self.log.lock().expect("pin log poisoned").clone()
    }
}

impl PinDriver for SimPinDriver {
    fn drive(&mut self, high: &BTreeSet<Pin>, bank: &BTreeSet<Pin>) -> Result<(), SwitchError> {
        let mut state = self.state.lock().expect("pin state poisoned");
        let low: BTreeSet<Pin> = bank.difference(high).cloned().collect();
        for p in &low {
            state.insert(p.clone(), false);
        }
        for p in high {
            state.insert(p.clone(), true);
        }
        self.log.lock().expect("pin log poisoned").push(PinStateEntry {
            high: high.clone(),
            low,
        });
        Ok(())
    }
}

/// A pin map bound to a driver.
pub struct SwitchFabric {
    map: PortPinMap,
    driver: Box<dyn PinDriver>,
    settle: Duration,
}

impl fmt::Debug for SwitchFabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchFabric")
            .field("map", &self.map)
            .field("settle", &self.settle)
            .finish_non_exhaustive()
    }
}

impl SwitchFabric {
    pub fn new(map: PortPinMap, driver: Box<dyn PinDriver>) -> Self {
        SwitchFabric {
            map,
            driver,
            settle: DEFAULT_SETTLE,
        }
    }

    pub fn with_settle(mut self, settle: Duration) -> Self {
        self.settle = settle;
        self
    }

    pub fn map(&self) -> &PortPinMap {
        &self.map
    }

    /// Drive the pins selecting `path`, then wait the settle time.
    pub fn apply_path(&mut self, path: &PortPath) -> Result<BTreeSet<Pin>, SwitchError> {
        let high = resolve_path_pins(&self.map, &path.tx, &path.rx)?;
        self.driver.drive(&high, &self.map.all_pins())?;
        if !self.settle.is_zero() {
            std::thread::sleep(self.settle);
        }
        Ok(high)
    }
}
