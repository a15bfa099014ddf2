//! Acquisition plan documents.
//!
//! Sequential plans list per-cycle steps in the order they run, using the
//! `{"sweep": "none"|"all", "<peripheral key>": {args}}` shape. Parallel
//! plans list modalities, each bound to one device with its own interval.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::OrderedMap;
use crate::peripheral::{Capability, DescriptorFields};
use crate::switch::{PortPinMap, SweepSequence};
use crate::vna::{FrequencyGrid, PortPath};

/// Device name that binds a modality or step to the RF instrument.
pub const RF_DEVICE: &str = "vna";
/// Modality id of traces captured by sequential plans.
pub const RF_MODALITY: &str = "s21";
pub const DEFAULT_BUFFER_CAPACITY: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSelect {
    None,
    All,
}

/// One interpreted per-cycle step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSpec {
    Sweep(SweepSelect),
    Device { key: String, args: serde_json::Value },
}

/// Steps as written: either one ordered object or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepDocument {
    Object(OrderedMap<serde_json::Value>),
    List(Vec<OrderedMap<serde_json::Value>>),
}

impl Default for StepDocument {
    fn default() -> Self {
        StepDocument::Object(OrderedMap::default())
    }
}

impl StepDocument {
    pub fn entries(&self) -> Vec<(&String, &serde_json::Value)> {
        match self {
            StepDocument::Object(m) => m.iter().map(|(k, v)| (k, v)).collect(),
            StepDocument::List(l) => l.iter().flat_map(|m| m.iter().map(|(k, v)| (k, v))).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub id: String,
    pub device: String,
    pub interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionPlan {
    pub mode: Mode,
    pub duration_ms: u64,
    /// Cycle interval for sequential plans; cycles run back to back if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_interval_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cycles: Option<u64>,
    pub grid: FrequencyGrid,
    /// Instrument resource address; callers may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrument: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_sequence: Option<SweepSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pin_map: Option<PortPinMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peripherals: Option<OrderedMap<DescriptorFields>>,
    #[serde(default, skip_serializing_if = "StepDocument::is_empty")]
    pub steps: StepDocument,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modalities: Vec<ModalitySpec>,
    #[serde(default = "default_settle_ms")]
    pub settle_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
}

fn default_settle_ms() -> u64 {
    5
}

fn default_timeout_ms() -> u64 {
    2000
}

fn default_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanViolation {
    pub field: String,
    pub message: String,
}

impl PlanViolation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        PlanViolation {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// What validation needs to know about the attached devices.
#[derive(Debug, Clone, Default)]
pub struct DeviceInventory {
    /// Minimum sweep time reported by the RF instrument, if one is attached.
    pub rf_min_sweep: Option<Duration>,
    pub peripherals: Vec<(String, String, Capability)>,
}

impl DeviceInventory {
    /// Resolve a peripheral by key, then by module path.
    pub fn resolve(&self, name: &str) -> Option<(&str, Capability)> {
        self.peripherals
            .iter()
            .find(|(k, _, _)| k == name)
            .or_else(|| self.peripherals.iter().find(|(_, m, _)| m == name))
            .map(|(k, _, c)| (k.as_str(), *c))
    }
}

impl AcquisitionPlan {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        serde_yaml::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn settle(&self) -> Duration {
        Duration::from_millis(self.settle_ms)
    }

    /// Interpret the step document.
    pub fn step_specs(&self) -> Result<Vec<StepSpec>, PlanViolation> {
        self.steps
            .entries()
            .into_iter()
            .map(|(k, v)| {
                if k == "sweep" {
                    serde_json::from_value::<SweepSelect>(v.clone())
                        .map(StepSpec::Sweep)
                        .map_err(|_| PlanViolation::new("steps.sweep", "expected \"none\" or \"all\""))
                } else {
                    Ok(StepSpec::Device {
                        key: k.clone(),
                        args: v.clone(),
                    })
                }
            })
            .collect()
    }

    /// Paths measured by one full sweep: the sequence, or the direct path.
    pub fn paths(&self) -> Vec<(u32, PortPath)> {
        match &self.sweep_sequence {
            Some(seq) => seq.steps().iter().map(|s| (s.step_id, s.path.clone())).collect(),
            None => vec![(0, PortPath::direct())],
        }
    }

    /// Ticks of the schedule a modality with `interval_ms` runs.
    pub fn tick_count(&self, interval_ms: u64) -> u64 {
        if interval_ms == 0 {
            0
        } else {
            self.duration_ms / interval_ms
        }
    }

    fn uses_rf(&self) -> bool {
        match self.mode {
            Mode::Sequential => self
                .step_specs()
                .map(|s| s.iter().any(|st| *st == StepSpec::Sweep(SweepSelect::All)))
                .unwrap_or(false),
            Mode::Parallel => self.modalities.iter().any(|m| m.device == RF_DEVICE),
        }
    }

    pub fn needs_rf(&self) -> bool {
        self.uses_rf()
    }
}

/// Check a plan against its own invariants and the attached devices.
/// Returns every violation found.
pub fn validate_plan(plan: &AcquisitionPlan, devices: &DeviceInventory) -> Result<(), Vec<PlanViolation>> {
    let mut v = Vec::new();
    let n_paths = plan.paths().len() as u32;

    if plan.duration_ms == 0 {
        v.push(PlanViolation::new("duration_ms", "must be positive"));
    }
    if plan.timeout_ms == 0 {
        v.push(PlanViolation::new("timeout_ms", "must be positive"));
    }
    if plan.buffer_capacity == 0 {
        v.push(PlanViolation::new("buffer_capacity", "must be positive"));
    }
    if let Some(seq) = &plan.sweep_sequence {
        match &plan.pin_map {
            Some(map) => {
                if let Err(e) = seq.validate_against(map) {
                    v.push(PlanViolation::new("sweep_sequence", e.to_string()));
                }
            }
            None => v.push(PlanViolation::new("pin_map", "a sweep sequence requires a pin map")),
        }
    }

    let check_interval = |v: &mut Vec<PlanViolation>, field: &str, interval: u64, sweeps: u32| {
        if interval == 0 {
            v.push(PlanViolation::new(field, "interval must be > 0"));
            return;
        }
        if plan.duration_ms < interval {
            v.push(PlanViolation::new(
                field,
                format!("duration {} ms is shorter than the interval {} ms", plan.duration_ms, interval),
            ));
        }
        if sweeps > 0 {
            if let Some(min) = devices.rf_min_sweep {
                let needed = min * sweeps;
                if Duration::from_millis(interval) < needed {
                    v.push(PlanViolation::new(
                        field,
                        format!(
                            "interval below minimum sweep time: {} ms < {} ms ({} sweep(s) of {} ms each); the sampling interval must not be set below the instrument's minimum achievable sweep time",
                            interval,
                            needed.as_secs_f64() * 1e3,
                            sweeps,
                            min.as_secs_f64() * 1e3
                        ),
                    ));
                }
            }
        }
    };

    let rf_missing = |v: &mut Vec<PlanViolation>, field: &str| {
        if devices.rf_min_sweep.is_none() {
            v.push(PlanViolation::new(field, "no RF instrument attached"));
        }
    };

    match plan.mode {
        Mode::Sequential => {
            if !plan.modalities.is_empty() {
                v.push(PlanViolation::new("modalities", "only allowed in parallel mode"));
            }
            if plan.max_cycles == Some(0) {
                v.push(PlanViolation::new("max_cycles", "must be positive"));
            }
            match plan.step_specs() {
                Err(e) => v.push(e),
                Ok(steps) => {
                    if steps.is_empty() {
                        v.push(PlanViolation::new("steps", "sequential plans need at least one step"));
                    }
                    let mut sweeps = 0;
                    for s in &steps {
                        match s {
                            StepSpec::Sweep(SweepSelect::All) => {
                                sweeps += n_paths;
                                rf_missing(&mut v, "steps.sweep");
                            }
                            StepSpec::Sweep(SweepSelect::None) => {}
                            StepSpec::Device { key, .. } => {
                                if devices.resolve(key).is_none() {
                                    v.push(PlanViolation::new(
                                        format!("steps.{key}"),
                                        "no enabled peripheral with this key",
                                    ));
                                }
                            }
                        }
                    }
                    if let Some(t) = plan.target_interval_ms {
                        check_interval(&mut v, "target_interval_ms", t, sweeps);
                    }
                }
            }
        }
        Mode::Parallel => {
            if !plan.steps.is_empty() {
                v.push(PlanViolation::new("steps", "only allowed in sequential mode"));
            }
            if plan.modalities.is_empty() {
                v.push(PlanViolation::new("modalities", "parallel plans need at least one modality"));
            }
            let mut ids = BTreeSet::new();
            let mut owners: BTreeMap<String, String> = BTreeMap::new();
            for (i, m) in plan.modalities.iter().enumerate() {
                let field = format!("modalities[{i}]");
                if m.id.is_empty() || !ids.insert(m.id.clone()) {
                    v.push(PlanViolation::new(&field, format!("modality id {:?} is empty or repeated", m.id)));
                }
                let device = if m.device == RF_DEVICE {
                    rf_missing(&mut v, &field);
                    check_interval(&mut v, &format!("{field}.interval_ms"), m.interval_ms, n_paths);
                    RF_DEVICE.to_string()
                } else {
                    check_interval(&mut v, &format!("{field}.interval_ms"), m.interval_ms, 0);
                    match devices.resolve(&m.device) {
                        Some((key, Capability::Sample)) => key.to_string(),
                        Some((key, Capability::Actuate)) => {
                            v.push(PlanViolation::new(&field, format!("peripheral {key:?} cannot be sampled")));
                            key.to_string()
                        }
                        None => {
                            v.push(PlanViolation::new(&field, format!("unknown device {:?}", m.device)));
                            continue;
                        }
                    }
                };
                if let Some(other) = owners.insert(device.clone(), m.id.clone()) {
                    v.push(PlanViolation::new(
                        &field,
                        format!("device contention: {device:?} is already bound to modality {other:?}"),
                    ));
                }
            }
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
