//! Sequential and parallel acquisition engines.
//!
//! Sequential: one thread runs each cycle's steps in order, optionally
//! paced by an absolute tick schedule. Parallel: one thread per modality,
//! each owning its device and its own schedule anchored at the shared
//! session origin. A step that overruns its next deadline skips the missed
//! ticks and leaves a gap marker.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use thiserror::Error;

use crate::acquisition::plan::{
    validate_plan, AcquisitionPlan, DeviceInventory, Mode, ModalitySpec, PlanViolation, StepSpec, SweepSelect,
    RF_DEVICE, RF_MODALITY,
};
use crate::acquisition::schedule::{build_tick_schedule, TickSchedule};
use crate::acquisition::session::{GapKind, GapMarker, Payload, Session, SessionState, TimestampedSample};
use crate::clock::SessionClock;
use crate::peripheral::{
    registry_from_entries, Peripheral, PeripheralError, PeripheralHandle, Registry, SensorReading,
};
use crate::switch::{resolve_path_pins, Pin, PortPinMap, SimPinDriver, SwitchFabric};
use crate::vna::{PortPath, RfInstrument, RigEvent};

/// Coarse sleep stops this far ahead of a deadline; the rest is spun.
pub const SPIN_MARGIN: Duration = Duration::from_millis(2);

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("plan is {0:?} but a different engine was requested")]
    WrongMode(Mode),
    #[error("invalid plan: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<PlanViolation>),
    #[error("device setup failed: {0}")]
    Device(String),
}

/// Devices available to a run. Each is owned by exactly one worker while
/// the run is active.
pub struct Devices {
    pub rf: Option<Box<dyn RfInstrument>>,
    pub switch: Option<SwitchFabric>,
    pub peripherals: Registry,
}

impl Devices {
    pub fn new(rf: Option<Box<dyn RfInstrument>>) -> Self {
        Devices {
            rf,
            switch: None,
            peripherals: Registry::empty(),
        }
    }

    /// Build the plan's peripherals and switch fabric with simulated
    /// backends.
    pub fn from_plan(plan: &AcquisitionPlan, rf: Option<Box<dyn RfInstrument>>) -> Result<Self, PeripheralError> {
        let peripherals = match &plan.peripherals {
            Some(entries) => registry_from_entries(entries.clone())?,
            None => Registry::empty(),
        };
        let switch = plan
            .pin_map
            .clone()
            .map(|m| SwitchFabric::new(m, Box::new(SimPinDriver::new())).with_settle(plan.settle()));
        Ok(Devices {
            rf,
            switch,
            peripherals,
        })
    }

    pub fn inventory(&mut self) -> Result<DeviceInventory, AcquisitionError> {
        let rf_min_sweep = match self.rf.as_mut() {
            Some(rf) => Some(rf.min_sweep_time().map_err(|e| AcquisitionError::Device(e.to_string()))?),
            None => None,
        };
        Ok(DeviceInventory {
            rf_min_sweep,
            peripherals: self.peripherals.entries(),
        })
    }
}

/// Stop flag and optional live tap shared with the caller.
#[derive(Clone, Default)]
pub struct EngineControl {
    stop: Arc<AtomicBool>,
    tap: Option<SyncSender<TimestampedSample>>,
}

impl EngineControl {
    pub fn new() -> Self {
        Self::default()
    }

    /// Control with a bounded live tap. Samples are dropped from the tap,
    /// never from the session, when the receiver falls behind.
    pub fn with_tap(capacity: usize) -> (Self, Receiver<TimestampedSample>) {
        let (tx, rx) = sync_channel(capacity);
        (
            EngineControl {
                stop: Arc::default(),
                tap: Some(tx),
            },
            rx,
        )
    }

    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

/// Per-worker sample sink with a session-wide capacity.
struct Recorder {
    samples: Vec<TimestampedSample>,
    gaps: Vec<GapMarker>,
    used: Arc<AtomicUsize>,
    capacity: usize,
    tap: Option<SyncSender<TimestampedSample>>,
    full: bool,
}

impl Recorder {
    fn new(used: Arc<AtomicUsize>, capacity: usize, tap: Option<SyncSender<TimestampedSample>>) -> Self {
        Recorder {
            samples: Vec::new(),
            gaps: Vec::new(),
            used,
            capacity,
            tap,
            full: false,
        }
    }

    /// Returns false once the session buffer is full.
    fn push(&mut self, sample: TimestampedSample) -> bool {
        if self.used.fetch_add(1, Ordering::SeqCst) >= self.capacity {
            self.used.fetch_sub(1, Ordering::SeqCst);
            if !self.full {
                self.full = true;
                self.gap(sample.t_ms, &sample.modality, GapKind::BufferFull);
            }
            return false;
        }
        if let Some(tap) = &self.tap {
            let _ = tap.try_send(sample.clone());
        }
        self.samples.push(sample);
        true
    }

    fn gap(&mut self, t_ms: f64, modality: &str, kind: GapKind) {
        self.gaps.push(GapMarker {
            t_ms,
            modality: modality.to_string(),
            kind,
        });
    }

    fn error(&mut self, clock: &SessionClock, modality: &str, message: String) {
        warn!("{modality}: {message}");
        self.gap(clock.now_ms(), modality, GapKind::Error { message });
    }
}

fn merge(session: &mut Session, rec: Recorder) {
    if rec.gaps.iter().any(|g| !matches!(g.kind, GapKind::Overrun { .. })) {
        session.partial = true;
    }
    for s in rec.samples {
        session.buffers.entry(s.modality.clone()).or_default().push(s);
    }
    session.gaps.extend(rec.gaps);
}

/// Run whichever engine the plan's mode selects.
pub fn run_plan(plan: &AcquisitionPlan, devices: &mut Devices, control: &EngineControl) -> Result<Session, AcquisitionError> {
    match plan.mode {
        Mode::Sequential => run_sequential(plan, devices, control),
        Mode::Parallel => run_parallel(plan, devices, control),
    }
}

fn prepare(plan: &AcquisitionPlan, devices: &mut Devices) -> Result<(), AcquisitionError> {
    let inventory = devices.inventory()?;
    validate_plan(plan, &inventory).map_err(AcquisitionError::Invalid)?;
    if plan.needs_rf() {
        let rf = devices.rf.as_mut().ok_or_else(|| AcquisitionError::Device("no RF instrument".into()))?;
        rf.configure_sweep(&plan.grid)
            .map_err(|e| AcquisitionError::Device(e.to_string()))?;
    }
    Ok(())
}

/// Everything one RF sweep over all paths needs.
struct RfLane<'a> {
    rf: &'a mut Box<dyn RfInstrument>,
    switch: Option<&'a mut SwitchFabric>,
    pin_map: Option<&'a PortPinMap>,
    paths: Vec<(u32, PortPath)>,
    modality: String,
}

impl RfLane<'_> {
    /// Measure every path once. Stops at the first failure.
    fn sweep(&mut self, clock: &SessionClock, rec: &mut Recorder) -> Result<bool, String> {
        for (step_id, path) in &self.paths {
            let pins: Option<BTreeSet<Pin>> = match (&mut self.switch, self.pin_map) {
                (Some(sw), _) => Some(sw.apply_path(path).map_err(|e| e.to_string())?),
                (None, Some(map)) => Some(resolve_path_pins(map, &path.tx, &path.rx).map_err(|e| e.to_string())?),
                (None, None) => None,
            };
            if let Some(pins) = pins {
                self.rf.rig_event(&RigEvent::Pins(pins)).map_err(|e| e.to_string())?;
            }
            let t_ms = clock.now_ms();
            let trace = self.rf.trigger_and_read(path).map_err(|e| e.to_string())?;
            let sample = TimestampedSample {
                t_ms,
                modality: self.modality.clone(),
                payload: Payload::Trace {
                    step_id: *step_id,
                    trace,
                },
            };
            if !rec.push(sample) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn pins_from_args(args: &serde_json::Value) -> Option<BTreeSet<Pin>> {
    args.get("pins")?
        .as_array()?
        .iter()
        .map(|v| v.as_str().and_then(Pin::new))
        .collect()
}

fn sensor_payload(reading: SensorReading) -> Payload {
    match reading {
        SensorReading::Flux(flux) => Payload::Flux { flux },
        SensorReading::Angle(angle) => Payload::Angle { angle },
    }
}

/// Sequential engine: steps run in plan order within each cycle.
pub fn run_sequential(
    plan: &AcquisitionPlan,
    devices: &mut Devices,
    control: &EngineControl,
) -> Result<Session, AcquisitionError> {
    if plan.mode != Mode::Sequential {
        return Err(AcquisitionError::WrongMode(plan.mode));
    }
    prepare(plan, devices)?;
    let steps = plan
        .step_specs()
        .map_err(|v| AcquisitionError::Invalid(vec![v]))?;
    let keys: Vec<Option<String>> = steps
        .iter()
        .map(|s| match s {
            StepSpec::Device { key, .. } => devices.peripherals.resolve_key(key).map(str::to_string),
            StepSpec::Sweep(_) => None,
        })
        .collect();

    let mut session = Session::new(plan.clone());
    let clock = SessionClock::start();
    session.clock_anchor_ms = clock.anchor_epoch_ms();
    session.state = SessionState::Running;
    info!("session {} started (sequential)", session.id);

    let duration = Duration::from_millis(plan.duration_ms);
    let schedule: Option<TickSchedule> = plan
        .target_interval_ms
        .map(|t| build_tick_schedule(clock.origin(), Duration::from_millis(t), duration));
    let max_cycles = plan.max_cycles.unwrap_or(u64::MAX);
    let mut rec = Recorder::new(Arc::default(), plan.buffer_capacity, control.tap.clone());

    let Devices {
        rf,
        switch,
        peripherals,
    } = devices;
    let mut lane = rf.as_mut().map(|rf| RfLane {
        rf,
        switch: switch.as_mut(),
        pin_map: plan.pin_map.as_ref(),
        paths: plan.paths(),
        modality: RF_MODALITY.to_string(),
    });

    let mut cycle: u64 = 0;
    let stop = || control.is_stopped();
    'run: loop {
        if stop() {
            session.partial = true;
            break;
        }
        if cycle >= max_cycles {
            break;
        }
        match &schedule {
            Some(s) if cycle >= s.n_ticks => break,
            None if clock.elapsed() >= duration => break,
            _ => {}
        }

        for (step, key) in steps.iter().zip(&keys) {
            match step {
                StepSpec::Sweep(SweepSelect::None) => {}
                StepSpec::Sweep(SweepSelect::All) => {
                    let Some(lane) = lane.as_mut() else { continue };
                    match lane.sweep(&clock, &mut rec) {
                        Ok(true) => {}
                        Ok(false) => break 'run,
                        Err(e) => rec.error(&clock, RF_MODALITY, e),
                    }
                }
                StepSpec::Device { key: name, args } => {
                    let key = key.as_deref().unwrap_or(name);
                    let Some(p) = peripherals.get_mut(key) else { continue };
                    match &mut p.handle {
                        PeripheralHandle::Actuator(a) => match a.actuate(args, &clock) {
                            Ok(event) => {
                                let rig = match event.event.as_str() {
                                    "advance" => Some(RigEvent::StepperPosition(event.position)),
                                    "set_pins" => pins_from_args(args).map(RigEvent::Pins),
                                    _ => None,
                                };
                                let t_ms = event.t_ms;
                                let ok = rec.push(TimestampedSample {
                                    t_ms,
                                    modality: key.to_string(),
                                    payload: Payload::Actuation { event },
                                });
                                if let (Some(ev), Some(lane)) = (rig, lane.as_mut()) {
                                    if let Err(e) = lane.rf.rig_event(&ev) {
                                        rec.error(&clock, RF_MODALITY, e.to_string());
                                    }
                                }
                                if !ok {
                                    break 'run;
                                }
                            }
                            Err(e) => {
                                rec.error(&clock, key, e.to_string());
                                session.state = SessionState::Aborted;
                                session.abort_reason = Some(e.to_string());
                                break 'run;
                            }
                        },
                        PeripheralHandle::Sensor(s) => {
                            let t_ms = clock.now_ms();
                            match s.sample() {
                                Ok(r) => {
                                    if !rec.push(TimestampedSample {
                                        t_ms,
                                        modality: key.to_string(),
                                        payload: sensor_payload(r),
                                    }) {
                                        break 'run;
                                    }
                                }
                                Err(e) => rec.error(&clock, key, e.to_string()),
                            }
                        }
                    }
                }
            }
        }
        cycle += 1;

        if let Some(s) = &schedule {
            let next = s.next_due(cycle, std::time::Instant::now());
            if next > cycle {
                rec.gap(clock.now_ms(), RF_MODALITY, GapKind::Overrun { skipped_ticks: next - cycle });
                cycle = next;
            }
            if cycle >= s.n_ticks || cycle >= max_cycles {
                break;
            }
            if !clock.wait_until(s.deadline(cycle), SPIN_MARGIN, &stop) {
                session.partial = true;
                break;
            }
        }
    }

    merge(&mut session, rec);
    finish(&mut session);
    Ok(session)
}

fn finish(session: &mut Session) {
    if session.abort_reason.is_some() && session.state == SessionState::Running {
        session.state = SessionState::Aborted;
    }
    if session.state == SessionState::Running {
        session.state = SessionState::Complete;
    }
    if session.state == SessionState::Aborted {
        session.partial = true;
    }
    info!("session {} finished: {:?}", session.id, session.state);
}

enum Worker<'a> {
    Rf(RfLane<'a>),
    Peripheral(&'a mut Peripheral),
}

struct WorkerOutcome {
    rec: Recorder,
    stopped: bool,
}

fn run_worker(
    modality: &ModalitySpec,
    mut worker: Worker<'_>,
    schedule: TickSchedule,
    clock: &SessionClock,
    rec: Recorder,
    control: &EngineControl,
) -> WorkerOutcome {
    let mut rec = rec;
    let stop = || control.is_stopped();
    let mut k = 0;
    while k < schedule.n_ticks {
        if !clock.wait_until(schedule.deadline(k), SPIN_MARGIN, &stop) {
            return WorkerOutcome { rec, stopped: true };
        }
        let keep_going = match &mut worker {
            Worker::Rf(lane) => match lane.sweep(clock, &mut rec) {
                Ok(more) => more,
                Err(e) => {
                    rec.error(clock, &modality.id, e);
                    false
                }
            },
            Worker::Peripheral(p) => {
                let t_ms = clock.now_ms();
                match &mut p.handle {
                    PeripheralHandle::Sensor(s) => match s.sample() {
                        Ok(r) => rec.push(TimestampedSample {
                            t_ms,
                            modality: modality.id.clone(),
                            payload: sensor_payload(r),
                        }),
                        Err(e) => {
                            rec.error(clock, &modality.id, e.to_string());
                            false
                        }
                    },
                    PeripheralHandle::Actuator(_) => false,
                }
            }
        };
        if !keep_going {
            break;
        }
        let next = schedule.next_due(k + 1, std::time::Instant::now());
        if next > k + 1 {
            rec.gap(
                clock.now_ms(),
                &modality.id,
                GapKind::Overrun {
                    skipped_ticks: next - k - 1,
                },
            );
        }
        k = next;
    }
    WorkerOutcome { rec, stopped: false }
}

/// Parallel engine: one thread per modality on a shared origin.
pub fn run_parallel(
    plan: &AcquisitionPlan,
    devices: &mut Devices,
    control: &EngineControl,
) -> Result<Session, AcquisitionError> {
    if plan.mode != Mode::Parallel {
        return Err(AcquisitionError::WrongMode(plan.mode));
    }
    prepare(plan, devices)?;

    let Devices {
        rf,
        switch,
        peripherals,
    } = devices;
    let mut rf_slot = rf.as_mut();
    let mut switch_slot = switch.as_mut();
    let mut periph: Vec<Option<&mut Peripheral>> = peripherals.iter_mut().map(Some).collect();
    let mut workers: Vec<(&ModalitySpec, Worker<'_>)> = Vec::new();
    for m in &plan.modalities {
        if m.device == RF_DEVICE {
            let rf = rf_slot.take().ok_or_else(|| AcquisitionError::Device("RF instrument bound twice".into()))?;
            workers.push((
                m,
                Worker::Rf(RfLane {
                    rf,
                    switch: switch_slot.take(),
                    pin_map: plan.pin_map.as_ref(),
                    paths: plan.paths(),
                    modality: m.id.clone(),
                }),
            ));
        } else {
            let slot = periph
                .iter_mut()
                .find(|p| {
                    p.as_ref()
                        .is_some_and(|p| p.key() == m.device || p.descriptor.module == m.device)
                })
                .and_then(Option::take)
                .ok_or_else(|| AcquisitionError::Device(format!("device {:?} unavailable", m.device)))?;
            workers.push((m, Worker::Peripheral(slot)));
        }
    }

    let mut session = Session::new(plan.clone());
    let used = Arc::new(AtomicUsize::new(0));
    let clock = SessionClock::start();
    session.clock_anchor_ms = clock.anchor_epoch_ms();
    session.state = SessionState::Running;
    info!("session {} started (parallel, {} modalities)", session.id, workers.len());

    let outcomes: Vec<WorkerOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = workers
            .into_iter()
            .map(|(m, worker)| {
                let schedule = build_tick_schedule(
                    clock.origin(),
                    Duration::from_millis(m.interval_ms),
                    Duration::from_millis(plan.duration_ms),
                );
                let rec = Recorder::new(used.clone(), plan.buffer_capacity, control.tap.clone());
                let clock = &clock;
                std::thread::Builder::new()
                    .name(format!("acq-{}", m.id))
                    .spawn_scoped(scope, move || run_worker(m, worker, schedule, clock, rec, control))
                    .expect("spawn acquisition worker")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("acquisition worker panicked"))
            .collect()
    });

    for o in outcomes {
        if o.stopped {
            session.partial = true;
        }
        merge(&mut session, o.rec);
    }
    finish(&mut session);
    Ok(session)
}
