use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use mpada_core::acquisition::{
    run_plan, validate_plan, AcquisitionError, AcquisitionPlan, Devices, EngineControl, Mode, ModalitySpec,
    PlanViolation, Session, SessionState, TimestampedSample,
};
use mpada_core::datastore::write_archive;
use mpada_core::sim::{InstrumentTarget, SimServer};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, watch};

use crate::config::ServiceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub mode: Mode,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_interval_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cycles: Option<u64>,
    pub start_hz: f64,
    pub stop_hz: f64,
    pub n_points: usize,
    pub paths: usize,
    pub modalities: Vec<ModalitySpec>,
    pub steps: Vec<String>,
}

impl PlanSummary {
    pub fn of(plan: &AcquisitionPlan) -> Self {
        PlanSummary {
            mode: plan.mode,
            duration_ms: plan.duration_ms,
            target_interval_ms: plan.target_interval_ms,
            max_cycles: plan.max_cycles,
            start_hz: plan.grid.start_hz(),
            stop_hz: plan.grid.stop_hz(),
            n_points: plan.grid.n_points(),
            paths: plan.paths().len(),
            modalities: plan.modalities.clone(),
            steps: plan.steps.entries().into_iter().map(|(k, _)| k.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSessionView {
    pub id: String,
    pub state: SessionState,
    pub instrument: String,
    pub plan: PlanSummary,
    pub counts: BTreeMap<String, usize>,
    pub last_t_ms: BTreeMap<String, f64>,
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub gaps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive_error: Option<String>,
}

#[derive(Debug, Clone)]
pub enum StreamItem {
    Sample(Arc<TimestampedSample>),
    End(Box<ApiSessionView>),
}

#[derive(Debug)]
pub enum SubmitError {
    Invalid(Vec<PlanViolation>),
    Instrument(String),
}

#[derive(Debug, Clone, Copy)]
pub struct StateConflict {
    pub action: &'static str,
    pub state: SessionState,
}

struct Inner {
    state: SessionState,
    devices: Option<Devices>,
    simulator: Option<SimServer>,
    stop: Option<Arc<AtomicBool>>,
    counts: BTreeMap<String, usize>,
    last_t_ms: BTreeMap<String, f64>,
    result: Option<Arc<Session>>,
    archive: Option<PathBuf>,
    archive_error: Option<String>,
}

pub struct SessionEntry {
    pub id: String,
    pub plan: AcquisitionPlan,
    instrument: String,
    inner: Mutex<Inner>,
    events: broadcast::Sender<StreamItem>,
    done: watch::Sender<bool>,
}

impl SessionEntry {
    pub fn state(&self) -> SessionState {
        self.lock().state
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn view(&self) -> ApiSessionView {
        let inner = self.lock();
        self.view_locked(&inner)
    }

    fn view_locked(&self, inner: &Inner) -> ApiSessionView {
        let r = inner.result.as_deref();
        ApiSessionView {
            id: self.id.clone(),
            state: inner.state,
            instrument: self.instrument.clone(),
            plan: PlanSummary::of(&self.plan),
            counts: inner.counts.clone(),
            last_t_ms: inner.last_t_ms.clone(),
            partial: r.is_some_and(|s| s.partial),
            abort_reason: r.and_then(|s| s.abort_reason.clone()),
            gaps: r.map_or(0, |s| s.gaps.len()),
            archive: inner.archive.as_ref().map(|p| p.display().to_string()),
            archive_error: inner.archive_error.clone(),
        }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state(), SessionState::Complete | SessionState::Aborted)
    }

    /// The finished session, once the engine has returned.
    pub fn result(&self) -> Option<Arc<Session>> {
        self.lock().result.clone()
    }

    /// Subscribe to live events. Also returns the final view when the
    /// session has already finished.
    pub fn subscribe(&self) -> (broadcast::Receiver<StreamItem>, Option<ApiSessionView>) {
        let rx = self.events.subscribe();
        let inner = self.lock();
        let end = matches!(inner.state, SessionState::Complete | SessionState::Aborted).then(|| self.view_locked(&inner));
        (rx, end)
    }

    /// Wait until the session finishes. Returns false on timeout.
    pub async fn wait_finished(&self, timeout: Duration) -> bool {
        let mut rx = self.done.subscribe();
        let finished = tokio::time::timeout(timeout, rx.wait_for(|d| *d)).await.is_ok();
        finished
    }

    pub fn request_stop(&self) -> Result<(), StateConflict> {
        let inner = self.lock();
        match (inner.state, &inner.stop) {
            (SessionState::Running, Some(flag)) => {
                flag.store(true, std::sync::atomic::Ordering::SeqCst);
                Ok(())
            }
            (state, _) => Err(StateConflict { action: "stop", state }),
        }
    }

    /// Idle to running: hand the devices to an engine thread.
    pub fn start(self: &Arc<Self>, config: &ServiceConfig) -> Result<ApiSessionView, StateConflict> {
        let mut inner = self.lock();
        if inner.state != SessionState::Idle {
            return Err(StateConflict {
                action: "start",
                state: inner.state,
            });
        }
        let mut devices = inner.devices.take().expect("idle session holds its devices");
        let (control, tap) = EngineControl::with_tap(config.tap_capacity);
        inner.stop = Some(control.stop_flag());
        inner.state = SessionState::Running;
        let view = self.view_locked(&inner);
        drop(inner);

        let forwarder = {
            let entry = self.clone();
            thread::Builder::new()
                .name(format!("tap-{}", &self.id[..8]))
                .spawn(move || {
                    for sample in tap {
                        {
                            let mut inner = entry.lock();
                            *inner.counts.entry(sample.modality.clone()).or_default() += 1;
                            inner.last_t_ms.insert(sample.modality.clone(), sample.t_ms);
                        }
                        let _ = entry.events.send(StreamItem::Sample(Arc::new(sample)));
                    }
                })
                .expect("spawn tap forwarder")
        };
        let entry = self.clone();
        let data_dir = config.data_dir.clone();
        thread::Builder::new()
            .name(format!("engine-{}", &self.id[..8]))
            .spawn(move || {
                let result = run_plan(&entry.plan, &mut devices, &control);
                drop(control);
                let _ = forwarder.join();
                drop(devices);
                entry.finish(result, &data_dir);
            })
            .expect("spawn engine");
        Ok(view)
    }

    fn finish(&self, result: Result<Session, AcquisitionError>, data_dir: &std::path::Path) {
        let mut session = result.unwrap_or_else(|e| {
            let mut s = Session::new(self.plan.clone());
            s.state = SessionState::Aborted;
            s.partial = true;
            s.abort_reason = Some(e.to_string());
            s
        });
        session.id = self.id.clone();
        let archive = write_archive(&session, data_dir);
        let view = {
            let mut inner = self.lock();
            inner.state = session.state;
            inner.counts = session.buffers.iter().map(|(k, v)| (k.clone(), v.len())).collect();
            inner.last_t_ms = session
                .buffers
                .iter()
                .filter_map(|(k, v)| v.last().map(|s| (k.clone(), s.t_ms)))
                .collect();
            match archive {
                Ok(p) => inner.archive = Some(p),
                Err(e) => {
                    log::error!("session {}: archive failed: {e}", self.id);
                    inner.archive_error = Some(e.to_string());
                }
            }
            inner.result = Some(Arc::new(session));
            inner.simulator = None;
            inner.stop = None;
            self.view_locked(&inner)
        };
        self.done.send_replace(true);
        let _ = self.events.send(StreamItem::End(Box::new(view)));
    }
}

struct Shared {
    config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<SessionEntry>>>,
}

/// Session registry. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState {
            shared: Arc::new(Shared {
                config,
                sessions: RwLock::default(),
            }),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.shared.config
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionEntry>> {
        self.shared.sessions.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn list(&self) -> Vec<ApiSessionView> {
        let sessions: Vec<_> = self.shared.sessions.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        sessions.iter().map(|s| s.view()).collect()
    }

    /// Connect the plan's devices, validate, and register an idle session.
    /// Blocks on instrument I/O.
    pub fn submit_blocking(&self, plan: AcquisitionPlan) -> Result<Arc<SessionEntry>, SubmitError> {
        let config = &self.shared.config;
        let target = match &plan.instrument {
            Some(s) => s.parse::<InstrumentTarget>().map_err(|e| {
                SubmitError::Invalid(vec![PlanViolation {
                    field: "instrument".into(),
                    message: e.to_string(),
                }])
            })?,
            None => config.instrument.clone(),
        };
        let (rf, simulator) = if plan.needs_rf() {
            let open = target
                .open(&config.sim, config.connect_timeout)
                .map_err(|e| SubmitError::Instrument(format!("{target}: {e}")))?;
            (Some(Box::new(open.client) as Box<_>), open.simulator)
        } else {
            (None, None)
        };
        let mut devices = Devices::from_plan(&plan, rf).map_err(|e| {
            SubmitError::Invalid(vec![PlanViolation {
                field: "peripherals".into(),
                message: e.to_string(),
            }])
        })?;
        let inventory = devices.inventory().map_err(|e| SubmitError::Instrument(e.to_string()))?;
        validate_plan(&plan, &inventory).map_err(SubmitError::Invalid)?;

        let id = uuid::Uuid::new_v4().to_string();
        let (events, _) = broadcast::channel(config.stream_backlog.max(1));
        let entry = Arc::new(SessionEntry {
            id: id.clone(),
            instrument: target.to_string(),
            plan,
            inner: Mutex::new(Inner {
                state: SessionState::Idle,
                devices: Some(devices),
                simulator,
                stop: None,
                counts: BTreeMap::new(),
                last_t_ms: BTreeMap::new(),
                result: None,
                archive: None,
                archive_error: None,
            }),
            events,
            done: watch::channel(false).0,
        });
        self.shared
            .sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, entry.clone());
        Ok(entry)
    }
}
