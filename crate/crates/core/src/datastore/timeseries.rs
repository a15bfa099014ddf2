//! Per-modality CSV time series. Numbers use the shortest representation
//! that parses back to the same f64.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::acquisition::plan::{AcquisitionPlan, Mode, RF_DEVICE, RF_MODALITY};
use crate::acquisition::{Payload, Session, SessionState, TimestampedSample};
use crate::datastore::DatastoreError;
use crate::peripheral::{ActuationEvent, AngleSample, MagneticFluxSample};
use crate::vna::{ComplexTrace, FrequencyGrid, PortPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Trace,
    Flux,
    Angle,
    Actuation,
}

impl ModalityKind {
    pub fn of(payload: &Payload) -> Self {
        match payload {
            Payload::Trace { .. } => ModalityKind::Trace,
            Payload::Flux { .. } => ModalityKind::Flux,
            Payload::Angle { .. } => ModalityKind::Angle,
            Payload::Actuation { .. } => ModalityKind::Actuation,
        }
    }

    pub fn header(self, n_points: usize) -> Vec<String> {
        let fixed: &[&str] = match self {
            ModalityKind::Trace => &["t_ms", "step_id", "tx", "rx"],
            ModalityKind::Flux => &["t_ms", "bx", "by", "bz"],
            ModalityKind::Angle => &["t_ms", "theta_deg"],
            ModalityKind::Actuation => &["t_ms", "event", "position", "n_steps", "device"],
        };
        let mut h: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
        if self == ModalityKind::Trace {
            for i in 0..n_points {
                h.push(format!("re_{i}"));
                h.push(format!("im_{i}"));
            }
        }
        h
    }
}

fn module_kind(module: &str) -> Option<ModalityKind> {
    match module {
        "hall_tlv493d.main" => Some(ModalityKind::Flux),
        "generic_stepper.main" | "rp2040_u2if_interface.core" => Some(ModalityKind::Actuation),
        _ => None,
    }
}

/// Kind of a modality as declared by the plan, used when its buffer is
/// empty.
pub fn declared_kind(plan: &AcquisitionPlan, id: &str) -> Option<ModalityKind> {
    let device = match plan.mode {
        Mode::Sequential if id == RF_MODALITY => return Some(ModalityKind::Trace),
        Mode::Sequential => id.to_string(),
        Mode::Parallel => {
            let m = plan.modalities.iter().find(|m| m.id == id)?;
            if m.device == RF_DEVICE {
                return Some(ModalityKind::Trace);
            }
            m.device.clone()
        }
    };
    let entries = plan.peripherals.as_ref()?;
    entries
        .iter()
        .find(|(k, _)| *k == device)
        .or_else(|| entries.iter().find(|(_, d)| d.module == device))
        .and_then(|(_, d)| module_kind(&d.module))
}

/// Modality ids a session is expected to have, plus any extra buffers.
pub fn modality_ids(session: &Session) -> Vec<String> {
    let mut ids: Vec<String> = match session.plan.mode {
        Mode::Parallel => session.plan.modalities.iter().map(|m| m.id.clone()).collect(),
        Mode::Sequential => Vec::new(),
    };
    for k in session.buffers.keys() {
        if !ids.contains(k) {
            ids.push(k.clone());
        }
    }
    ids
}

pub fn modality_kind(session: &Session, id: &str) -> Result<Option<ModalityKind>, DatastoreError> {
    let samples = session.modality(id);
    let Some(first) = samples.first() else {
        return Ok(declared_kind(&session.plan, id));
    };
    let kind = ModalityKind::of(&first.payload);
    if samples.iter().any(|s| ModalityKind::of(&s.payload) != kind) {
        return Err(DatastoreError::MixedModality(id.to_string()));
    }
    Ok(Some(kind))
}

/// Safe file stem for a modality id.
pub fn check_modality_id(id: &str) -> Result<(), DatastoreError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(DatastoreError::BadModalityId(id.to_string()))
    }
}

fn ordered(samples: &[TimestampedSample]) -> Vec<&TimestampedSample> {
    let mut v: Vec<&TimestampedSample> = samples.iter().collect();
    v.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms));
    v
}

fn sample_record(sample: &TimestampedSample) -> Vec<String> {
    let mut r = vec![sample.t_ms.to_string()];
    match &sample.payload {
        Payload::Trace { step_id, trace } => {
            r.push(step_id.to_string());
            r.push(trace.path().tx.clone());
            r.push(trace.path().rx.clone());
            for v in trace.values() {
                r.push(v.re.to_string());
                r.push(v.im.to_string());
            }
        }
        Payload::Flux { flux } => r.extend(flux.b().iter().map(f64::to_string)),
        Payload::Angle { angle } => r.push(angle.theta_deg().to_string()),
        Payload::Actuation { event } => {
            r.push(event.event.clone());
            r.push(event.position.to_string());
            r.push(event.n_steps.to_string());
            r.push(event.device.clone());
        }
    }
    r
}

/// CSV text for one modality.
pub fn modality_csv(session: &Session, id: &str) -> Result<String, DatastoreError> {
    if session.state == SessionState::Running {
        return Err(DatastoreError::SessionRunning);
    }
    let kind = modality_kind(session, id)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let header = match kind {
        Some(k) => k.header(session.plan.grid.n_points()),
        None => vec!["t_ms".to_string()],
    };
    w.write_record(&header)?;
    for s in ordered(session.modality(id)) {
        w.write_record(sample_record(s))?;
    }
    let bytes = w.into_inner().map_err(|e| DatastoreError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| DatastoreError::Io(e.to_string()))
}

/// One `(file name, contents)` pair per modality.
pub fn write_timeseries_csv(session: &Session) -> Result<Vec<(String, String)>, DatastoreError> {
    modality_ids(session)
        .into_iter()
        .map(|id| {
            check_modality_id(&id)?;
            let text = modality_csv(session, &id)?;
            Ok((format!("{id}.csv"), text))
        })
        .collect()
}

fn parse_f64(field: &str, line: usize) -> Result<f64, DatastoreError> {
    field.parse::<f64>().map_err(|e| DatastoreError::Parse {
        line,
        message: format!("{field:?}: {e}"),
    })
}

fn parse_int<T: std::str::FromStr>(field: &str, line: usize) -> Result<T, DatastoreError>
where
    T::Err: std::fmt::Display,
{
    field.parse::<T>().map_err(|e| DatastoreError::Parse {
        line,
        message: format!("{field:?}: {e}"),
    })
}

/// Parse a file written by [`write_timeseries_csv`]. Traces need the grid
/// they were captured on.
pub fn parse_timeseries_csv(
    modality: &str,
    text: &str,
    grid: Option<&FrequencyGrid>,
) -> Result<Vec<TimestampedSample>, DatastoreError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let kind = match header.get(1).map(String::as_str) {
        None => None,
        Some("step_id") => Some(ModalityKind::Trace),
        Some("bx") => Some(ModalityKind::Flux),
        Some("theta_deg") => Some(ModalityKind::Angle),
        Some("event") => Some(ModalityKind::Actuation),
        Some(other) => {
            return Err(DatastoreError::Parse {
                line: 1,
                message: format!("unrecognized column {other:?}"),
            })
        }
    };
    let n_points = match kind {
        Some(ModalityKind::Trace) => {
            let g = grid.ok_or_else(|| DatastoreError::Parse {
                line: 1,
                message: "trace CSV needs a frequency grid".into(),
            })?;
            g.n_points()
        }
        _ => 0,
    };
    if let Some(k) = kind {
        if header != k.header(n_points) {
            return Err(DatastoreError::Parse {
                line: 1,
                message: "header does not match the expected columns".into(),
            });
        }
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        if f.len() != header.len() {
            return Err(DatastoreError::Parse {
                line,
                message: format!("expected {} fields, got {}", header.len(), f.len()),
            });
        }
        let t_ms = parse_f64(f[0], line)?;
        let bad = |e: String| DatastoreError::Parse { line, message: e };
        let payload = match kind {
            None => return Err(bad("data row without payload columns".into())),
            Some(ModalityKind::Trace) => {
                let values = (0..n_points)
                    .map(|k| Ok(Complex64::new(parse_f64(f[4 + 2 * k], line)?, parse_f64(f[5 + 2 * k], line)?)))
                    .collect::<Result<Vec<_>, DatastoreError>>()?;
                let trace = ComplexTrace::new(*grid.expect("checked above"), values, PortPath::new(f[2], f[3]))
                    .map_err(|e| bad(e.to_string()))?;
                Payload::Trace {
                    step_id: parse_int(f[1], line)?,
                    trace,
                }
            }
            Some(ModalityKind::Flux) => Payload::Flux {
                flux: MagneticFluxSample::new([parse_f64(f[1], line)?, parse_f64(f[2], line)?, parse_f64(f[3], line)?])
                    .map_err(|e| bad(e.to_string()))?,
            },
            Some(ModalityKind::Angle) => Payload::Angle {
                angle: AngleSample::new(parse_f64(f[1], line)?).map_err(|e| bad(e.to_string()))?,
            },
            Some(ModalityKind::Actuation) => Payload::Actuation {
                event: ActuationEvent {
                    t_ms,
                    event: f[1].to_string(),
                    position: parse_int(f[2], line)?,
                    n_steps: parse_int(f[3], line)?,
                    device: f[4].to_string(),
                },
            },
        };
        out.push(TimestampedSample {
            t_ms,
            modality: modality.to_string(),
            payload,
        });
    }
    Ok(out)
}
