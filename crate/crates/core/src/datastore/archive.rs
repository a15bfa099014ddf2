//! Session archives: `<root>/<session-id>/` holding `manifest.json`,
//! `<modality>.csv`, `trace-<k>.s2p` and raw little-endian arrays
//! `<modality>.<field>.bin`. The manifest records a SHA-256 per file and
//! one over the whole file list.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{AcquisitionPlan, GapMarker, Payload, Session, SessionState, TimestampedSample};
use crate::datastore::timeseries::{check_modality_id, modality_ids, modality_kind, write_timeseries_csv, ModalityKind};
use crate::datastore::touchstone::write_touchstone;
use crate::datastore::DatastoreError;
use crate::peripheral::{ActuationEvent, AngleSample, MagneticFluxSample};
use crate::vna::{ComplexTrace, PortPath};

pub const FORMAT: &str = "mpada-session-archive";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F64Le,
    U32Le,
    I64Le,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64Le | Dtype::I64Le => 8,
            Dtype::U32Le => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub field: String,
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub id: String,
    pub kind: Option<ModalityKind>,
    pub count: usize,
    pub csv: String,
    pub arrays: Vec<ArrayEntry>,
    /// String table indexed by `*_idx` arrays.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub file: String,
    pub modality: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub id: String,
    pub state: SessionState,
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub clock_anchor_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub software_version: String,
    pub session: SessionHeader,
    pub plan: AcquisitionPlan,
    pub gaps: Vec<GapMarker>,
    pub modalities: Vec<ModalityEntry>,
    pub traces: Vec<TraceFile>,
    /// File name to lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
    /// SHA-256 over `"<name> <sha256>\n"` for every entry of `files`.
    pub archive_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn archive_hash(files: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, digest) in files {
        h.update(name.as_bytes());
        h.update(b" ");
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Default)]
struct Columns {
    f64s: BTreeMap<&'static str, (Vec<f64>, Vec<usize>)>,
    u32s: BTreeMap<&'static str, Vec<u32>>,
    i64s: BTreeMap<&'static str, Vec<i64>>,
    labels: Vec<String>,
}

impl Columns {
    fn label(&mut self, s: &str) -> u32 {
        match self.labels.iter().position(|l| l == s) {
            Some(i) => i as u32,
            None => {
                self.labels.push(s.to_string());
                (self.labels.len() - 1) as u32
            }
        }
    }
}

fn columns(kind: Option<ModalityKind>, samples: &[TimestampedSample], n_points: usize) -> Columns {
    let mut c = Columns::default();
    let count = samples.len();
    c.f64s.insert("t", (samples.iter().map(|s| s.t_ms).collect(), vec![count]));
    match kind {
        None => {}
        Some(ModalityKind::Trace) => {
            let mut values = Vec::with_capacity(count * n_points * 2);
            let mut step = Vec::with_capacity(count);
            let mut tx = Vec::with_capacity(count);
            let mut rx = Vec::with_capacity(count);
            for s in samples {
                if let Payload::Trace { step_id, trace } = &s.payload {
                    step.push(*step_id);
                    tx.push(c.label(&trace.path().tx));
                    rx.push(c.label(&trace.path().rx));
                    for v in trace.values() {
                        values.push(v.re);
                        values.push(v.im);
                    }
                }
            }
            c.f64s.insert("values", (values, vec![count, n_points, 2]));
            c.u32s.insert("step_id", step);
            c.u32s.insert("tx_idx", tx);
            c.u32s.insert("rx_idx", rx);
        }
        Some(ModalityKind::Flux) => {
            let v = samples
                .iter()
                .flat_map(|s| match &s.payload {
                    Payload::Flux { flux } => flux.b().to_vec(),
                    _ => Vec::new(),
                })
                .collect();
            c.f64s.insert("values", (v, vec![count, 3]));
        }
        Some(ModalityKind::Angle) => {
            let v = samples
                .iter()
                .filter_map(|s| match &s.payload {
                    Payload::Angle { angle } => Some(angle.theta_deg()),
                    _ => None,
                })
                .collect();
            c.f64s.insert("values", (v, vec![count]));
        }
        Some(ModalityKind::Actuation) => {
            let (mut pos, mut steps, mut ev, mut dev) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for s in samples {
                if let Payload::Actuation { event } = &s.payload {
                    pos.push(event.position);
                    steps.push(event.n_steps);
                    ev.push(c.label(&event.event));
                    dev.push(c.label(&event.device));
                }
            }
            c.i64s.insert("position", pos);
            c.i64s.insert("n_steps", steps);
            c.u32s.insert("event_idx", ev);
            c.u32s.insert("device_idx", dev);
        }
    }
    c
}

/// Every trace across modalities in timestamp order, as s2p files.
pub fn trace_files(session: &Session) -> Result<Vec<(TraceFile, String)>, DatastoreError> {
    let mut all: Vec<(&String, usize, &TimestampedSample)> = session
        .buffers
        .iter()
        .flat_map(|(m, v)| v.iter().enumerate().map(move |(i, s)| (m, i, s)))
        .filter(|(_, _, s)| matches!(s.payload, Payload::Trace { .. }))
        .collect();
    all.sort_by(|a, b| a.2.t_ms.total_cmp(&b.2.t_ms));
    all.into_iter()
        .enumerate()
        .map(|(k, (m, i, s))| {
            let Payload::Trace { trace, .. } = &s.payload else { unreachable!() };
            Ok((
                TraceFile {
                    file: format!("trace-{k}.s2p"),
                    modality: m.clone(),
                    index: i,
                },
                write_touchstone(trace)?,
            ))
        })
        .collect()
}

/// All archive files and the manifest, without touching the filesystem.
pub fn build_archive(session: &Session) -> Result<(Manifest, Vec<(String, Vec<u8>)>), DatastoreError> {
    if session.state == SessionState::Running {
        return Err(DatastoreError::SessionRunning);
    }
    let n_points = session.plan.grid.n_points();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let csvs: BTreeMap<String, String> = write_timeseries_csv(session)?.into_iter().collect();
    let mut modalities = Vec::new();
    for id in modality_ids(session) {
        check_modality_id(&id)?;
        let kind = modality_kind(session, &id)?;
        let samples = session.modality(&id);
        let cols = columns(kind, samples, n_points);
        let mut arrays = Vec::new();
        for (field, (data, shape)) in &cols.f64s {
            let file = format!("{id}.{field}.bin");
            files.push((file.clone(), data.iter().flat_map(|x| x.to_le_bytes()).collect()));
            arrays.push(ArrayEntry { field: field.to_string(), file, dtype: Dtype::F64Le, shape: shape.clone() });
        }
        for (field, data) in &cols.u32s {
            let file = format!("{id}.{field}.bin");
            files.push((file.clone(), data.iter().flat_map(|x| x.to_le_bytes()).collect()));
            arrays.push(ArrayEntry { field: field.to_string(), file, dtype: Dtype::U32Le, shape: vec![data.len()] });
        }
        for (field, data) in &cols.i64s {
            let file = format!("{id}.{field}.bin");
            files.push((file.clone(), data.iter().flat_map(|x| x.to_le_bytes()).collect()));
            arrays.push(ArrayEntry { field: field.to_string(), file, dtype: Dtype::I64Le, shape: vec![data.len()] });
        }
        let csv_name = format!("{id}.csv");
        files.push((csv_name.clone(), csvs[&csv_name].clone().into_bytes()));
        modalities.push(ModalityEntry {
            id,
            kind,
            count: samples.len(),
            csv: csv_name,
            arrays,
            labels: cols.labels,
        });
    }
    let mut traces = Vec::new();
    for (entry, text) in trace_files(session)? {
        files.push((entry.file.clone(), text.into_bytes()));
        traces.push(entry);
    }
    let digests: BTreeMap<String, String> = files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        software_version: env!("CARGO_PKG_VERSION").into(),
        session: SessionHeader {
            id: session.id.clone(),
            state: session.state,
            partial: session.partial,
            abort_reason: session.abort_reason.clone(),
            clock_anchor_ms: session.clock_anchor_ms,
        },
        plan: session.plan.clone(),
        gaps: session.gaps.clone(),
        modalities,
        traces,
        archive_sha256: archive_hash(&digests),
        files: digests,
    };
    Ok((manifest, files))
}

pub fn manifest_json(manifest: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}

/// Write the archive under `root/<session-id>/` and return that directory.
pub fn write_archive(session: &Session, root: &Path) -> Result<PathBuf, DatastoreError> {
    check_modality_id(&session.id)?;
    let (manifest, files) = build_archive(session)?;
    let dir = root.join(&session.id);
    fs::create_dir_all(&dir)?;
    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
    }
    fs::write(dir.join(MANIFEST), manifest_json(&manifest))?;
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatastoreError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| DatastoreError::Parse { line: e.line(), message: e.to_string() })?;
    if m.format != FORMAT || m.format_version != FORMAT_VERSION {
        return Err(DatastoreError::UnsupportedFormat(format!("{} v{}", m.format, m.format_version)));
    }
    Ok(m)
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Reader<'_> {
    fn bytes(&self, entry: &ArrayEntry) -> Result<Vec<u8>, DatastoreError> {
        let expected = self
            .manifest
            .files
            .get(&entry.file)
            .ok_or_else(|| DatastoreError::Integrity(format!("{} is not listed in the manifest", entry.file)))?;
        let bytes = fs::read(self.dir.join(&entry.file))?;
        if &sha256_hex(&bytes) != expected {
            return Err(DatastoreError::Integrity(format!("{} hash mismatch", entry.file)));
        }
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * entry.dtype.width() {
            return Err(DatastoreError::Integrity(format!("{} has {} bytes, shape {:?}", entry.file, bytes.len(), entry.shape)));
        }
        Ok(bytes)
    }

    fn array<'e>(&self, m: &'e ModalityEntry, field: &str, dtype: Dtype) -> Result<&'e ArrayEntry, DatastoreError> {
        m.arrays
            .iter()
            .find(|a| a.field == field && a.dtype == dtype)
            .ok_or_else(|| DatastoreError::Integrity(format!("{}: missing array {field}", m.id)))
    }

    fn f64s(&self, m: &ModalityEntry, field: &str) -> Result<Vec<f64>, DatastoreError> {
        let b = self.bytes(self.array(m, field, Dtype::F64Le)?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn u32s(&self, m: &ModalityEntry, field: &str) -> Result<Vec<u32>, DatastoreError> {
        let b = self.bytes(self.array(m, field, Dtype::U32Le)?)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn i64s(&self, m: &ModalityEntry, field: &str) -> Result<Vec<i64>, DatastoreError> {
        let b = self.bytes(self.array(m, field, Dtype::I64Le)?)?;
        Ok(b.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn label(m: &ModalityEntry, idx: u32) -> Result<String, DatastoreError> {
    m.labels
        .get(idx as usize)
        .cloned()
        .ok_or_else(|| DatastoreError::Integrity(format!("{}: label index {idx} out of range", m.id)))
}

/// Verify every file hash and rebuild the session from the raw arrays.
pub fn read_archive(dir: &Path) -> Result<Session, DatastoreError> {
    let manifest = read_manifest(dir)?;
    if archive_hash(&manifest.files) != manifest.archive_sha256 {
        return Err(DatastoreError::Integrity("archive hash mismatch".into()));
    }
    for (name, digest) in &manifest.files {
        let bytes = fs::read(dir.join(name))?;
        if &sha256_hex(&bytes) != digest {
            return Err(DatastoreError::Integrity(format!("{name} hash mismatch")));
        }
    }
    let rd = Reader { dir, manifest: &manifest };
    let grid = manifest.plan.grid;
    let n_points = grid.n_points();
    let mut buffers = BTreeMap::new();
    for m in &manifest.modalities {
        let t = rd.f64s(m, "t")?;
        if t.len() != m.count {
            return Err(DatastoreError::Integrity(format!("{}: count mismatch", m.id)));
        }
        let mut samples = Vec::with_capacity(m.count);
        let bad = |e: String| DatastoreError::Integrity(format!("{}: {e}", m.id));
        match m.kind {
            None if m.count > 0 => return Err(bad("samples without a kind".into())),
            None => {}
            Some(ModalityKind::Trace) => {
                let values = rd.f64s(m, "values")?;
                let step = rd.u32s(m, "step_id")?;
                let tx = rd.u32s(m, "tx_idx")?;
                let rx = rd.u32s(m, "rx_idx")?;
                if values.len() != m.count * n_points * 2 || [step.len(), tx.len(), rx.len()].iter().any(|&l| l != m.count) {
                    return Err(bad("array length mismatch".into()));
                }
                for i in 0..m.count {
                    let row = &values[i * n_points * 2..(i + 1) * n_points * 2];
                    let v = row.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
                    let path = PortPath::new(label(m, tx[i])?, label(m, rx[i])?);
                    let trace = ComplexTrace::new(grid, v, path).map_err(|e| bad(e.to_string()))?;
                    samples.push(Payload::Trace { step_id: step[i], trace });
                }
            }
            Some(ModalityKind::Flux) => {
                let v = rd.f64s(m, "values")?;
                for c in v.chunks_exact(3) {
                    let flux = MagneticFluxSample::new([c[0], c[1], c[2]]).map_err(|e| bad(e.to_string()))?;
                    samples.push(Payload::Flux { flux });
                }
            }
            Some(ModalityKind::Angle) => {
                for x in rd.f64s(m, "values")? {
                    let angle = AngleSample::new(x).map_err(|e| bad(e.to_string()))?;
                    samples.push(Payload::Angle { angle });
                }
            }
            Some(ModalityKind::Actuation) => {
                let pos = rd.i64s(m, "position")?;
                let steps = rd.i64s(m, "n_steps")?;
                let ev = rd.u32s(m, "event_idx")?;
                let dev = rd.u32s(m, "device_idx")?;
                if [pos.len(), steps.len(), ev.len(), dev.len()].iter().any(|&l| l != m.count) {
                    return Err(bad("array length mismatch".into()));
                }
                for i in 0..m.count {
                    samples.push(Payload::Actuation {
                        event: ActuationEvent {
                            t_ms: t[i],
                            device: label(m, dev[i])?,
                            event: label(m, ev[i])?,
                            n_steps: steps[i],
                            position: pos[i],
                        },
                    });
                }
            }
        }
        if samples.len() != m.count {
            return Err(bad("array length mismatch".into()));
        }
        if m.count > 0 {
            buffers.insert(
                m.id.clone(),
                t.iter()
                    .zip(samples)
                    .map(|(&t_ms, payload)| TimestampedSample { t_ms, modality: m.id.clone(), payload })
                    .collect(),
            );
        }
    }
    Ok(Session {
        id: manifest.session.id.clone(),
        plan: manifest.plan.clone(),
        state: manifest.session.state,
        clock_anchor_ms: manifest.session.clock_anchor_ms,
        buffers,
        gaps: manifest.gaps.clone(),
        partial: manifest.session.partial,
        abort_reason: manifest.session.abort_reason.clone(),
    })
}
