use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::acquisition::plan::AcquisitionPlan;
use crate::peripheral::{ActuationEvent, AngleSample, MagneticFluxSample};
use crate::vna::ComplexTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Trace { step_id: u32, trace: ComplexTrace },
    Flux { flux: MagneticFluxSample },
    Angle { angle: AngleSample },
    Actuation { event: ActuationEvent },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampedSample {
    /// Epoch milliseconds from the session clock.
    pub t_ms: f64,
    pub modality: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GapKind {
    Overrun { skipped_ticks: u64 },
    Error { message: String },
    BufferFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMarker {
    pub t_ms: f64,
    pub modality: String,
    #[serde(flatten)]
    pub kind: GapKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Running,
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub plan: AcquisitionPlan,
    pub state: SessionState,
    /// Epoch milliseconds of the clock anchor.
    pub clock_anchor_ms: f64,
    pub buffers: BTreeMap<String, Vec<TimestampedSample>>,
    pub gaps: Vec<GapMarker>,
    /// Set when any modality stopped early or recorded an error.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

impl Session {
    pub fn new(plan: AcquisitionPlan) -> Self {
        Session {
            id: Uuid::new_v4().to_string(),
            plan,
            state: SessionState::Idle,
            clock_anchor_ms: 0.0,
            buffers: BTreeMap::new(),
            gaps: Vec::new(),
            partial: false,
            abort_reason: None,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.buffers.values().map(Vec::len).sum()
    }

    pub fn modality(&self, id: &str) -> &[TimestampedSample] {
        self.buffers.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every sample across modalities, ordered by timestamp.
    pub fn merged(&self) -> Vec<&TimestampedSample> {
        let mut all: Vec<&TimestampedSample> = self.buffers.values().flatten().collect();
        all.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms));
        all
    }

    /// Sample timestamps of one modality, in acquisition order.
    pub fn timestamps(&self, id: &str) -> Vec<f64> {
        self.modality(id).iter().map(|s| s.t_ms).collect()
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            state: self.state,
            partial: self.partial,
            abort_reason: self.abort_reason.clone(),
            counts: self.buffers.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
            gaps: self.gaps.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub state: SessionState,
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub counts: BTreeMap<String, usize>,
    pub gaps: usize,
}
