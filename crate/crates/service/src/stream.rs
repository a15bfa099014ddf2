use std::collections::{BTreeSet, HashMap};
use std::convert::Infallible;

use axum::extract::{Path, Query, State};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use futures::stream::{self, Stream, StreamExt};
use mpada_core::acquisition::{Payload, TimestampedSample};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::api::{entry, ApiError};
use crate::state::{AppState, StreamItem};

/// Flat JSON for one streamed sample: `t_ms`, `modality`, `type` and the
/// payload fields. Traces keep every `decimate`-th frequency point.
pub fn sample_json(s: &TimestampedSample, decimate: usize) -> Value {
    match &s.payload {
        Payload::Trace { step_id, trace } => {
            let k = decimate.max(1);
            let freqs: Vec<f64> = trace.grid().frequencies().into_iter().step_by(k).collect();
            let vals: Vec<_> = trace.values().iter().step_by(k).collect();
            json!({
                "t_ms": s.t_ms,
                "modality": s.modality,
                "type": "trace",
                "step_id": step_id,
                "tx": trace.path().tx,
                "rx": trace.path().rx,
                "f_hz": freqs,
                "re": vals.iter().map(|v| v.re).collect::<Vec<_>>(),
                "im": vals.iter().map(|v| v.im).collect::<Vec<_>>(),
            })
        }
        other => {
            let mut v = serde_json::to_value(other).expect("payload serializes");
            v["t_ms"] = json!(s.t_ms);
            v["modality"] = json!(s.modality);
            v
        }
    }
}

fn end_event(view: &impl serde::Serialize) -> Event {
    Event::default().event("end").json_data(view).expect("view serializes")
}

/// `?modalities=a,b` filters, `?decimate=k` thins traces. Events are
/// `sample`, then exactly one `end`; a consumer that falls behind gets
/// `dropped` and is disconnected.
pub async fn stream_handler(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let e = entry(&state, &id)?;
    let filter: Option<BTreeSet<String>> = q
        .get("modalities")
        .map(|m| m.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect());
    let decimate = match q.get("decimate") {
        Some(d) => d
            .parse::<usize>()
            .ok()
            .filter(|d| *d > 0)
            .ok_or_else(|| ApiError::BadRequest(format!("bad decimate {d:?}")))?,
        None => state.config().stream_decimation,
    };
    let (rx, finished) = e.subscribe();
    let events: std::pin::Pin<Box<dyn Stream<Item = Result<Event, Infallible>> + Send>> = match finished {
        Some(view) => Box::pin(stream::once(async move { Ok(end_event(&view)) })),
        None => Box::pin(live(rx, filter, decimate)),
    };
    Ok(Sse::new(events).keep_alive(KeepAlive::default()).into_response())
}

#[derive(Debug)]
enum LiveEvent {
    Sample(Value),
    End(Box<crate::state::ApiSessionView>),
    Dropped(u64),
}

impl LiveEvent {
    fn into_event(self) -> Event {
        match self {
            LiveEvent::Sample(v) => Event::default().event("sample").data(v.to_string()),
            LiveEvent::End(view) => end_event(&view),
            LiveEvent::Dropped(n) => Event::default()
                .event("dropped")
                .data(json!({ "reason": "consumer too slow", "missed": n }).to_string()),
        }
    }
}

fn live(
    rx: tokio::sync::broadcast::Receiver<StreamItem>,
    filter: Option<BTreeSet<String>>,
    decimate: usize,
) -> impl Stream<Item = Result<Event, Infallible>> + Send {
    live_events(rx, filter, decimate).map(|e| Ok(e.into_event()))
}

fn live_events(
    rx: tokio::sync::broadcast::Receiver<StreamItem>,
    filter: Option<BTreeSet<String>>,
    decimate: usize,
) -> impl Stream<Item = LiveEvent> + Send {
    stream::unfold(Some(rx), move |rx| {
        let filter = filter.clone();
        async move {
            let mut rx = rx?;
            loop {
                match rx.recv().await {
                    Ok(StreamItem::Sample(s)) => {
                        if filter.as_ref().is_some_and(|f| !f.contains(&s.modality)) {
                            continue;
                        }
                        return Some((LiveEvent::Sample(sample_json(&s, decimate)), Some(rx)));
                    }
                    Ok(StreamItem::End(view)) => return Some((LiveEvent::End(view), None)),
                    Err(RecvError::Lagged(n)) => return Some((LiveEvent::Dropped(n), None)),
                    Err(RecvError::Closed) => return None,
                }
            }
        }
    })
}
