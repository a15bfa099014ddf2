use std::collections::HashMap;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mpada_core::acquisition::{AcquisitionPlan, PlanViolation, SessionState};
use serde_json::json;

use crate::export::{export, ExportFormat};
use crate::script::{run_script, ScriptDocument};
use crate::state::{AppState, StateConflict, SubmitError};
use crate::stream::stream_handler;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("no session {0}")]
    NotFound(String),
    #[error("cannot {action} a session that is {state:?}")]
    Conflict { action: &'static str, state: SessionState },
    #[error("plan rejected")]
    Invalid(Vec<PlanViolation>),
    #[error("{0}")]
    Unprocessable(String),
    #[error("instrument unavailable: {0}")]
    Instrument(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict { .. } => StatusCode::CONFLICT,
            ApiError::Invalid(_) | ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Instrument(_) => StatusCode::BAD_GATEWAY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<StateConflict> for ApiError {
    fn from(c: StateConflict) -> Self {
        ApiError::Conflict {
            action: c.action,
            state: c.state,
        }
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        match e {
            SubmitError::Invalid(v) => ApiError::Invalid(v),
            SubmitError::Instrument(m) => ApiError::Instrument(m),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.to_string() });
        if let ApiError::Invalid(v) = &self {
            body["violations"] = json!(v);
        }
        (self.status(), Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/plans", post(submit_plan))
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/start", post(start_session))
        .route("/api/sessions/{id}/stop", post(stop_session))
        .route("/api/sessions/{id}/stream", get(stream_handler))
        .route("/api/sessions/{id}/export", get(export_session))
        .route("/api/script", post(script))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    api.with_state(state)
}

/// Accepts `Authorization: Bearer <token>`, or `access_token=<token>` in the
/// query string for clients that cannot set headers.
async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let Some(expected) = state.config().token.as_deref() else {
        return next.run(req).await;
    };
    let header_ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == expected);
    let query_ok = req
        .uri()
        .query()
        .into_iter()
        .flat_map(|q| q.split('&'))
        .any(|kv| kv.strip_prefix("access_token=") == Some(expected));
    if header_ok || query_ok {
        next.run(req).await
    } else {
        ApiError::Unauthorized.into_response()
    }
}

pub(crate) fn parse_plan(body: &[u8]) -> Result<AcquisitionPlan, ApiError> {
    let text = std::str::from_utf8(body).map_err(|e| ApiError::BadRequest(format!("body is not UTF-8: {e}")))?;
    AcquisitionPlan::from_json(text).map_err(|e| ApiError::BadRequest(format!("malformed plan: {e}")))
}

pub(crate) async fn submit(state: &AppState, plan: AcquisitionPlan) -> Result<String, ApiError> {
    let st = state.clone();
    let entry = tokio::task::spawn_blocking(move || st.submit_blocking(plan))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(entry.id.clone())
}

async fn submit_plan(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    if let Some(ct) = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()) {
        if !ct.starts_with("application/json") {
            return Err(ApiError::BadRequest(format!("unsupported content type {ct}")));
        }
    }
    let plan = parse_plan(&body)?;
    let id = submit(&state, plan).await?;
    let view = state.get(&id).map(|e| e.view());
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "session": view }))).into_response())
}

async fn list_sessions(State(state): State<AppState>) -> Response {
    Json(state.list()).into_response()
}

pub(crate) fn entry(state: &AppState, id: &str) -> Result<std::sync::Arc<crate::state::SessionEntry>, ApiError> {
    state.get(id).ok_or_else(|| ApiError::NotFound(id.to_string()))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(entry(&state, &id)?.view()).into_response())
}

async fn start_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let e = entry(&state, &id)?;
    Ok(Json(e.start(state.config())?).into_response())
}

/// Time allowed for an engine to wind down after a stop request.
pub(crate) fn stop_grace(plan: &AcquisitionPlan) -> Duration {
    plan.timeout() * 2 + Duration::from_secs(5)
}

async fn stop_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let e = entry(&state, &id)?;
    e.request_stop()?;
    if !e.wait_finished(stop_grace(&e.plan)).await {
        return Err(ApiError::Internal("engine did not stop in time".into()));
    }
    Ok(Json(e.view()).into_response())
}

async fn export_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let e = entry(&state, &id)?;
    let format = match q.get("format").map(String::as_str) {
        Some(f) => f.parse::<ExportFormat>().map_err(ApiError::BadRequest)?,
        None => return Err(ApiError::BadRequest("format is required (csv, s2p or snapshot)".into())),
    };
    let session = e.result().ok_or(ApiError::Conflict {
        action: "export",
        state: e.state(),
    })?;
    let selector = match format {
        ExportFormat::Csv => q.get("modality").cloned(),
        ExportFormat::S2p => q.get("index").cloned(),
        ExportFormat::Snapshot => None,
    };
    let out = tokio::task::spawn_blocking(move || export(&session, format, selector.as_deref()))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((
        [
            (header::CONTENT_TYPE, out.content_type.to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{}\"", out.filename)),
        ],
        out.bytes,
    )
        .into_response())
}

async fn script(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let doc: ScriptDocument =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("malformed script: {e}")))?;
    let commands = doc.compile().map_err(ApiError::Unprocessable)?;
    Ok(Json(run_script(&state, commands).await).into_response())
}
