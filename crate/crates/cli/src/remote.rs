//! `run` against a service URL: submit, start, poll, download snapshot.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use mpada_core::acquisition::{AcquisitionPlan, PlanViolation, SessionState};
use mpada_core::datastore::read_archive;
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::{json, Value};

use crate::run::{exit_code, violations};
use crate::Failure;

const POLL: Duration = Duration::from_millis(200);

struct Api<'a> {
    base: String,
    token: Option<&'a str>,
    client: Client,
}

impl Api<'_> {
    fn auth(&self, r: RequestBuilder) -> RequestBuilder {
        match self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    fn send(&self, r: RequestBuilder) -> Result<Response, Failure> {
        self.auth(r)
            .send()
            .map_err(|e| Failure::config(format!("connection error: {}: {e}", self.base)))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn json(&self, r: Response) -> Result<Value, Failure> {
        let status = r.status();
        let body: Value = r.json().unwrap_or(Value::Null);
        if status.is_success() {
            Ok(body)
        } else {
            Err(Failure::config(format!("{status}: {}", body["error"].as_str().unwrap_or("request failed"))))
        }
    }
}

pub fn run(base: &str, token: Option<&str>, plan: AcquisitionPlan, out: &Path, json_out: bool) -> Result<u8, Failure> {
    let api = Api {
        base: base.trim_end_matches('/').to_string(),
        token,
        client: Client::builder()
            .timeout(None)
            .build()
            .map_err(|e| Failure::config(e.to_string()))?,
    };
    let r = api.send(
        api.client
            .post(api.url("/api/plans"))
            .header("content-type", "application/json")
            .body(plan.to_json()),
    )?;
    if r.status().as_u16() == 422 {
        let body: Value = r.json().unwrap_or(Value::Null);
        let v: Vec<PlanViolation> = serde_json::from_value(body["violations"].clone()).unwrap_or_default();
        if !v.is_empty() {
            return Err(violations(&v));
        }
        return Err(Failure::config(body["error"].as_str().unwrap_or("plan rejected").to_string()));
    }
    let id = api.json(r)?["id"]
        .as_str()
        .ok_or_else(|| Failure::config("service returned no session id"))?
        .to_string();
    api.json(api.send(api.client.post(api.url(&format!("/api/sessions/{id}/start"))))?)?;

    let view = loop {
        let v = api.json(api.send(api.client.get(api.url(&format!("/api/sessions/{id}"))))?)?;
        let state: SessionState = serde_json::from_value(v["state"].clone()).map_err(|e| Failure::config(e.to_string()))?;
        if matches!(state, SessionState::Complete | SessionState::Aborted) {
            break v;
        }
        thread::sleep(POLL);
    };

    let r = api.send(api.client.get(api.url(&format!("/api/sessions/{id}/export?format=snapshot"))))?;
    if !r.status().is_success() {
        return Err(Failure::config(format!("snapshot download failed: {}", r.status())));
    }
    let bytes = r.bytes().map_err(|e| Failure::config(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| Failure::config(format!("{}: {e}", out.display())))?;
    tar::Archive::new(&bytes[..])
        .unpack(out)
        .map_err(|e| Failure::config(format!("unpacking snapshot: {e}")))?;
    let dir = out.join(&id);
    let session = read_archive(&dir).map_err(|e| Failure::config(format!("downloaded archive: {e}")))?;
    if json_out {
        println!("{}", json!({ "session": session.summary(), "archive": dir.display().to_string() }));
    } else {
        eprintln!("session {id} {}: -> {}", view["state"], dir.display());
    }
    Ok(exit_code(session.state))
}
