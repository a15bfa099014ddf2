//! Batch scripts: an ordered list of `{verb, args}` records run against a
//! working plan and the session it was last submitted as.
//!
//! Verbs: `set_plan`, `set_grid`, `set_duration`, `set_instrument`,
//! `submit`, `start`, `stop`, `wait`, `status`, `export_csv`,
//! `export_s2p`, `export_snapshot`. Arguments are positional (array) or
//! named (object).

use std::time::Duration;

use mpada_core::acquisition::{AcquisitionPlan, SessionState};
use mpada_core::vna::FrequencyGrid;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{stop_grace, submit, ApiError};
use crate::export::{export, ExportFormat};
use crate::state::AppState;

pub const DEFAULT_WAIT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptCommand {
    pub verb: String,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ScriptDocument {
    Wrapped { commands: Vec<ScriptCommand> },
    Bare(Vec<ScriptCommand>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub index: usize,
    pub verb: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptReport {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    pub entries: Vec<ScriptEntry>,
}

/// Plan a script starts from: one direct-path S21 modality at 100 ms
/// for 5 s over 20-60 MHz.
pub fn default_script_plan() -> AcquisitionPlan {
    AcquisitionPlan::from_json(
        r#"{"mode": "parallel", "duration_ms": 5000,
            "grid": {"start_hz": 2e7, "stop_hz": 6e7, "n_points": 101},
            "modalities": [{"id": "s21", "device": "vna", "interval_ms": 100}]}"#,
    )
    .expect("default plan parses")
}

#[derive(Debug, Clone)]
pub(crate) enum Command {
    SetPlan(Box<AcquisitionPlan>),
    SetGrid(FrequencyGrid),
    SetDuration(u64),
    SetInstrument(Option<String>),
    Submit,
    Start,
    Stop,
    Wait(Duration),
    Status,
    Export(ExportFormat, Option<String>),
}

fn arg<'a>(args: &'a Value, idx: usize, name: &str) -> Option<&'a Value> {
    match args {
        Value::Array(a) => a.get(idx),
        Value::Object(o) => o.get(name),
        _ if idx == 0 && !args.is_null() => Some(args),
        _ => None,
    }
}

fn num(args: &Value, idx: usize, name: &str) -> Result<f64, String> {
    arg(args, idx, name)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("argument {name} must be a number"))
}

fn opt_str(args: &Value, idx: usize, name: &str) -> Result<Option<String>, String> {
    match arg(args, idx, name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("argument {name} must be a string")),
    }
}

fn compile_one(c: &ScriptCommand) -> Result<Command, String> {
    let a = &c.args;
    Ok(match c.verb.as_str() {
        "set_plan" => {
            let v = arg(a, 0, "plan").ok_or("argument plan is required")?;
            Command::SetPlan(Box::new(serde_json::from_value(v.clone()).map_err(|e| format!("plan: {e}"))?))
        }
        "set_grid" => {
            let n = num(a, 2, "n_points")?;
            if n.fract() != 0.0 || n < 1.0 {
                return Err("n_points must be a positive integer".into());
            }
            Command::SetGrid(
                FrequencyGrid::new(num(a, 0, "start_hz")?, num(a, 1, "stop_hz")?, n as usize).map_err(|e| e.to_string())?,
            )
        }
        "set_duration" => {
            let ms = num(a, 0, "duration_ms")?;
            if ms.fract() != 0.0 || ms < 1.0 {
                return Err("duration_ms must be a positive integer".into());
            }
            Command::SetDuration(ms as u64)
        }
        "set_instrument" => Command::SetInstrument(opt_str(a, 0, "address")?),
        "submit" => Command::Submit,
        "start" => Command::Start,
        "stop" => Command::Stop,
        "wait" => {
            let t = match arg(a, 0, "timeout_s") {
                None | Some(Value::Null) => DEFAULT_WAIT,
                Some(v) => {
                    let s = v.as_f64().filter(|s| *s >= 0.0 && s.is_finite()).ok_or("timeout_s must be a non-negative number")?;
                    Duration::from_secs_f64(s)
                }
            };
            Command::Wait(t)
        }
        "status" => Command::Status,
        "export_csv" => Command::Export(ExportFormat::Csv, opt_str(a, 0, "modality")?),
        "export_s2p" => Command::Export(ExportFormat::S2p, None),
        "export_snapshot" => Command::Export(ExportFormat::Snapshot, None),
        other => return Err(format!("unknown verb {other:?}")),
    })
}

impl ScriptDocument {
    pub fn commands(&self) -> &[ScriptCommand] {
        match self {
            ScriptDocument::Wrapped { commands } | ScriptDocument::Bare(commands) => commands,
        }
    }

    /// Check every record before anything runs.
    pub(crate) fn compile(&self) -> Result<Vec<(String, Command)>, String> {
        self.commands()
            .iter()
            .enumerate()
            .map(|(i, c)| compile_one(c).map(|cmd| (c.verb.clone(), cmd)).map_err(|e| format!("command {i} ({}): {e}", c.verb)))
            .collect()
    }
}

struct Runner<'a> {
    state: &'a AppState,
    plan: AcquisitionPlan,
    session: Option<String>,
}

impl Runner<'_> {
    fn current(&self) -> Result<std::sync::Arc<crate::state::SessionEntry>, String> {
        let id = self.session.as_deref().ok_or("no session submitted yet")?;
        self.state.get(id).ok_or_else(|| format!("session {id} vanished"))
    }

    async fn exec(&mut self, cmd: Command) -> Result<Value, String> {
        let err = |e: ApiError| e.to_string();
        match cmd {
            Command::SetPlan(p) => {
                self.plan = *p;
                Ok(Value::Null)
            }
            Command::SetGrid(g) => {
                self.plan.grid = g;
                Ok(json!({ "n_points": g.n_points() }))
            }
            Command::SetDuration(ms) => {
                self.plan.duration_ms = ms;
                Ok(Value::Null)
            }
            Command::SetInstrument(a) => {
                self.plan.instrument = a;
                Ok(Value::Null)
            }
            Command::Submit => {
                let id = submit(self.state, self.plan.clone()).await.map_err(|e| match e {
                    ApiError::Invalid(v) => {
                        let msgs: Vec<String> = v.iter().map(|x| format!("{}: {}", x.field, x.message)).collect();
                        format!("plan rejected: {}", msgs.join("; "))
                    }
                    other => other.to_string(),
                })?;
                self.session = Some(id.clone());
                Ok(json!({ "id": id }))
            }
            Command::Start => {
                let e = self.current()?;
                let view = e.start(self.state.config()).map_err(|c| err(c.into()))?;
                Ok(json!({ "state": view.state }))
            }
            Command::Stop => {
                let e = self.current()?;
                e.request_stop().map_err(|c| err(c.into()))?;
                if !e.wait_finished(stop_grace(&e.plan)).await {
                    return Err("engine did not stop in time".into());
                }
                Ok(json!({ "state": e.state() }))
            }
            Command::Wait(t) => {
                let e = self.current()?;
                if e.state() == SessionState::Idle {
                    return Err("session has not been started".into());
                }
                if !e.wait_finished(t).await {
                    return Err(format!("session still running after {} s", t.as_secs_f64()));
                }
                Ok(json!({ "state": e.state() }))
            }
            Command::Status => Ok(serde_json::to_value(self.current()?.view()).expect("view serializes")),
            Command::Export(format, selector) => {
                let e = self.current()?;
                let session = e.result().ok_or("session has not finished")?;
                let dir = self.state.config().data_dir.join(&e.id).join("exports");
                let out = tokio::task::spawn_blocking(move || {
                    let out = export(&session, format, selector.as_deref()).map_err(err)?;
                    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                    let path = dir.join(&out.filename);
                    std::fs::write(&path, &out.bytes).map_err(|e| e.to_string())?;
                    Ok::<_, String>(json!({ "file": path.display().to_string(), "bytes": out.bytes.len() }))
                })
                .await
                .map_err(|e| e.to_string())??;
                Ok(out)
            }
        }
    }
}

/// Run compiled commands in order, stopping at the first failure.
pub(crate) async fn run_script(state: &AppState, commands: Vec<(String, Command)>) -> ScriptReport {
    let mut runner = Runner {
        state,
        plan: default_script_plan(),
        session: None,
    };
    let mut entries = Vec::new();
    let mut ok = true;
    for (index, (verb, cmd)) in commands.into_iter().enumerate() {
        let r = runner.exec(cmd).await;
        let failed = r.is_err();
        entries.push(match r {
            Ok(detail) => ScriptEntry {
                index,
                verb,
                ok: true,
                detail,
                error: None,
            },
            Err(e) => ScriptEntry {
                index,
                verb,
                ok: false,
                detail: Value::Null,
                error: Some(e),
            },
        });
        if failed {
            ok = false;
            break;
        }
    }
    ScriptReport {
        ok,
        session: runner.session,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(v: Value) -> ScriptDocument {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn compiles_positional_and_named_args() {
        let d = doc(json!([
            {"verb": "set_grid", "args": [20e6, 60e6, 101]},
            {"verb": "set_grid", "args": {"start_hz": 1e6, "stop_hz": 2e6, "n_points": 3}},
            {"verb": "wait", "args": 10},
            {"verb": "wait"},
            {"verb": "export_csv", "args": {"modality": "s21"}}
        ]));
        let c = d.compile().unwrap();
        assert_eq!(c.len(), 5);
        assert!(matches!(c[2].1, Command::Wait(t) if t == Duration::from_secs(10)));
        assert!(matches!(c[3].1, Command::Wait(t) if t == DEFAULT_WAIT));
    }

    #[test]
    fn rejects_unknown_verbs_and_bad_args() {
        let d = doc(json!({"commands": [{"verb": "submit"}, {"verb": "start"}, {"verb": "launch"}]}));
        let e = d.compile().unwrap_err();
        assert!(e.contains("command 2") && e.contains("unknown verb"), "{e}");
        for bad in [
            json!([{"verb": "set_grid", "args": [1e6, 2e6]}]),
            json!([{"verb": "set_grid", "args": [1e6, 2e6, 2.5]}]),
            json!([{"verb": "set_duration", "args": [-1]}]),
            json!([{"verb": "wait", "args": ["soon"]}]),
            json!([{"verb": "set_plan", "args": {"plan": {"mode": "neither"}}}]),
        ] {
            assert!(doc(bad.clone()).compile().is_err(), "{bad}");
        }
    }

    #[test]
    fn default_plan_is_parallel_rf() {
        let p = default_script_plan();
        assert!(p.needs_rf());
        assert_eq!(p.tick_count(100), 50);
    }
}
