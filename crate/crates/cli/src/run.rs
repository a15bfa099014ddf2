use std::fs;
use std::path::Path;
use std::time::Duration;

use mpada_core::acquisition::{
    run_plan, validate_plan, AcquisitionError, AcquisitionPlan, Devices, EngineControl, PlanViolation, Session,
    SessionState,
};
use mpada_core::datastore::write_archive;
use mpada_core::sim::{parse_sim_scenario, InstrumentTarget, SimConfig, SimServer};
use mpada_service::ServiceConfig;
use serde_json::json;

use crate::{remote, Failure, RunArgs, ServeArgs, SimArgs, SimTiming};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

pub fn sim_config(t: &SimTiming) -> SimConfig {
    let mut c = SimConfig {
        seed: t.seed,
        ..SimConfig::default()
    };
    if t.realistic {
        c = c.realistic();
    }
    c
}

pub fn load_plan(path: &Path) -> Result<AcquisitionPlan, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
    let plan = if yaml {
        AcquisitionPlan::from_yaml(&text).map_err(|e| e.to_string())
    } else {
        AcquisitionPlan::from_json(&text).map_err(|e| e.to_string())
    };
    plan.map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn violations(v: &[PlanViolation]) -> Failure {
    for x in v {
        eprintln!("plan violation: {}: {}", x.field, x.message);
    }
    Failure::config(format!("plan rejected with {} violation(s)", v.len()))
}

pub fn exit_code(state: SessionState) -> u8 {
    match state {
        SessionState::Complete => 0,
        SessionState::Aborted => 2,
        SessionState::Idle | SessionState::Running => 1,
    }
}

fn report(session: &Session, archive: &Path, json_out: bool) {
    let s = session.summary();
    if json_out {
        println!("{}", json!({ "session": s, "archive": archive.display().to_string() }));
    } else {
        let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        eprintln!(
            "session {} {:?}{}: {} -> {}",
            s.id,
            s.state,
            if s.partial { " (partial)" } else { "" },
            counts.join(" "),
            archive.display()
        );
        if let Some(r) = &s.abort_reason {
            eprintln!("aborted: {r}");
        }
    }
}

pub fn run(a: RunArgs) -> Result<u8, Failure> {
    let mut plan = load_plan(&a.plan)?;
    if let Some(ms) = a.duration_override {
        plan.duration_ms = ms;
    }
    let address = a
        .address
        .clone()
        .or_else(|| plan.instrument.clone())
        .ok_or_else(|| Failure::config("no instrument address: pass --address or set the plan's instrument"))?;
    if address.starts_with("http://") || address.starts_with("https://") {
        return remote::run(&address, a.token.as_deref(), plan, &a.out, a.json);
    }
    let target: InstrumentTarget = address.parse().map_err(|e: mpada_core::sim::TargetError| Failure::config(e.to_string()))?;

    let (rf, _simulator) = if plan.needs_rf() {
        let open = target
            .open(&sim_config(&a.sim), CONNECT_TIMEOUT)
            .map_err(|e| Failure::config(format!("connection error: {target}: {e}")))?;
        (Some(Box::new(open.client) as Box<_>), open.simulator)
    } else {
        (None, None)
    };
    let mut devices = Devices::from_plan(&plan, rf).map_err(|e| Failure::config(format!("peripherals: {e}")))?;
    let inventory = devices
        .inventory()
        .map_err(|e| Failure::config(format!("connection error: {e}")))?;
    validate_plan(&plan, &inventory).map_err(|v| violations(&v))?;

    let session = match run_plan(&plan, &mut devices, &EngineControl::new()) {
        Ok(s) => s,
        Err(AcquisitionError::Invalid(v)) => return Err(violations(&v)),
        Err(e) => return Err(Failure::config(e.to_string())),
    };
    fs::create_dir_all(&a.out).map_err(|e| Failure::config(format!("{}: {e}", a.out.display())))?;
    let dir = write_archive(&session, &a.out).map_err(|e| Failure::config(format!("writing archive: {e}")))?;
    report(&session, &dir, a.json);
    Ok(exit_code(session.state))
}

pub fn serve(a: ServeArgs) -> Result<u8, Failure> {
    let mut config = ServiceConfig::from_env();
    if let Some(b) = a.bind {
        config.bind_addr = b;
    }
    if let Some(d) = a.data_dir {
        config.data_dir = d;
    }
    config.instrument = a
        .address
        .parse()
        .map_err(|e: mpada_core::sim::TargetError| Failure::config(e.to_string()))?;
    config.sim = sim_config(&a.sim);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::config(e.to_string()))?;
    rt.block_on(mpada_service::serve(config))
        .map_err(|e| Failure::config(format!("serve: {e}")))?;
    Ok(0)
}

pub fn sim(a: SimArgs) -> Result<u8, Failure> {
    let spec = format!("sim:{}", a.scenario);
    let scenario = parse_sim_scenario(&spec).map_err(|e| Failure::config(format!("scenario {:?}: {e}", a.scenario)))?;
    let mut config = sim_config(&a.sim).with_scenario(scenario);
    config.min_sweep_time = Duration::from_millis(a.min_sweep_ms);
    let server = SimServer::spawn(&a.bind, config).map_err(|e| Failure::config(format!("bind {}: {e}", a.bind)))?;
    let r = server.resource();
    println!("{r}");
    server.join();
    Ok(0)
}
