use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn mpada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpada")).args(args).env_remove("MPADA_TOKEN").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_plan(dir: &Path, name: &str, plan: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(plan).unwrap()).unwrap();
    p
}

const PERIPHERALS: &str = r#"{
    "generic_stepper.main": {"enable": true, "module": "generic_stepper.main", "object": "GenericStepper", "label": "Stepper"},
    "hall": {"enable": true, "module": "hall_tlv493d.main", "object": "TLV493D", "label": "Hall"}
}"#;

fn loop_plan(duration_ms: u64) -> Value {
    json!({
        "mode": "parallel", "duration_ms": duration_ms,
        "grid": {"start_hz": 3.4e7, "stop_hz": 3.4e7, "n_points": 1},
        "peripherals": serde_json::from_str::<Value>(PERIPHERALS).unwrap(),
        "modalities": [{"id": "s21", "device": "vna", "interval_ms": 100},
                       {"id": "flux", "device": "hall", "interval_ms": 50}]
    })
}

fn tomography_plan(cycles: u64) -> Value {
    json!({
        "mode": "sequential", "duration_ms": 600000, "max_cycles": cycles,
        "grid": {"start_hz": 2e7, "stop_hz": 6e7, "n_points": 101},
        "pin_map": {"TX1": [], "TX2": ["GP0"], "TX3": ["GP1"], "RX1": [], "RX2": ["GP2"], "RX3": ["GP3"]},
        "sweep_sequence": {"1": ["TX1", "RX1"], "2": ["TX2", "RX2"], "3": ["TX3", "RX3"]},
        "peripherals": serde_json::from_str::<Value>(PERIPHERALS).unwrap(), "settle_ms": 0,
        "steps": {"sweep": "all", "generic_stepper.main": {"n_steps": 5}}
    })
}

/// Run a plan and return the archive directory from the JSON summary.
fn run_ok(plan: &Path, address: &str, out: &Path, extra: &[&str]) -> (PathBuf, Value) {
    let mut args = vec!["run", "--plan", plan.to_str().unwrap(), "--address", address, "--out", out.to_str().unwrap(), "--json"];
    args.extend_from_slice(extra);
    let o = mpada(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    (PathBuf::from(v["archive"].as_str().unwrap()), v)
}

#[test]
fn run_loop_plan_writes_archive() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "loop.json", &loop_plan(1000));
    let (dir, v) = run_ok(&plan, "sim:loop", &d.path().join("out"), &[]);
    for f in ["manifest.json", "s21.csv", "flux.csv", "s21.t.bin", "flux.values.bin"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(v["session"]["state"], "complete");
    assert!((v["session"]["counts"]["flux"].as_i64().unwrap() - 20).abs() <= 1);
    let flux = fs::read_to_string(dir.join("flux.csv")).unwrap();
    assert!(flux.starts_with("t_ms,bx,by,bz\n"));

    let o = mpada(&["analyze", "sync", "--input", dir.to_str().unwrap(), "--out", d.path().join("a").to_str().unwrap(), "--json", "--max-lag", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lag = serde_json::from_slice::<Value>(&o.stdout).unwrap()["lag_samples"].as_i64().unwrap();
    assert!(lag.abs() <= 1, "{lag}");
}

#[test]
fn bad_interval_exits_one_with_violations() {
    let d = tempfile::tempdir().unwrap();
    let mut p = loop_plan(1000);
    p["modalities"][0]["interval_ms"] = json!(10);
    let plan = write_plan(d.path(), "bad.json", &p);
    let o = mpada(&["run", "--plan", plan.to_str().unwrap(), "--address", "sim:loop", "--out", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("plan violation: modalities[0].interval_ms"), "{e}");
    assert!(e.contains("minimum sweep time"), "{e}");
    assert!(fs::read_dir(d.path()).unwrap().count() == 1);
}

#[test]
fn connection_and_input_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "loop.json", &loop_plan(500));
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("TCPIP0::127.0.0.1::{port}::SOCKET");
    let out = d.path().join("o");
    let o = mpada(&["run", "--plan", plan.to_str().unwrap(), "--address", &addr, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("connection error"), "{}", stderr(&o));

    for address in ["sim:nowhere", "10.0.0.1:5025"] {
        let o = mpada(&["run", "--plan", plan.to_str().unwrap(), "--address", address, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 1, "{address}");
    }
    let o = mpada(&["run", "--plan", "/nonexistent.json", "--address", "sim", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    fs::write(d.path().join("junk.json"), "{").unwrap();
    let o = mpada(&["run", "--plan", d.path().join("junk.json").to_str().unwrap(), "--address", "sim", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let o = mpada(&["run", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no instrument address"));
}

#[test]
fn yaml_plan_and_duration_override() {
    let d = tempfile::tempdir().unwrap();
    let yaml = "mode: parallel\nduration_ms: 60000\ninstrument: sim:thru\ngrid: {start_hz: 2.0e7, stop_hz: 6.0e7, n_points: 11}\nmodalities:\n  - {id: s21, device: vna, interval_ms: 100}\n";
    let plan = d.path().join("plan.yaml");
    fs::write(&plan, yaml).unwrap();
    let out = d.path().join("o");
    let o = mpada(&["run", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap(), "--duration-override", "500", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["session"]["counts"]["s21"], 5);
}

#[test]
fn clutter_pipeline_localizes_scatterer() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "tomo.json", &tomography_plan(72));
    let out = d.path().join("runs");
    let (a, _) = run_ok(&plan, "sim:tomography:A", &out, &[]);
    let (o, _) = run_ok(&plan, "sim:tomography:none", &out, &[]);
    let res = d.path().join("clutter");
    let r = mpada(&["analyze", "clutter", "--sp", a.to_str().unwrap(), "--so", o.to_str().unwrap(), "--out", res.to_str().unwrap(), "--json"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let v: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["angles"], 72);
    assert!(v["peak_bins"].as_array().unwrap().iter().all(|b| b == 12));
    let peaks = fs::read_to_string(res.join("clutter_peaks.csv")).unwrap();
    assert_eq!(peaks.lines().count(), 73);
    assert!(peaks.lines().nth(1).unwrap().starts_with("0,12,"));
    let mag = fs::read_to_string(res.join("clutter_magnitude.csv")).unwrap();
    assert_eq!(mag.lines().next().unwrap().split(',').count(), 102);

    // s2p directories, one file per angle.
    let sp_dir = d.path().join("sp");
    let so_dir = d.path().join("so");
    for (src, dst) in [(&a, &sp_dir), (&o, &so_dir)] {
        fs::create_dir_all(dst).unwrap();
        for k in 0..4 {
            fs::copy(src.join(format!("trace-{}.s2p", 3 * k)), dst.join(format!("angle-{k}.s2p"))).unwrap();
        }
    }
    let r = mpada(&["analyze", "clutter", "--sp", sp_dir.to_str().unwrap(), "--so", so_dir.to_str().unwrap(), "--out", res.to_str().unwrap(), "--json"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let v: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["peak_bins"], json!([12, 12, 12, 12]));

    let mut other = tomography_plan(2);
    other["grid"]["n_points"] = json!(51);
    let other = write_plan(d.path(), "other.json", &other);
    let (g, _) = run_ok(&other, "sim:tomography:none", &out, &[]);
    let r = mpada(&["analyze", "clutter", "--sp", a.to_str().unwrap(), "--so", g.to_str().unwrap(), "--out", res.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
    let r = mpada(&["analyze", "clutter", "--sp", a.to_str().unwrap(), "--so", "/nonexistent", "--out", res.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
}

#[test]
fn jitter_pipeline_emits_stats_and_cdf() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "loop.json", &loop_plan(1000));
    let (dir, _) = run_ok(&plan, "sim:loop", &d.path().join("o"), &[]);
    let res = d.path().join("j");
    let r = mpada(&["analyze", "jitter", "--input", dir.to_str().unwrap(), "--out", res.to_str().unwrap(), "--json"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let stats = fs::read_to_string(res.join("delay_stats.csv")).unwrap();
    assert_eq!(stats.lines().next().unwrap(), "modality,target_ms,n_intervals,mse_ms2,variance_ms2,mean_abs_ms");
    assert_eq!(stats.lines().count(), 3);
    let cdf = fs::read_to_string(res.join("delay_cdf.csv")).unwrap();
    let s21: Vec<&str> = cdf.lines().filter(|l| l.starts_with("s21,")).collect();
    assert_eq!(s21.len(), 50);
    assert!(s21[0].starts_with("s21,1,") && s21[49].starts_with("s21,50,"));

    let r = mpada(&["analyze", "jitter", "--input", dir.join("flux.csv").to_str().unwrap(), "--target-ms", "50", "--out", res.to_str().unwrap(), "--json"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let v: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["modalities"][0]["modality"], "flux");
    let r = mpada(&["analyze", "jitter", "--input", dir.join("flux.csv").to_str().unwrap(), "--out", res.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
    let empty = d.path().join("empty.csv");
    fs::write(&empty, "t_ms,theta_deg\n").unwrap();
    let r = mpada(&["analyze", "jitter", "--input", empty.to_str().unwrap(), "--target-ms", "50", "--out", res.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
}

/// Drop the columns derived from wall-clock time.
fn without_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.split_once(',').map_or(l, |x| x.1).to_string()).collect()
}

#[test]
fn same_plan_and_seed_reproduce() {
    let d = tempfile::tempdir().unwrap();
    let plan = write_plan(d.path(), "tomo.json", &tomography_plan(6));
    let (a, _) = run_ok(&plan, "sim:tomography:B", &d.path().join("a"), &["--seed", "7"]);
    let (b, _) = run_ok(&plan, "sim:tomography:B", &d.path().join("b"), &["--seed", "7"]);
    let names = |p: &Path| {
        let mut v: Vec<String> = fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(names(&a), names(&b));
    for n in names(&a) {
        let (x, y) = (fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
        if n.ends_with(".s2p") || n.ends_with(".values.bin") || n.ends_with("_idx.bin") || n.ends_with("position.bin") {
            assert_eq!(x, y, "{n}");
        } else if n.ends_with(".csv") {
            assert_eq!(without_time(std::str::from_utf8(&x).unwrap()), without_time(std::str::from_utf8(&y).unwrap()), "{n}");
        }
    }
}

struct ServeProcess(Child);

impl Drop for ServeProcess {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_serve(data: &Path, token: &str) -> (ServeProcess, String) {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let bind = format!("127.0.0.1:{port}");
    let child = Command::new(env!("CARGO_BIN_EXE_mpada"))
        .args(["serve", "--address", "sim:loop"])
        .env("MPADA_BIND_ADDR", &bind)
        .env("MPADA_DATA_DIR", data)
        .env("MPADA_TOKEN", token)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let t0 = Instant::now();
    while TcpStream::connect(&bind).is_err() {
        assert!(t0.elapsed() < Duration::from_secs(10), "service did not come up");
        std::thread::sleep(Duration::from_millis(50));
    }
    (ServeProcess(child), format!("http://{bind}"))
}

#[test]
fn remote_run_through_service() {
    let d = tempfile::tempdir().unwrap();
    let (_serve, url) = spawn_serve(&d.path().join("data"), "tok");
    let plan = write_plan(d.path(), "loop.json", &loop_plan(600));
    let out = d.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_mpada"))
        .args(["run", "--plan", plan.to_str().unwrap(), "--address", &url, "--out", out.to_str().unwrap(), "--json", "--token", "tok"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let dir = PathBuf::from(v["archive"].as_str().unwrap());
    assert!(dir.join("flux.csv").is_file());
    assert_eq!(v["session"]["state"], "complete");

    let o = mpada(&["run", "--plan", plan.to_str().unwrap(), "--address", &url, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("401"), "{}", stderr(&o));

    let mut bad = loop_plan(600);
    bad["modalities"][0]["interval_ms"] = json!(5);
    let bad = write_plan(d.path(), "bad.json", &bad);
    let o = Command::new(env!("CARGO_BIN_EXE_mpada"))
        .args(["run", "--plan", bad.to_str().unwrap(), "--address", &url, "--out", out.to_str().unwrap(), "--token", "tok"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("minimum sweep time"), "{}", stderr(&o));
}

#[test]
fn sim_subcommand_serves_scpi() {
    use std::io::{BufRead, BufReader, Write};
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let bind = format!("127.0.0.1:{port}");
    let child = Command::new(env!("CARGO_BIN_EXE_mpada"))
        .args(["sim", "--bind", &bind, "--scenario", "tomography:C"])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let _guard = ServeProcess(child);
    let t0 = Instant::now();
    let mut sock = loop {
        match TcpStream::connect(&bind) {
            Ok(s) => break s,
            Err(_) if t0.elapsed() < Duration::from_secs(10) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("{e}"),
        }
    };
    sock.write_all(b"*IDN?\n:SIM:TOMO:POS?\n").unwrap();
    let mut r = BufReader::new(sock);
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    assert_eq!(line, "MPADA,SIMVNA,0,1.0\n");
    line.clear();
    r.read_line(&mut line).unwrap();
    assert_eq!(line, "C\n");
}
