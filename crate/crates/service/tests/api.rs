use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use futures::StreamExt;
use mpada_core::acquisition::SessionState;
use mpada_core::analysis::{delay_statistics, interval_errors};
use mpada_core::datastore::{modality_csv, read_archive};
use mpada_service::{router, ApiSessionView, AppState, ServiceConfig};
use serde_json::{json, Value};

struct Server {
    addr: SocketAddr,
    client: reqwest::Client,
    _data: tempfile::TempDir,
    data_dir: PathBuf,
}

impl Server {
    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    async fn post(&self, path: &str, body: Value) -> reqwest::Response {
        self.client.post(self.url(path)).json(&body).send().await.unwrap()
    }

    async fn post_empty(&self, path: &str) -> reqwest::Response {
        self.client.post(self.url(path)).send().await.unwrap()
    }

    async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(self.url(path)).send().await.unwrap()
    }

    async fn view(&self, id: &str) -> ApiSessionView {
        self.get(&format!("/api/sessions/{id}")).await.json().await.unwrap()
    }

    async fn submit(&self, plan: Value) -> String {
        let r = self.post("/api/plans", plan).await;
        assert_eq!(r.status(), 201);
        r.json::<Value>().await.unwrap()["id"].as_str().unwrap().to_string()
    }

    async fn wait_finished(&self, id: &str) -> ApiSessionView {
        for _ in 0..600 {
            let v = self.view(id).await;
            if matches!(v.state, SessionState::Complete | SessionState::Aborted) {
                return v;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        panic!("session {id} did not finish");
    }
}

async fn server_with(f: impl FnOnce(&mut ServiceConfig)) -> Server {
    let data = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig {
        data_dir: data.path().to_path_buf(),
        ..ServiceConfig::default()
    };
    f(&mut config);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::new(config));
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        addr,
        client: reqwest::Client::new(),
        data_dir: data.path().to_path_buf(),
        _data: data,
    }
}

async fn server() -> Server {
    server_with(|_| {}).await
}

const PERIPHERALS: &str = r#"{
    "generic_stepper.main": {"enable": true, "module": "generic_stepper.main", "object": "GenericStepper", "label": "Stepper"},
    "hall": {"enable": true, "module": "hall_tlv493d.main", "object": "TLV493D", "label": "Hall"}
}"#;

fn peripherals() -> Value {
    serde_json::from_str(PERIPHERALS).unwrap()
}

fn loop_plan(duration_ms: u64, n_points: usize) -> Value {
    json!({
        "mode": "parallel", "duration_ms": duration_ms,
        "grid": {"start_hz": 3.0e7, "stop_hz": 3.8e7, "n_points": n_points},
        "instrument": "sim:loop",
        "peripherals": peripherals(),
        "modalities": [{"id": "s21", "device": "vna", "interval_ms": 100},
                       {"id": "flux", "device": "hall", "interval_ms": 50}]
    })
}

fn sequential_plan() -> Value {
    json!({
        "mode": "sequential", "duration_ms": 60000, "max_cycles": 3,
        "grid": {"start_hz": 2e7, "stop_hz": 6e7, "n_points": 101},
        "instrument": "sim:tomography:A",
        "pin_map": {"TX1": [], "TX2": ["GP0"], "RX1": [], "RX2": ["GP2"]},
        "sweep_sequence": {"1": ["TX1", "RX1"], "2": ["TX2", "RX2"]},
        "peripherals": peripherals(), "settle_ms": 0,
        "steps": {"sweep": "all", "generic_stepper.main": {"n_steps": 5}}
    })
}

#[derive(Debug)]
struct SseEvent {
    event: String,
    data: Value,
    received_ms: f64,
}

fn now_ms() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs_f64() * 1e3
}

async fn collect_stream(resp: reqwest::Response) -> Vec<SseEvent> {
    let mut body = resp.bytes_stream();
    let mut buf = String::new();
    let mut out = Vec::new();
    while let Some(chunk) = body.next().await {
        buf.push_str(std::str::from_utf8(&chunk.unwrap()).unwrap());
        while let Some(i) = buf.find("\n\n") {
            let block: String = buf.drain(..i + 2).collect();
            let mut event = String::from("message");
            let mut data = String::new();
            for line in block.lines() {
                if let Some(e) = line.strip_prefix("event: ").or_else(|| line.strip_prefix("event:")) {
                    event = e.to_string();
                } else if let Some(d) = line.strip_prefix("data: ").or_else(|| line.strip_prefix("data:")) {
                    data.push_str(d);
                }
            }
            if data.is_empty() {
                continue;
            }
            out.push(SseEvent {
                event,
                data: serde_json::from_str(&data).unwrap(),
                received_ms: now_ms(),
            });
        }
    }
    out
}

#[tokio::test]
async fn submit_validates_plans() {
    let s = server().await;
    let id = s.submit(sequential_plan()).await;
    let v = s.view(&id).await;
    assert_eq!(v.state, SessionState::Idle);
    assert_eq!(v.plan.paths, 2);
    assert_eq!(v.instrument, "sim:tomography:A");

    let mut bad = loop_plan(1000, 11);
    bad["modalities"][0]["interval_ms"] = json!(10);
    let r = s.post("/api/plans", bad).await;
    assert_eq!(r.status(), 422);
    let body: Value = r.json().await.unwrap();
    let text = body["violations"].to_string();
    assert!(text.contains("minimum sweep time"), "{text}");

    let mut bad = loop_plan(0, 11);
    bad["modalities"][1]["device"] = json!("thermometer");
    let body: Value = s.post("/api/plans", bad).await.json().await.unwrap();
    assert!(body["violations"].as_array().unwrap().len() >= 2, "{body}");

    let r = s.client.post(s.url("/api/plans")).header("content-type", "application/json").body("{\"mode\":").send().await.unwrap();
    assert_eq!(r.status(), 400);
    let r = s.post("/api/plans", json!({"mode": "parallel", "surprise": 1})).await;
    assert_eq!(r.status(), 400);

    let mut unreachable = loop_plan(1000, 11);
    unreachable["instrument"] = json!("TCPIP0::127.0.0.1::1::SOCKET");
    assert_eq!(s.post("/api/plans", unreachable).await.status(), 502);
    assert_eq!(s.list_len().await, 1);
}

impl Server {
    async fn list_len(&self) -> usize {
        self.get("/api/sessions").await.json::<Vec<Value>>().await.unwrap().len()
    }
}

#[tokio::test]
async fn state_machine_transitions() {
    let s = server().await;
    let id = s.submit(loop_plan(30_000, 11)).await;
    assert_eq!(s.post_empty(&format!("/api/sessions/{id}/stop")).await.status(), 409);
    let r = s.post_empty(&format!("/api/sessions/{id}/start")).await;
    assert_eq!(r.status(), 200);
    assert_eq!(r.json::<ApiSessionView>().await.unwrap().state, SessionState::Running);
    assert_eq!(s.post_empty(&format!("/api/sessions/{id}/start")).await.status(), 409);
    let export = s.get(&format!("/api/sessions/{id}/export?format=csv&modality=flux")).await;
    assert_eq!(export.status(), 409);

    tokio::time::sleep(Duration::from_millis(600)).await;
    let mid = s.view(&id).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    let later = s.view(&id).await;
    for (m, n) in &mid.counts {
        assert!(later.counts[m] >= *n);
    }
    assert!(later.counts.get("flux").copied().unwrap_or(0) > 0);

    let r = s.post_empty(&format!("/api/sessions/{id}/stop")).await;
    assert_eq!(r.status(), 200);
    let v: ApiSessionView = r.json().await.unwrap();
    assert_eq!(v.state, SessionState::Complete);
    assert!(v.partial);
    assert!(v.counts["flux"] >= later.counts["flux"]);
    assert_eq!(s.post_empty(&format!("/api/sessions/{id}/stop")).await.status(), 409);
    assert_eq!(s.post_empty(&format!("/api/sessions/{id}/start")).await.status(), 409);
    let csv = s.get(&format!("/api/sessions/{id}/export?format=csv&modality=flux")).await;
    assert_eq!(csv.status(), 200);
    let text = csv.text().await.unwrap();
    assert_eq!(text.lines().count(), v.counts["flux"] + 1);

    assert_eq!(s.get("/api/sessions/nope").await.status(), 404);
    assert_eq!(s.post_empty("/api/sessions/nope/start").await.status(), 404);
    assert_eq!(s.get("/api/sessions/nope/stream").await.status(), 404);
}

#[tokio::test]
async fn concurrent_starts_are_serialized() {
    let s = server().await;
    let id = s.submit(loop_plan(400, 11)).await;
    let url = s.url(&format!("/api/sessions/{id}/start"));
    let reqs = (0..8).map(|_| s.client.post(url.clone()).send());
    let codes: Vec<u16> = futures::future::join_all(reqs).await.into_iter().map(|r| r.unwrap().status().as_u16()).collect();
    assert_eq!(codes.iter().filter(|&&c| c == 200).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|&&c| c == 409).count(), 7, "{codes:?}");
    assert_eq!(s.wait_finished(&id).await.state, SessionState::Complete);
}

#[tokio::test]
async fn stream_delivers_ordered_samples_then_end() {
    let s = server().await;
    let id = s.submit(loop_plan(1500, 21)).await;
    let all = s.get(&format!("/api/sessions/{id}/stream?decimate=5")).await;
    assert_eq!(all.status(), 200);
    let flux_only = s.get(&format!("/api/sessions/{id}/stream?modalities=flux")).await;
    s.post_empty(&format!("/api/sessions/{id}/start")).await;
    let (all, flux_only) = tokio::join!(collect_stream(all), collect_stream(flux_only));

    let (last, samples) = all.split_last().unwrap();
    assert_eq!(last.event, "end");
    assert_eq!(last.data["state"], "complete");
    assert!(samples.iter().all(|e| e.event == "sample"));
    let mods: Vec<&str> = samples.iter().map(|e| e.data["modality"].as_str().unwrap()).collect();
    assert!(mods.contains(&"s21") && mods.contains(&"flux"));
    for m in ["s21", "flux"] {
        let t: Vec<f64> = samples
            .iter()
            .filter(|e| e.data["modality"] == m)
            .map(|e| e.data["t_ms"].as_f64().unwrap())
            .collect();
        assert!(t.windows(2).all(|w| w[1] > w[0]), "{m}");
        assert_eq!(t.len(), last.data["counts"][m].as_u64().unwrap() as usize);
    }
    for e in samples {
        let lag = e.received_ms - e.data["t_ms"].as_f64().unwrap();
        assert!(lag < 250.0, "event arrived {lag} ms after capture");
    }
    let trace = samples.iter().find(|e| e.data["type"] == "trace").unwrap();
    assert_eq!(trace.data["re"].as_array().unwrap().len(), 5);
    assert_eq!(trace.data["f_hz"][1].as_f64().unwrap(), 3.0e7 + 5.0 * 4e5);

    let (last, samples) = flux_only.split_last().unwrap();
    assert_eq!(last.event, "end");
    assert!(!samples.is_empty());
    assert!(samples.iter().all(|e| e.data["modality"] == "flux" && e.data["type"] == "flux"));

    let again = collect_stream(s.get(&format!("/api/sessions/{id}/stream")).await).await;
    assert_eq!(again.len(), 1);
    assert_eq!(again[0].event, "end");
    assert_eq!(s.get(&format!("/api/sessions/{id}/stream?decimate=0")).await.status(), 400);
}

#[tokio::test]
async fn exports_match_the_archive() {
    let s = server().await;
    let id = s.submit(sequential_plan()).await;
    s.post_empty(&format!("/api/sessions/{id}/start")).await;
    let v = s.wait_finished(&id).await;
    assert_eq!(v.state, SessionState::Complete);
    assert_eq!(v.counts["s21"], 6);
    let archived = read_archive(&s.data_dir.join(&id)).unwrap();

    for m in ["s21", "generic_stepper.main"] {
        let r = s.get(&format!("/api/sessions/{id}/export?format=csv&modality={m}")).await;
        assert_eq!(r.headers()["content-type"], "text/csv");
        assert_eq!(r.text().await.unwrap(), modality_csv(&archived, m).unwrap());
    }
    let s2p = s.get(&format!("/api/sessions/{id}/export?format=s2p&index=4")).await.text().await.unwrap();
    assert!(s2p.contains("# Hz S RI R 50"));
    assert!(s2p.contains("! path TX1 RX1"));
    assert_eq!(s2p.lines().count(), 3 + 101);

    let snap1 = s.get(&format!("/api/sessions/{id}/export?format=snapshot")).await.bytes().await.unwrap();
    let snap2 = s.get(&format!("/api/sessions/{id}/export?format=snapshot")).await.bytes().await.unwrap();
    assert_eq!(snap1, snap2);
    let dir = tempfile::tempdir().unwrap();
    tar::Archive::new(&snap1[..]).unpack(dir.path()).unwrap();
    let unpacked = read_archive(&dir.path().join(&id)).unwrap();
    assert_eq!(unpacked, archived);

    let bundle = s.get(&format!("/api/sessions/{id}/export?format=s2p")).await.bytes().await.unwrap();
    let names: Vec<String> = tar::Archive::new(&bundle[..])
        .entries()
        .unwrap()
        .map(|e| e.unwrap().path().unwrap().display().to_string())
        .collect();
    assert_eq!(names.len(), 6);
    assert_eq!(names[0], "trace-0.s2p");

    for (q, code) in [
        ("format=xml", 400),
        ("", 400),
        ("format=csv&modality=nothing", 404),
        ("format=s2p&index=99", 404),
        ("format=s2p&index=x", 400),
    ] {
        assert_eq!(s.get(&format!("/api/sessions/{id}/export?{q}")).await.status(), code, "{q}");
    }
}

#[tokio::test]
async fn scripts_run_in_order() {
    let s = server().await;
    let report: Value = s
        .post(
            "/api/script",
            json!({"commands": [
                {"verb": "set_grid", "args": [20e6, 60e6, 101]},
                {"verb": "submit"},
                {"verb": "start"},
                {"verb": "wait", "args": [10]},
                {"verb": "export_csv"}
            ]}),
        )
        .await
        .json()
        .await
        .unwrap();
    assert_eq!(report["ok"], true, "{report}");
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 5);
    assert!(entries.iter().all(|e| e["ok"] == true));
    let id = report["session"].as_str().unwrap();
    assert!(std::path::Path::new(entries[4]["detail"]["file"].as_str().unwrap()).is_file());
    assert_eq!(s.view(id).await.counts["s21"], 50);

    let r: Value = s
        .post("/api/script", json!([{"verb": "set_plan", "args": {"plan": loop_plan(300, 11)}},
                                     {"verb": "submit"}, {"verb": "start"}, {"verb": "wait"},
                                     {"verb": "wait"}, {"verb": "status"}, {"verb": "export_csv", "args": ["flux"]}]))
        .await
        .json()
        .await
        .unwrap();
    assert_eq!(r["ok"], true, "{r}");
    assert_eq!(r["entries"][5]["detail"]["state"], "complete");
}

#[tokio::test]
async fn scripts_reject_unknown_verbs_before_running() {
    let s = server().await;
    let r = s
        .post("/api/script", json!([{"verb": "submit"}, {"verb": "start"}, {"verb": "dance"}]))
        .await;
    assert_eq!(r.status(), 422);
    let body: Value = r.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("command 2"), "{body}");
    assert_eq!(s.list_len().await, 0);

    let r: Value = s
        .post("/api/script", json!([{"verb": "start"}, {"verb": "submit"}]))
        .await
        .json()
        .await
        .unwrap();
    assert_eq!(r["ok"], false);
    assert_eq!(r["entries"].as_array().unwrap().len(), 1);
    assert_eq!(s.list_len().await, 0);

    let mut bad = loop_plan(1000, 11);
    bad["modalities"][0]["interval_ms"] = json!(5);
    let r: Value = s
        .post("/api/script", json!([{"verb": "set_plan", "args": [bad]}, {"verb": "submit"}, {"verb": "start"}]))
        .await
        .json()
        .await
        .unwrap();
    assert_eq!(r["entries"][1]["ok"], false);
    assert!(r["entries"][1]["error"].as_str().unwrap().contains("minimum sweep time"));
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let s = server_with(|c| c.token = Some("s3cret".into())).await;
    assert_eq!(s.get("/api/sessions").await.status(), 401);
    let r = s.client.get(s.url("/api/sessions")).bearer_auth("wrong").send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = s.client.get(s.url("/api/sessions")).bearer_auth("s3cret").send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(s.get("/api/sessions?access_token=s3cret").await.status(), 200);
}

fn tau_mse(v: &ApiSessionView, dir: &std::path::Path, modality: &str, target: f64) -> f64 {
    let session = read_archive(&dir.join(&v.id)).unwrap();
    let tau = interval_errors(&session.timestamps(modality), target).unwrap();
    delay_statistics(&tau, &[]).unwrap().mse_ms2
}

/// Open a stream and never read from the socket.
fn stalled_consumer(addr: SocketAddr, id: &str) -> TcpStream {
    let mut sock = TcpStream::connect(addr).unwrap();
    sock.set_read_timeout(Some(Duration::from_millis(100))).unwrap();
    write!(sock, "GET /api/sessions/{id}/stream HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut first = [0u8; 12];
    sock.read_exact(&mut first).unwrap();
    assert_eq!(&first, b"HTTP/1.1 200");
    sock
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stalled_stream_consumer_does_not_perturb_timing() {
    let s = server_with(|c| c.stream_backlog = 16).await;
    let plan = loop_plan(3000, 1601);

    let a = s.submit(plan.clone()).await;
    s.post_empty(&format!("/api/sessions/{a}/start")).await;
    let baseline = s.wait_finished(&a).await;

    let b = s.submit(plan).await;
    let addr = s.addr;
    let b2 = b.clone();
    let sock = tokio::task::spawn_blocking(move || stalled_consumer(addr, &b2)).await.unwrap();
    s.post_empty(&format!("/api/sessions/{b}/start")).await;
    let stalled = s.wait_finished(&b).await;
    drop(sock);

    for (m, t) in [("s21", 100.0), ("flux", 50.0)] {
        assert!((baseline.counts[m] as i64 - stalled.counts[m] as i64).abs() <= 1);
        let d = (tau_mse(&baseline, &s.data_dir, m, t) - tau_mse(&stalled, &s.data_dir, m, t)).abs();
        assert!(d < 1.0, "{m}: MSE changed by {d} ms^2");
    }
}
