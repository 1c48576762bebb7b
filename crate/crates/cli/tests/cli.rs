use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use teller_core::audit::persist::write_chain_file;
use teller_core::audit::{AuditChain, AuditKind};
use teller_core::protocol::SessionId;
use tempfile::TempDir;

fn teller(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teller"))
        .args(args)
        .output()
        .expect("spawn teller")
}

/// As [`teller`], killing the process if it outlives `limit`.
fn teller_within(args: &[&str], limit: Duration) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_teller"))
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn teller");
    let deadline = Instant::now() + limit;
    while child.try_wait().unwrap().is_none() {
        if Instant::now() > deadline {
            let _ = child.kill();
            panic!("teller {args:?} did not exit within {limit:?}");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    child.wait_with_output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sim_config() -> String {
    configs().join("sim.toml").display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_canonical_metrics_and_a_matching_log() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("metrics.json");
    let log = dir.path().join("events.log");
    let o = teller(&[
        "run",
        "--config",
        &sim_config(),
        "--seed",
        "11",
        "--duration",
        "900",
        "--out",
        out.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_to_string(&out).unwrap();
    assert_eq!(written, stdout(&o));
    let report: Value = serde_json::from_str(&written).unwrap();
    // Canonical: keys sorted, no whitespace.
    assert_eq!(written.trim_end(), serde_json::to_string(&report).unwrap());
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);

    let log_bytes = std::fs::read(&log).unwrap();
    let digest = hex(&Sha256::digest(&log_bytes));
    assert_eq!(report["determinism_digest"], json!(digest));

    // Same seed, same bytes.
    let out2 = dir.path().join("again.json");
    let o2 = teller(&[
        "run",
        "--config",
        &sim_config(),
        "--seed",
        "11",
        "--duration",
        "900",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(o2.status.success());
    assert_eq!(std::fs::read(&out2).unwrap(), written.as_bytes());
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn compare_prints_savings() {
    let o = teller(&[
        "compare",
        "--config",
        &sim_config(),
        "--seed",
        "5",
        "--duration",
        "900",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["preconnect_savings_ms"].as_f64().unwrap() >= 0.0);
}

#[test]
fn scaling_prints_one_line_per_station_count() {
    let o = teller(&[
        "scaling",
        "--config",
        &sim_config(),
        "--seed",
        "5",
        "--duration",
        "1800",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let points: Vec<Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(points.len(), 2);
    for (i, p) in points.iter().enumerate() {
        assert_eq!(p["stations"], json!(i + 1));
        let served = p["served_count"].as_f64().unwrap();
        assert!((p["served_per_hour"].as_f64().unwrap() - served * 2.0).abs() < 1e-9);
    }
}

#[test]
fn invalid_configs_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.json");
    let out = out.to_str().unwrap();
    let o = teller(&[
        "run",
        "--config",
        &sim_config(),
        "--seed",
        "1",
        "--duration=-5",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "duration_s = \"long\"").unwrap();
    let o = teller(&[
        "run",
        "--config",
        broken.to_str().unwrap(),
        "--seed",
        "1",
        "--duration",
        "5",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = teller(&["compare", "--config", "/nonexistent.toml", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    // Unknown keys are rejected rather than ignored.
    let o = teller_within(
        &["serve", "--config", broken.to_str().unwrap()],
        Duration::from_secs(20),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(out).exists());
}

#[test]
fn verify_audit_accepts_intact_and_flags_tampered_chains() {
    let dir = TempDir::new().unwrap();
    let mut chain = AuditChain::new();
    for i in 0..5u64 {
        chain.append(
            AuditKind::Utterance,
            &json!({ "n": i }),
            SessionId::from_u128(1),
            1000 + i,
            true,
        );
    }
    let good = dir.path().join("good.chain");
    write_chain_file(&good, chain.entries()).unwrap();
    let o = teller(&["verify-audit", good.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "ok: 5 records");

    let mut bytes = std::fs::read(&good).unwrap();
    let record = bytes.len() / 5;
    bytes[2 * record + 10] ^= 0x40;
    let bad = dir.path().join("bad.chain");
    std::fs::write(&bad, bytes).unwrap();
    let o = teller(&["verify-audit", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tampered at record 2"));

    let o = teller(&["verify-audit", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreachable_service_is_a_plain_failure() {
    let port = free_port();
    let url = format!("http://127.0.0.1:{port}");
    let o = teller(&["status", "--remote", &url]);
    assert_eq!(o.status.code(), Some(1));
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_hosts_the_branch_and_its_station_agents() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("branch.toml");
    // Same branch as the sample, with files under the temp dir.
    let sample = std::fs::read_to_string(configs().join("branch.toml")).unwrap();
    let patched = sample
        .replace(
            "audit_file = \"audit.chain\"",
            &format!("audit_file = {:?}", dir.path().join("audit.chain")),
        )
        .replace(
            "event_log = \"events.jsonl\"",
            &format!("event_log = {:?}", dir.path().join("events.jsonl")),
        );
    std::fs::write(&config, patched).unwrap();
    let port = free_port();
    let url = format!("http://127.0.0.1:{port}");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_teller"))
            .args([
                "serve",
                "--config",
                config.to_str().unwrap(),
                "--listen",
                &format!("127.0.0.1:{port}"),
            ])
            .args(["--report-ms", "100"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );

    // Both agents connect and report.
    let deadline = Instant::now() + Duration::from_secs(20);
    let crowd = loop {
        let o = teller(&["crowd", "--remote", &url]);
        if o.status.success() {
            let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
            if v["counts"]["1"] == json!(0) && v["counts"]["2"] == json!(0) {
                break v;
            }
        }
        assert!(Instant::now() < deadline, "agents never reported");
        std::thread::sleep(Duration::from_millis(100));
    };
    assert!(crowd["staleness_ms"].is_u64());

    let o = teller(&["status", "--remote", &url]);
    assert!(o.status.success());
    let status: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(status["stations"], json!(2));
    assert_eq!(status["connections"], json!(2));

    let o = teller(&["verify-audit", "--remote", &url]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
