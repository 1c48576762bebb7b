#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::json;
use teller_client::{ws_url, BranchClient};
use teller_core::branch::AgentRole;
use teller_core::config::ServiceConfig;
use teller_core::protocol::StationId;
use teller_core::station::AgentStation;
use teller_service::Running;
use tempfile::TempDir;
use tokio::net::TcpListener;

pub struct Svc {
    pub running: Running,
    pub client: BranchClient,
    pub ws: String,
    pub dir: TempDir,
}

impl Svc {
    pub fn audit_path(&self) -> PathBuf {
        self.dir.path().join("audit.chain")
    }

    pub fn event_path(&self) -> PathBuf {
        self.dir.path().join("events.jsonl")
    }
}

/// Station facing +y from `(x, 0)`.
pub fn station(id: u32, x: f64, role: AgentRole) -> AgentStation {
    serde_json::from_value(json!({
        "station_id": id,
        "position": {"x": x, "y": 0.0},
        "orientation_rad": std::f64::consts::FRAC_PI_2,
        "role": role,
        "beacon": {"region_uuid": "00000000-0000-0000-0000-000000000000", "major": 1, "minor": id},
    }))
    .expect("station json")
}

pub fn config(dir: &TempDir, auto_dispatch: bool) -> ServiceConfig {
    let mut cfg = ServiceConfig {
        audit_file: Some(dir.path().join("audit.chain")),
        event_log: Some(dir.path().join("events.jsonl")),
        auto_dispatch,
        stations: vec![
            station(1, 0.0, AgentRole::CustomerService),
            station(2, 6.0, AgentRole::FinancialAdvisor),
        ],
        ..ServiceConfig::default()
    };
    cfg.branch.credentials = BTreeMap::from([
        ("1001".to_owned(), "1234".to_owned()),
        ("1002".to_owned(), "5678".to_owned()),
        ("1003".to_owned(), "0000".to_owned()),
    ]);
    cfg
}

pub async fn start_with(cfg: ServiceConfig, dir: TempDir) -> Svc {
    let listener = TcpListener::bind("127.0.0.1:0").await.expect("bind");
    let running = teller_service::start_on(&cfg, listener)
        .await
        .expect("start");
    let base = format!("http://{}", running.addr);
    Svc {
        client: BranchClient::new(&base),
        ws: ws_url(&base),
        running,
        dir,
    }
}

pub async fn start(auto_dispatch: bool) -> Svc {
    let dir = TempDir::new().expect("tempdir");
    let cfg = config(&dir, auto_dispatch);
    start_with(cfg, dir).await
}

pub const S1: StationId = StationId(1);
pub const S2: StationId = StationId(2);
