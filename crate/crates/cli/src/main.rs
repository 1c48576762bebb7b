//! `teller`: command line client of the branch service.
//!
//! `run`, `compare`, `scaling`, `status` and `crowd` talk to a service over HTTP. Without
//! `--remote`, the simulation commands start a private in-process service and
//! talk to that. `serve` hosts a branch plus one simulated agent per
//! configured station. Exit codes: 0 success, 2 invalid config, 3 invariant
//! violation (including a tampered audit chain), 1 anything else.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand};
use teller_client::{AgentTask, BranchClient, ClientError, StationAgent};
use teller_core::audit::persist::{decode_chain, read_chain_file, verify_bytes};
use teller_core::audit::ChainVerdict;
use teller_core::branch::SessionState;
use teller_core::config::ServiceConfig;
use teller_core::sim::{emit_metrics, SimConfig};
use teller_core::station::{AgentStation, CustomerSighting, Point};
use teller_service::Running;
use tokio::net::TcpListener;

const DEFAULT_URL: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(
    name = "teller",
    version,
    about = "Branch service client and simulation front end"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs one simulation and writes its canonical metrics report.
    Run {
        /// Simulation config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Simulated seconds.
        #[arg(long)]
        duration: f64,
        /// Metrics report destination.
        #[arg(long)]
        out: PathBuf,
        /// Also write the event log the digest covers.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Service to run on; a private one is started when absent.
        #[arg(long)]
        remote: Option<String>,
    },
    /// Paired baseline vs pre-connect runs; prints the mean saving.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        remote: Option<String>,
    },
    /// Served customers per hour with 1, 2, ... of the configured stations.
    Scaling {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        remote: Option<String>,
    },
    /// Verifies a persisted audit chain, or a live service's chain.
    VerifyAudit {
        #[arg(required_unless_present = "remote")]
        file: Option<PathBuf>,
        #[arg(long, conflicts_with = "file")]
        remote: Option<String>,
    },
    /// Hosts the branch service with a simulated agent per configured station.
    Serve {
        /// Service config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// How often each station reports and pushes a frame.
        #[arg(long, default_value_t = 1000)]
        report_ms: u64,
    },
    /// Prints the service's status summary.
    Status {
        #[arg(long, default_value = DEFAULT_URL)]
        remote: String,
    },
    /// Prints per-station head counts.
    Crowd {
        #[arg(long, default_value = DEFAULT_URL)]
        remote: String,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Invariant(String),
    Other(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Invariant(m) | Failure::Other(m) => m,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.code() {
            Some("invalid_config") => Failure::Config(e.to_string()),
            Some("invariant_violation") => Failure::Invariant(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("teller: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

async fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            seed,
            duration,
            out,
            log,
            remote,
        } => {
            let cfg = sim_config(&config, seed, Some(duration))?;
            let (client, _private) = connect(remote).await?;
            let trace = client.sim_trace(&cfg).await?;
            emit_metrics(&trace.report, &out).map_err(|e| Failure::Other(e.to_string()))?;
            if let Some(path) = log {
                let text: String = trace.log.iter().flat_map(|l| [l.as_str(), "\n"]).collect();
                std::fs::write(&path, text)
                    .map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
            }
            println!("{}", trace.report.to_canonical());
            Ok(())
        }
        Command::Compare {
            config,
            seed,
            duration,
            remote,
        } => {
            let cfg = sim_config(&config, seed, duration)?;
            let (client, _private) = connect(remote).await?;
            let savings = client.sim_compare(&cfg).await?;
            println!(
                "{}",
                serde_json::json!({ "preconnect_savings_ms": savings })
            );
            Ok(())
        }
        Command::Scaling {
            config,
            seed,
            duration,
            remote,
        } => {
            let cfg = sim_config(&config, seed, duration)?;
            let (client, _private) = connect(remote).await?;
            for point in client.sim_scaling(&cfg).await? {
                println!(
                    "{}",
                    serde_json::to_string(&point).map_err(|e| Failure::Other(e.to_string()))?
                );
            }
            Ok(())
        }
        Command::VerifyAudit { file, remote } => match (file, remote) {
            (_, Some(url)) => {
                let summary = BranchClient::new(url).verify_audit().await?;
                report_verdict(summary.verdict, summary.len)
            }
            (Some(path), None) => {
                let bytes = read_chain_file(&path)
                    .map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
                let len = decode_chain(&bytes).map_or(0, |c| c.len());
                report_verdict(verify_bytes(&bytes), len)
            }
            (None, None) => unreachable!("clap requires a file or --remote"),
        },
        Command::Serve {
            config,
            listen,
            report_ms,
        } => serve(config, listen, Duration::from_millis(report_ms.max(1))).await,
        Command::Status { remote } => print_json(&BranchClient::new(remote).status().await?),
        Command::Crowd { remote } => print_json(&BranchClient::new(remote).crowd().await?),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn report_verdict(verdict: ChainVerdict, len: usize) -> Result<(), Failure> {
    match verdict {
        ChainVerdict::Ok => {
            println!("ok: {len} records");
            Ok(())
        }
        ChainVerdict::TamperedAt(i) => Err(Failure::Invariant(format!(
            "audit chain tampered at record {i}"
        ))),
    }
}

fn sim_config(
    path: &std::path::Path,
    seed: u64,
    duration: Option<f64>,
) -> Result<SimConfig, Failure> {
    let mut cfg =
        SimConfig::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    cfg.seed = seed;
    if let Some(d) = duration {
        cfg.duration_s = d;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

/// A client for `remote`, or for a private service started here.
async fn connect(remote: Option<String>) -> Result<(BranchClient, Option<Running>), Failure> {
    if let Some(url) = remote {
        return Ok((BranchClient::new(url), None));
    }
    let listener = TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| Failure::Other(e.to_string()))?;
    let running = teller_service::start_on(&ServiceConfig::default(), listener)
        .await
        .map_err(|e| Failure::Other(e.to_string()))?;
    let client = BranchClient::new(format!("http://{}", running.addr));
    Ok((client, Some(running)))
}

/// Where a customer stands while talking to a station.
fn in_front_of(station: &AgentStation) -> Point {
    let d = 1.5;
    Point::new(
        station.position.x + d * station.orientation_rad.cos(),
        station.position.y + d * station.orientation_rad.sin(),
    )
}

async fn serve(
    config: PathBuf,
    listen: Option<SocketAddr>,
    interval: Duration,
) -> Result<(), Failure> {
    let mut cfg = ServiceConfig::load(&config)
        .map_err(|e| Failure::Config(format!("{}: {e}", config.display())))?;
    if let Some(addr) = listen {
        cfg.listen = addr;
    }
    let running = teller_service::start(&cfg).await.map_err(|e| match e {
        teller_service::ServiceError::Config(m) => Failure::Config(m),
        other => Failure::Other(other.to_string()),
    })?;
    let base = format!("http://{}", running.addr);
    let client = BranchClient::new(&base);
    println!("listening on {base}");

    // The simulated floor: everyone with an open session stands in front of
    // the station they are bound to.
    let floor: Arc<Mutex<Vec<CustomerSighting>>> = Arc::default();
    let stations = cfg.stations.clone();
    let poll = {
        let (client, floor) = (client.clone(), Arc::clone(&floor));
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(interval);
            loop {
                ticker.tick().await;
                let Ok(sessions) = client.sessions().await else {
                    continue;
                };
                let seen = sessions
                    .iter()
                    .filter(|s| s.state != SessionState::Closed)
                    .filter_map(|s| {
                        let st = stations
                            .iter()
                            .find(|st| Some(st.station_id) == s.bound_station)?;
                        Some(CustomerSighting {
                            customer_id: s.customer_id,
                            position: in_front_of(st),
                        })
                    })
                    .collect();
                *floor.lock().expect("floor lock") = seen;
            }
        })
    };

    let mut agents: Vec<AgentTask> = Vec::new();
    for station in &cfg.stations {
        let floor = Arc::clone(&floor);
        let world = Arc::new(move || floor.lock().expect("floor lock").clone());
        let task = StationAgent::new(station.clone())
            .interval(interval)
            .spawn(&client, world)
            .await?;
        agents.push(task);
    }

    tokio::signal::ctrl_c()
        .await
        .map_err(|e| Failure::Other(e.to_string()))?;
    poll.abort();
    for a in &agents {
        a.stop();
    }
    running.task.abort();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use teller_core::api::ErrorBody;

    fn api(code: &str) -> ClientError {
        ClientError::Api {
            status: 400,
            body: ErrorBody {
                code: code.into(),
                detail: String::new(),
            },
        }
    }

    #[test]
    fn service_errors_pick_exit_codes() {
        assert_eq!(Failure::from(api("invalid_config")).exit_code(), 2);
        assert_eq!(Failure::from(api("invariant_violation")).exit_code(), 3);
        assert_eq!(Failure::from(api("unknown_session")).exit_code(), 1);
        assert_eq!(Failure::from(ClientError::Closed).exit_code(), 1);
    }

    #[test]
    fn customers_stand_in_the_station_cone() {
        let cfg = ServiceConfig::load(
            &std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/branch.toml"),
        )
        .unwrap();
        for st in &cfg.stations {
            let p = in_front_of(st);
            assert!(teller_core::station::in_field_of_view(st, p));
            assert!((p.distance_to(st.position) - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cli_parses_the_documented_commands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let ok = |args: &[&str]| Cli::try_parse_from(args).is_ok();
        assert!(ok(&[
            "teller",
            "run",
            "--config",
            "c",
            "--seed",
            "1",
            "--duration",
            "5",
            "--out",
            "o"
        ]));
        assert!(ok(&["teller", "compare", "--config", "c", "--seed", "1"]));
        assert!(ok(&["teller", "verify-audit", "f"]));
        assert!(ok(&["teller", "verify-audit", "--remote", "http://x"]));
        assert!(!ok(&["teller", "verify-audit"]));
        assert!(!ok(&[
            "teller", "run", "--config", "c", "--seed", "1", "--out", "o"
        ]));
        assert!(ok(&["teller", "serve", "--config", "c"]));
    }
}
