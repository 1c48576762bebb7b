//! The branch service.
//!
//! All state lives in one event loop ([`actor`]). The WebSocket endpoint at
//! `/ws` speaks the envelope protocol; everything under `/v1` is HTTP/JSON.
//!
//! | Method | Path | Body / reply |
//! |---|---|---|
//! | GET | `/healthz` | `{"status":"ok"}` |
//! | GET | `/v1/status` | counts of stations, sessions, queue, audit |
//! | GET, POST | `/v1/stations` | list / register an `AgentStation` |
//! | POST | `/v1/stations/{id}/heartbeat` | 204 |
//! | POST | `/v1/stations/{id}/next` | `{"customer_id": n or null}` |
//! | GET | `/v1/crowd` | `CrowdReport` |
//! | GET, POST | `/v1/sessions` | list / pre-connect `{customer_id, station_id}` |
//! | GET | `/v1/sessions/{sid}` | `Session` |
//! | POST | `/v1/sessions/{sid}/authenticate` | `{credential}` → `{entitlements}` |
//! | POST | `/v1/sessions/{sid}/assign` | `{need, position?}` → `Assignment` |
//! | POST | `/v1/sessions/{sid}/role` | `{role, reason?}` → `Session` |
//! | POST | `/v1/sessions/{sid}/authorize` | `{resource}` → `Decision` |
//! | POST | `/v1/sessions/{sid}/rebind` | `{station_id}` → `{station_id, position}` |
//! | POST | `/v1/sessions/{sid}/close` | `{reason?}` → 204 |
//! | POST | `/v1/sessions/{sid}/utterance` | `{text, locale?}` → `TurnOutcome` |
//! | GET | `/v1/sessions/{sid}/transcript` | retained Utterance/Reply bodies |
//! | GET | `/v1/sessions/{sid}/audit` | the session's audit entries |
//! | GET | `/v1/profiles/{cid}` | `CustomerProfile` |
//! | POST | `/v1/profiles/{cid}/consent` | `{category, value}` → server-held value |
//! | POST | `/v1/profiles/{cid}/forget` | `{category}` → `{removed}` |
//! | GET | `/v1/audit/verify` | `{len, verdict}` |
//! | GET | `/v1/events?after=n` | canonical envelopes, one per line |
//! | POST | `/v1/infer` | `InferenceRequest` → `InferenceResponse` |
//! | POST | `/v1/sim/run` | `SimConfig` → `MetricsReport` |
//! | POST | `/v1/sim/trace` | `SimConfig` → `{report, log}` |
//! | POST | `/v1/sim/compare` | `SimConfig` → `{preconnect_savings_ms}` |
//! | POST | `/v1/sim/scaling` | `SimConfig` → throughput per station count |
//!
//! Errors are `{"code", "detail"}` with a matching status.

pub mod actor;
pub mod error;
pub mod http;
pub mod ws;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use teller_core::config::ServiceConfig;
use teller_core::inference::{GatewayConfig, InferenceBackend};
use tokio::net::TcpListener;

pub use actor::Handle;
pub use error::{ApiError, ServiceError};
pub use teller_core::api::ErrorBody;

#[derive(Clone)]
pub struct AppState {
    pub handle: Handle,
    pub backend: Arc<dyn InferenceBackend>,
    pub gateway: GatewayConfig,
}

pub fn router(app: AppState) -> Router {
    use http::*;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/ws", get(ws::upgrade))
        .route("/v1/status", get(status))
        .route("/v1/roles", get(roles))
        .route("/v1/stations", get(list_stations).post(register_station))
        .route("/v1/stations/{id}/heartbeat", post(heartbeat))
        .route("/v1/stations/{id}/next", post(next_in_queue))
        .route("/v1/crowd", get(crowd))
        .route("/v1/sessions", get(list_sessions).post(open_session))
        .route("/v1/sessions/{sid}", get(get_session))
        .route("/v1/sessions/{sid}/authenticate", post(authenticate))
        .route("/v1/sessions/{sid}/assign", post(assign))
        .route("/v1/sessions/{sid}/role", post(switch_role))
        .route("/v1/sessions/{sid}/authorize", post(authorize))
        .route("/v1/sessions/{sid}/rebind", post(rebind))
        .route("/v1/sessions/{sid}/close", post(close))
        .route("/v1/sessions/{sid}/utterance", post(utterance))
        .route("/v1/sessions/{sid}/transcript", get(transcript))
        .route("/v1/sessions/{sid}/audit", get(session_audit))
        .route("/v1/profiles/{cid}", get(get_profile))
        .route("/v1/profiles/{cid}/consent", post(set_consent))
        .route("/v1/profiles/{cid}/forget", post(forget))
        .route("/v1/audit/verify", get(verify_audit))
        .route("/v1/events", get(events))
        .route("/v1/infer", post(infer))
        .route("/v1/sim/run", post(sim_run))
        .route("/v1/sim/trace", post(sim_trace))
        .route("/v1/sim/compare", post(sim_compare))
        .route("/v1/sim/scaling", post(sim_scaling))
        .with_state(app)
}

/// A running service bound to a local address.
pub struct Running {
    pub addr: SocketAddr,
    pub handle: Handle,
    pub task: tokio::task::JoinHandle<()>,
}

/// Validates the config, starts the event loop and serves on `listener`.
pub async fn start_on(
    config: &ServiceConfig,
    listener: TcpListener,
) -> Result<Running, ServiceError> {
    config
        .validate()
        .map_err(|e| ServiceError::Config(e.to_string()))?;
    let handle = actor::spawn(config)?;
    let app = AppState {
        handle: handle.clone(),
        backend: config.backend.build(config.dialog.gateway.timeout_ms),
        gateway: config.dialog.gateway,
    };
    let addr = listener.local_addr()?;
    let router = router(app);
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok(Running { addr, handle, task })
}

/// Binds `config.listen` and serves.
pub async fn start(config: &ServiceConfig) -> Result<Running, ServiceError> {
    let listener = TcpListener::bind(config.listen).await?;
    start_on(config, listener).await
}
