//! HTTP/JSON operations for operators, station agents and the CLI.

use axum::extract::{Path, Query, State as AxumState};
use axum::http::StatusCode;
use axum::Json;
use serde::Deserialize;
use serde_json::{json, Value};
use teller_core::api::*;
use teller_core::audit::{export_transcript, AuditEntry};
use teller_core::branch::{AgentRole, Assignment, CrowdReport, Decision, Session, StationStatus};
use teller_core::dialog::TurnOutcome;
use teller_core::inference::{self, InferenceRequest, InferenceResponse};
use teller_core::profile::CustomerProfile;
use teller_core::protocol::{CustomerId, SessionId, StationId};
use teller_core::sim::{self, MetricsReport, SimConfig};
use teller_core::station::{AgentStation, Point};

use crate::actor::now_ms;
use crate::error::ApiError;
use crate::AppState;

type ApiResult<T> = Result<Json<T>, ApiError>;

pub async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

pub async fn status(AxumState(app): AxumState<AppState>) -> ApiResult<StatusSummary> {
    Ok(Json(app.handle.call(|s| s.status()).await?))
}

// ---- stations ----------------------------------------------------------------

pub async fn list_stations(AxumState(app): AxumState<AppState>) -> ApiResult<Vec<StationStatus>> {
    Ok(Json(
        app.handle
            .call(|s| s.branch.registry().status(now_ms()))
            .await?,
    ))
}

pub async fn register_station(
    AxumState(app): AxumState<AppState>,
    Json(station): Json<AgentStation>,
) -> Result<(StatusCode, Json<AgentStation>), ApiError> {
    let echo = station.clone();
    app.handle
        .call(move |s| s.branch.register_station(station, now_ms()))
        .await??;
    Ok((StatusCode::CREATED, Json(echo)))
}

pub async fn heartbeat(
    AxumState(app): AxumState<AppState>,
    Path(id): Path<u32>,
) -> Result<StatusCode, ApiError> {
    app.handle
        .call(move |s| s.branch.heartbeat(StationId(id), now_ms()))
        .await??;
    Ok(StatusCode::NO_CONTENT)
}

pub async fn next_in_queue(
    AxumState(app): AxumState<AppState>,
    Path(id): Path<u32>,
) -> ApiResult<NextServed> {
    let customer_id = app
        .handle
        .call(move |s| {
            let station = StationId(id);
            if !s.branch.registry().contains(station) {
                return Err(ApiError::from(
                    teller_core::branch::BranchError::UnknownStation(station),
                ));
            }
            if s.branch.station_busy(station) {
                return Ok(None);
            }
            Ok(s.branch.next_in_queue(station, now_ms()))
        })
        .await??;
    Ok(Json(NextServed { customer_id }))
}

pub async fn crowd(AxumState(app): AxumState<AppState>) -> ApiResult<CrowdReport> {
    Ok(Json(
        app.handle.call(|s| s.branch.crowd_levels(now_ms())).await?,
    ))
}

// ---- sessions ----------------------------------------------------------------

fn sid(raw: &str) -> Result<SessionId, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("bad session id {raw:?}")))
}

fn session_of(s: &crate::actor::State, id: SessionId) -> Result<Session, ApiError> {
    s.branch
        .session(id)
        .cloned()
        .ok_or_else(|| teller_core::branch::BranchError::UnknownSession(id).into())
}

pub async fn list_sessions(AxumState(app): AxumState<AppState>) -> ApiResult<Vec<Session>> {
    Ok(Json(
        app.handle
            .call(|s| s.branch.sessions().cloned().collect())
            .await?,
    ))
}

pub async fn open_session(
    AxumState(app): AxumState<AppState>,
    Json(req): Json<OpenRequest>,
) -> ApiResult<Session> {
    let session = app
        .handle
        .call(move |s| {
            let id = s
                .branch
                .open_preconnect(req.customer_id, req.station_id, now_ms())?;
            session_of(s, id)
        })
        .await??;
    Ok(Json(session))
}

pub async fn get_session(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
) -> ApiResult<Session> {
    let id = sid(&raw)?;
    Ok(Json(app.handle.call(move |s| session_of(s, id)).await??))
}

pub async fn authenticate(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
    Json(req): Json<AuthenticateRequest>,
) -> ApiResult<EntitlementList> {
    let id = sid(&raw)?;
    let ents = app
        .handle
        .call(move |s| {
            s.branch
                .authenticate(id, req.credential.as_bytes(), now_ms())
        })
        .await??;
    Ok(Json(EntitlementList {
        entitlements: ents.into_iter().map(|e| e.resource).collect(),
    }))
}

pub async fn assign(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
    Json(req): Json<AssignRequest>,
) -> ApiResult<Assignment> {
    let id = sid(&raw)?;
    let assignment = app
        .handle
        .call(move |s| {
            let session = session_of(s, id)?;
            let here = req.position.or_else(|| {
                session
                    .bound_station
                    .and_then(|b| s.branch.registry().get(b))
                    .map(|st| st.position)
            });
            let here = here.unwrap_or(Point::new(0.0, 0.0));
            s.branch
                .assign_station(
                    session.customer_id,
                    req.need,
                    |st| here.distance_to(st.position),
                    now_ms(),
                )
                .map_err(ApiError::from)
        })
        .await??;
    Ok(Json(assignment))
}

pub async fn switch_role(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
    Json(req): Json<RoleRequest>,
) -> ApiResult<Session> {
    let id = sid(&raw)?;
    let session = app
        .handle
        .call(move |s| {
            let reason = req.reason.as_deref().unwrap_or("operator");
            s.branch
                .switch_role_named(id, &req.role, reason, now_ms())?;
            session_of(s, id)
        })
        .await??;
    Ok(Json(session))
}

pub async fn authorize(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
    Json(req): Json<AuthorizeRequest>,
) -> ApiResult<Decision> {
    let id = sid(&raw)?;
    Ok(Json(
        app.handle
            .call(move |s| s.branch.authorize(id, &req.resource, now_ms()))
            .await?,
    ))
}

pub async fn rebind(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
    Json(req): Json<RebindRequest>,
) -> ApiResult<LinePosition> {
    let id = sid(&raw)?;
    let position = app
        .handle
        .call(move |s| s.branch.rebind_session(id, req.station_id, now_ms()))
        .await??;
    Ok(Json(LinePosition {
        station_id: req.station_id,
        position,
    }))
}

pub async fn close(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
    Json(req): Json<CloseRequest>,
) -> Result<StatusCode, ApiError> {
    let id = sid(&raw)?;
    app.handle
        .call(move |s| {
            let reason = req.reason.as_deref().unwrap_or("closed by operator");
            s.branch.close_session(id, reason, now_ms())
        })
        .await??;
    Ok(StatusCode::NO_CONTENT)
}

pub async fn utterance(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
    Json(req): Json<UtteranceRequest>,
) -> ApiResult<TurnOutcome> {
    let id = sid(&raw)?;
    Ok(Json(app.handle.converse(id, req.text, req.locale).await?))
}

pub async fn transcript(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
) -> ApiResult<Vec<TranscriptLine>> {
    let id = sid(&raw)?;
    let lines = app
        .handle
        .call(move |s| {
            session_of(s, id)?;
            let audit = s.branch.audit();
            Ok::<_, ApiError>(
                export_transcript(audit.entries(), id)
                    .into_iter()
                    .map(|e| TranscriptLine {
                        seq: e.seq,
                        at: e.at,
                        kind: e.kind,
                        body: audit
                            .payload(&e.payload_digest)
                            .and_then(|b| serde_json::from_slice(b).ok()),
                    })
                    .collect(),
            )
        })
        .await??;
    Ok(Json(lines))
}

/// Every audit entry of a session, for the privacy panel.
pub async fn session_audit(
    AxumState(app): AxumState<AppState>,
    Path(raw): Path<String>,
) -> ApiResult<Vec<AuditEntry>> {
    let id = sid(&raw)?;
    let entries = app
        .handle
        .call(move |s| {
            s.branch
                .audit()
                .entries()
                .iter()
                .filter(|e| e.session_id == id)
                .cloned()
                .collect()
        })
        .await?;
    Ok(Json(entries))
}

// ---- profiles ----------------------------------------------------------------

pub async fn get_profile(
    AxumState(app): AxumState<AppState>,
    Path(cid): Path<u64>,
) -> ApiResult<CustomerProfile> {
    let profile = app
        .handle
        .call(move |s| s.branch.profile(CustomerId(cid)).cloned())
        .await?
        .ok_or_else(|| ApiError::not_found(format!("no profile for customer {cid}")))?;
    Ok(Json(profile))
}

/// Returns the value the server now holds.
pub async fn set_consent(
    AxumState(app): AxumState<AppState>,
    Path(cid): Path<u64>,
    Json(change): Json<ConsentChange>,
) -> ApiResult<ConsentChange> {
    let value = app
        .handle
        .call(move |s| {
            s.branch
                .set_consent(CustomerId(cid), change.category, change.value)
        })
        .await?;
    Ok(Json(ConsentChange {
        category: change.category,
        value,
    }))
}

pub async fn forget(
    AxumState(app): AxumState<AppState>,
    Path(cid): Path<u64>,
    Json(req): Json<ForgetRequest>,
) -> ApiResult<Removed> {
    let removed = app
        .handle
        .call(move |s| s.branch.forget(CustomerId(cid), req.category))
        .await?;
    Ok(Json(Removed { removed }))
}

// ---- audit and events --------------------------------------------------------

pub async fn verify_audit(AxumState(app): AxumState<AppState>) -> ApiResult<AuditSummary> {
    let summary = app
        .handle
        .call(|s| AuditSummary {
            len: s.branch.audit().len(),
            verdict: s.branch.audit().verify(),
        })
        .await?;
    Ok(Json(summary))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    pub after: usize,
}

pub async fn events(
    AxumState(app): AxumState<AppState>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<EventPage> {
    let page = app
        .handle
        .call(move |s| {
            let lines = s.events_after(q.after).to_vec();
            EventPage {
                next: q.after + lines.len(),
                lines,
            }
        })
        .await?;
    Ok(Json(page))
}

// ---- stateless gateway and simulation ----------------------------------------

pub async fn infer(
    AxumState(app): AxumState<AppState>,
    Json(req): Json<InferenceRequest>,
) -> ApiResult<InferenceResponse> {
    let backend = app.backend.clone();
    let gateway = app.gateway;
    let result =
        tokio::task::spawn_blocking(move || inference::infer(&req, backend.as_ref(), &gateway))
            .await
            .map_err(|e| {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
            })?;
    result
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "inference_failed", e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, sim::SimError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

pub async fn sim_run(Json(cfg): Json<SimConfig>) -> ApiResult<MetricsReport> {
    Ok(Json(blocking(move || sim::run(&cfg)).await?))
}

pub async fn sim_trace(Json(cfg): Json<SimConfig>) -> ApiResult<SimTrace> {
    let (report, log) = blocking(move || sim::run_with_log(&cfg)).await?;
    Ok(Json(SimTrace {
        report,
        log: log.lines().to_vec(),
    }))
}

pub async fn sim_scaling(Json(cfg): Json<SimConfig>) -> ApiResult<Vec<sim::ScalingPoint>> {
    Ok(Json(
        blocking(move || sim::throughput_by_station_count(&cfg)).await?,
    ))
}

pub async fn sim_compare(Json(cfg): Json<SimConfig>) -> ApiResult<Savings> {
    let preconnect_savings_ms = blocking(move || sim::compare_baseline(&cfg)).await?;
    Ok(Json(Savings {
        preconnect_savings_ms,
    }))
}

/// Role names, for clients building a role picker.
pub async fn roles() -> Json<Vec<AgentRole>> {
    Json(AgentRole::ALL.to_vec())
}
