//! The central branch service as a synchronous state machine.
//!
//! [`Branch`] owns every session, station line, customer profile and the
//! audit chain. Callers serialize access to it (the network service runs it
//! inside a single actor task; the simulator calls it directly). Messages
//! that the service owes to connected clients accumulate in an outbox that
//! the caller drains after each operation.

mod queue;
mod registry;
mod roles;
mod session;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use queue::{select_station, Assignment, QueueEntry, StationCandidate, StationQueues};
pub use registry::{
    crowd_levels, CrowdReport, RegisteredStation, StationRegistry, StationStatus, MISSED_HEARTBEATS,
};
pub use roles::{AgentRole, Entitlement, RoleMatrix, ServiceNeed};
pub use session::{Session, SessionState, TransitionRecord};

use crate::audit::{AuditChain, AuditKind};
use crate::profile::{CustomerProfile, DataCategory, ProfileError, RetentionPolicy};
use crate::protocol::{CustomerId, MessagePayload, SessionId, StationId};
use crate::station::{AgentStation, EncodedFrame, ObservationReport};
use crate::Millis;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BranchError {
    #[error("unknown station {0}")]
    UnknownStation(StationId),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("customer {0} has no open session")]
    NoOpenSession(CustomerId),
    #[error("session {session} is {state:?}; {operation} not allowed")]
    WrongState {
        session: SessionId,
        state: SessionState,
        operation: &'static str,
    },
    #[error("authentication failed")]
    AuthFailed,
    #[error("unknown role {0:?}")]
    UnknownRole(String),
    #[error("no stations available")]
    NoStationsAvailable,
    #[error("station {0} is already registered")]
    RegistrationRejected(StationId),
    #[error("invalid station: {0}")]
    InvalidStation(String),
    #[error("consent withheld for {0:?} data")]
    ConsentDenied(DataCategory),
}

impl From<ProfileError> for BranchError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::ConsentDenied(c) => BranchError::ConsentDenied(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    pub role_matrix: RoleMatrix,
    /// Customer id (decimal string) to shared secret.
    pub credentials: BTreeMap<String, String>,
    pub heartbeat_interval_ms: u64,
    pub report_interval_ms: u64,
    /// Used only for queue ETA estimates.
    pub service_time_mean_s: f64,
    pub retention: RetentionPolicy,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            role_matrix: RoleMatrix::default(),
            credentials: BTreeMap::new(),
            heartbeat_interval_ms: 5_000,
            report_interval_ms: 5_000,
            service_time_mean_s: 120.0,
            retention: RetentionPolicy::default(),
        }
    }
}

impl BranchConfig {
    pub fn credential_for(&self, customer: CustomerId) -> Option<&str> {
        self.credentials
            .get(&customer.to_string())
            .map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.role_matrix.validate()?;
        self.retention.validate()?;
        if self.heartbeat_interval_ms == 0 || self.report_interval_ms == 0 {
            return Err("intervals must be positive".into());
        }
        if !(self.service_time_mean_s > 0.0) {
            return Err("service_time_mean_s must be positive".into());
        }
        Ok(())
    }
}

/// A message the service owes to the client holding `session_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub session_id: SessionId,
    pub customer_id: CustomerId,
    pub payload: MessagePayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny(String),
}

/// Arrival/departure bookkeeping derived from session flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlowCounts {
    pub arrivals: usize,
    pub served: usize,
    pub queued: usize,
    pub departed_unserved: usize,
}

#[derive(Debug)]
pub struct Branch {
    config: BranchConfig,
    registry: StationRegistry,
    sessions: BTreeMap<SessionId, Session>,
    needs: BTreeMap<SessionId, ServiceNeed>,
    open_by_customer: BTreeMap<CustomerId, SessionId>,
    queues: StationQueues,
    audit: AuditChain,
    profiles: BTreeMap<CustomerId, CustomerProfile>,
    observations: BTreeMap<StationId, (ObservationReport, Millis)>,
    frames: BTreeMap<StationId, EncodedFrame>,
    next_session: u128,
    outbox: Vec<Outbound>,
    transitions: Vec<TransitionRecord>,
}

impl Branch {
    pub fn new(config: BranchConfig) -> Self {
        let registry = StationRegistry::new(config.heartbeat_interval_ms);
        Self {
            config,
            registry,
            sessions: BTreeMap::new(),
            needs: BTreeMap::new(),
            open_by_customer: BTreeMap::new(),
            queues: StationQueues::default(),
            audit: AuditChain::new(),
            profiles: BTreeMap::new(),
            observations: BTreeMap::new(),
            frames: BTreeMap::new(),
            next_session: 1,
            outbox: Vec::new(),
            transitions: Vec::new(),
        }
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn registry(&self) -> &StationRegistry {
        &self.registry
    }

    pub fn queues(&self) -> &StationQueues {
        &self.queues
    }

    pub fn audit(&self) -> &AuditChain {
        &self.audit
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn open_session_for(&self, customer: CustomerId) -> Option<&Session> {
        self.open_by_customer
            .get(&customer)
            .and_then(|id| self.sessions.get(id))
    }

    pub fn profile(&self, customer: CustomerId) -> Option<&CustomerProfile> {
        self.profiles.get(&customer)
    }

    pub fn drain_outbox(&mut self) -> Vec<Outbound> {
        std::mem::take(&mut self.outbox)
    }

    pub fn drain_transitions(&mut self) -> Vec<TransitionRecord> {
        std::mem::take(&mut self.transitions)
    }

    // ---- stations -------------------------------------------------------

    pub fn register_station(
        &mut self,
        station: AgentStation,
        now: Millis,
    ) -> Result<(), BranchError> {
        station
            .validate()
            .map_err(|e| BranchError::InvalidStation(e.to_string()))?;
        let id = station.station_id;
        if !self.registry.register(station, now) {
            return Err(BranchError::RegistrationRejected(id));
        }
        self.queues.ensure_station(id);
        Ok(())
    }

    /// Adds or replaces a customer's credential.
    pub fn enroll(&mut self, customer: CustomerId, secret: impl Into<String>) {
        self.config
            .credentials
            .insert(customer.to_string(), secret.into());
    }

    pub fn heartbeat(&mut self, station: StationId, now: Millis) -> Result<(), BranchError> {
        self.registry
            .heartbeat(station, now)
            .then_some(())
            .ok_or(BranchError::UnknownStation(station))
    }

    /// A station is busy while some session is in service there.
    pub fn station_busy(&self, station: StationId) -> bool {
        self.sessions
            .values()
            .any(|s| s.state == SessionState::InService && s.bound_station == Some(station))
    }

    pub fn record_observation(
        &mut self,
        report: ObservationReport,
        at: Millis,
    ) -> Result<(), BranchError> {
        if !self.registry.contains(report.station_id) {
            return Err(BranchError::UnknownStation(report.station_id));
        }
        self.observations.insert(report.station_id, (report, at));
        Ok(())
    }

    pub fn crowd_levels(&self, now: Millis) -> CrowdReport {
        crowd_levels(
            self.registry.all().map(|s| s.station_id),
            &self.observations,
            self.config.report_interval_ms,
            now,
        )
    }

    /// Keeps only the newest frame per station.
    pub fn record_frame(
        &mut self,
        station: StationId,
        frame: EncodedFrame,
    ) -> Result<(), BranchError> {
        if !self.registry.contains(station) {
            return Err(BranchError::UnknownStation(station));
        }
        self.frames.insert(station, frame);
        Ok(())
    }

    /// Consumes the station's latest frame (at most one frame per request).
    pub fn take_frame(&mut self, station: StationId) -> Option<EncodedFrame> {
        self.frames.remove(&station)
    }

    // ---- session lifecycle ---------------------------------------------

    /// Allocates a session id without opening a session.
    pub fn reserve_session_id(&mut self) -> SessionId {
        let id = SessionId::from_u128(self.next_session);
        self.next_session += 1;
        id
    }

    /// Idempotent per customer: returns the open session if one exists.
    pub fn open_preconnect(
        &mut self,
        customer: CustomerId,
        station: StationId,
        at: Millis,
    ) -> Result<SessionId, BranchError> {
        self.open_preconnect_as(customer, station, at, None)
    }

    /// As [`Branch::open_preconnect`], using a previously reserved id for a new session.
    pub fn open_preconnect_as(
        &mut self,
        customer: CustomerId,
        station: StationId,
        at: Millis,
        reserved: Option<SessionId>,
    ) -> Result<SessionId, BranchError> {
        if let Some(&id) = self.open_by_customer.get(&customer) {
            return Ok(id);
        }
        if !self.registry.contains(station) {
            return Err(BranchError::UnknownStation(station));
        }
        let id = match reserved {
            Some(id) if !id.is_nil() && !self.sessions.contains_key(&id) => id,
            _ => self.reserve_session_id(),
        };
        self.sessions
            .insert(id, Session::new(id, customer, station, at));
        self.open_by_customer.insert(customer, id);
        Ok(id)
    }

    pub fn authenticate(
        &mut self,
        session_id: SessionId,
        credential: &[u8],
        at: Millis,
    ) -> Result<BTreeSet<Entitlement>, BranchError> {
        let session = self.session_checked(session_id)?;
        let customer = session.customer_id;
        if session.state != SessionState::PreConnected {
            return Err(wrong_state(session, "authenticate"));
        }
        let ok = self
            .config
            .credential_for(customer)
            .is_some_and(|secret| secret.as_bytes() == credential);
        self.audit.append(
            AuditKind::AuthAttempt,
            &json!({"customer_id": customer, "ok": ok}),
            session_id,
            at,
            true,
        );
        if !ok {
            return Err(BranchError::AuthFailed);
        }
        self.transition(session_id, SessionState::Authenticated, at)?;
        let role = AgentRole::CustomerService;
        let entitlements = self.config.role_matrix.entitlements(role);
        let session = self.sessions.get_mut(&session_id).expect("checked");
        session.active_role = Some(role);
        session.entitlements = entitlements.clone();
        self.profiles.entry(customer).or_insert_with(|| {
            CustomerProfile::new(customer, format!("Customer {customer}"), "en")
        });
        Ok(entitlements)
    }

    /// Picks a station for the customer's need and enqueues them there.
    pub fn assign_station(
        &mut self,
        customer: CustomerId,
        need: ServiceNeed,
        distance_to: impl Fn(&AgentStation) -> f64,
        at: Millis,
    ) -> Result<Assignment, BranchError> {
        let session_id = *self
            .open_by_customer
            .get(&customer)
            .ok_or(BranchError::NoOpenSession(customer))?;
        let session = &self.sessions[&session_id];
        if session.state != SessionState::Authenticated {
            return Err(wrong_state(session, "assign_station"));
        }
        let candidates: Vec<StationCandidate> = self
            .registry
            .available(at)
            .map(|s| StationCandidate {
                station_id: s.station_id,
                capable: s.role.can_serve(need),
                queue_len: self.queues.len(s.station_id),
                distance_m: distance_to(s),
            })
            .collect();
        let assignment = select_station(&candidates).ok_or(BranchError::NoStationsAvailable)?;
        self.enqueue(session_id, assignment.station_id, need, at)?;
        Ok(assignment)
    }

    /// Places an authenticated (or transferring) session at the back of a
    /// station's line. Returns the 1-based position.
    pub fn enqueue(
        &mut self,
        session_id: SessionId,
        station: StationId,
        need: ServiceNeed,
        at: Millis,
    ) -> Result<usize, BranchError> {
        if !self.registry.contains(station) {
            return Err(BranchError::UnknownStation(station));
        }
        let session = self.session_checked(session_id)?;
        if !matches!(
            session.state,
            SessionState::Authenticated | SessionState::Transferring
        ) {
            return Err(wrong_state(session, "enqueue"));
        }
        let customer = session.customer_id;
        self.transition(session_id, SessionState::Queued, at)?;
        let session = self.sessions.get_mut(&session_id).expect("checked");
        session.bound_station = Some(station);
        session.enqueued = true;
        self.needs.insert(session_id, need);
        let position = self.queues.push(QueueEntry {
            customer_id: customer,
            need,
            enqueued_at: at,
            assigned_station: station,
        });
        self.notify_line_from(station, position - 1);
        Ok(position)
    }

    /// Serves the head of a station's line.
    pub fn next_in_queue(&mut self, station: StationId, at: Millis) -> Option<CustomerId> {
        let entry = self.queues.pop_front(station)?;
        let session_id = self.open_by_customer[&entry.customer_id];
        self.transition(session_id, SessionState::InService, at)
            .expect("queued sessions can enter service");
        let station_role = self.registry.get(station).map(|s| s.role);
        let session = self.sessions.get_mut(&session_id).expect("open");
        session.bound_station = Some(station);
        session.served = true;
        if let Some(role) = station_role.filter(|r| session.active_role != Some(*r)) {
            self.apply_role(session_id, role, "station role", at);
        }
        self.notify_line_from(station, 0);
        Some(entry.customer_id)
    }

    pub fn switch_role(
        &mut self,
        session_id: SessionId,
        new_role: AgentRole,
        reason: &str,
        at: Millis,
    ) -> Result<(), BranchError> {
        let session = self.session_checked(session_id)?;
        if session.state != SessionState::InService {
            return Err(wrong_state(session, "switch_role"));
        }
        self.apply_role(session_id, new_role, reason, at);
        Ok(())
    }

    pub fn switch_role_named(
        &mut self,
        session_id: SessionId,
        new_role: &str,
        reason: &str,
        at: Millis,
    ) -> Result<(), BranchError> {
        let role = new_role.parse().map_err(BranchError::UnknownRole)?;
        self.switch_role(session_id, role, reason, at)
    }

    fn apply_role(&mut self, session_id: SessionId, role: AgentRole, reason: &str, at: Millis) {
        let entitlements = self.config.role_matrix.entitlements(role);
        let session = self.sessions.get_mut(&session_id).expect("caller checked");
        let previous = session.active_role;
        session.active_role = Some(role);
        session.entitlements = entitlements;
        let customer = session.customer_id;
        self.audit.append(
            AuditKind::RoleSwitch,
            &json!({"from": previous, "to": role, "reason": reason}),
            session_id,
            at,
            true,
        );
        if previous != Some(role) {
            self.outbox.push(Outbound {
                session_id,
                customer_id: customer,
                payload: MessagePayload::RoleSwitch {
                    new_role: role,
                    reason: reason.to_owned(),
                },
            });
        }
    }

    /// Deny by default; denials are audited.
    pub fn authorize(&mut self, session_id: SessionId, resource: &str, at: Millis) -> Decision {
        let decision = match self.sessions.get(&session_id) {
            None => Decision::Deny("unknown session".into()),
            Some(s) if s.entitled_to(resource) => Decision::Allow,
            Some(s) => Decision::Deny(match s.active_role {
                Some(role) => format!("{resource} is outside the {role} scope"),
                None => format!("{resource} requires authentication"),
            }),
        };
        if let Decision::Deny(reason) = &decision {
            self.audit.append(
                AuditKind::Authorization,
                &json!({"resource": resource, "decision": "deny", "reason": reason}),
                session_id,
                at,
                true,
            );
        }
        decision
    }

    /// Moves a queued or in-service customer to another station's line.
    pub fn rebind_session(
        &mut self,
        session_id: SessionId,
        new_station: StationId,
        at: Millis,
    ) -> Result<usize, BranchError> {
        if !self.registry.contains(new_station) {
            return Err(BranchError::UnknownStation(new_station));
        }
        let session = self.session_checked(session_id)?;
        let (customer, state, from) = (session.customer_id, session.state, session.bound_station);
        match state {
            SessionState::Queued => self.leave_line(customer),
            SessionState::InService => {
                self.transition(session_id, SessionState::Transferring, at)?
            }
            _ => return Err(wrong_state(session, "rebind_session")),
        }
        self.audit.append(
            AuditKind::Handoff,
            &json!({"from": from, "to": new_station}),
            session_id,
            at,
            true,
        );
        self.outbox.push(Outbound {
            session_id,
            customer_id: customer,
            payload: MessagePayload::HandoffDirective {
                target_station_id: new_station,
                reason: "customer moved".into(),
            },
        });
        let need = self
            .needs
            .get(&session_id)
            .copied()
            .unwrap_or(ServiceNeed::GeneralInquiry);
        if state == SessionState::InService {
            return self.enqueue(session_id, new_station, need, at);
        }
        // Still Queued: only the line changes, so no state transition.
        let s = self.sessions.get_mut(&session_id).expect("checked");
        s.bound_station = Some(new_station);
        let position = self.queues.push(QueueEntry {
            customer_id: customer,
            need,
            enqueued_at: at,
            assigned_station: new_station,
        });
        self.notify_line_from(new_station, position - 1);
        Ok(position)
    }

    pub fn close_session(
        &mut self,
        session_id: SessionId,
        reason: &str,
        at: Millis,
    ) -> Result<(), BranchError> {
        let session = self.session_checked(session_id)?;
        if session.state == SessionState::Closed {
            return Err(wrong_state(session, "close_session"));
        }
        let customer = session.customer_id;
        if session.state == SessionState::Queued {
            self.leave_line(customer);
        }
        self.transition(session_id, SessionState::Closed, at)?;
        let s = self.sessions.get_mut(&session_id).expect("checked");
        s.entitlements.clear();
        self.open_by_customer.remove(&customer);
        self.outbox.push(Outbound {
            session_id,
            customer_id: customer,
            payload: MessagePayload::SessionClose {
                reason: reason.to_owned(),
            },
        });
        Ok(())
    }

    pub fn flow_counts(&self) -> FlowCounts {
        let mut c = FlowCounts::default();
        for s in self.sessions.values().filter(|s| s.enqueued) {
            c.arrivals += 1;
            if s.served {
                c.served += 1;
            } else if s.state == SessionState::Closed {
                c.departed_unserved += 1;
            } else {
                c.queued += 1;
            }
        }
        c
    }

    // ---- profiles & audit ----------------------------------------------

    pub fn ensure_profile(
        &mut self,
        customer: CustomerId,
        display_name: &str,
        locale: &str,
    ) -> &mut CustomerProfile {
        self.profiles
            .entry(customer)
            .or_insert_with(|| CustomerProfile::new(customer, display_name, locale))
    }

    /// Stores a fact if consented; refusals are audited against the session.
    pub fn remember(
        &mut self,
        customer: CustomerId,
        category: DataCategory,
        key: &str,
        value: &str,
        at: Millis,
    ) -> Result<(), BranchError> {
        let profile = self.profiles.entry(customer).or_insert_with(|| {
            CustomerProfile::new(customer, format!("Customer {customer}"), "en")
        });
        match profile.remember(category, key, value, at) {
            Ok(()) => Ok(()),
            Err(e) => {
                let session = self
                    .open_by_customer
                    .get(&customer)
                    .copied()
                    .unwrap_or(SessionId::NIL);
                self.audit.append(
                    AuditKind::Authorization,
                    &json!({"consent_denied": category, "key": key}),
                    session,
                    at,
                    true,
                );
                Err(e.into())
            }
        }
    }

    pub fn set_consent(
        &mut self,
        customer: CustomerId,
        category: DataCategory,
        value: bool,
    ) -> bool {
        let profile = self.profiles.entry(customer).or_insert_with(|| {
            CustomerProfile::new(customer, format!("Customer {customer}"), "en")
        });
        profile.set_consent(category, value);
        profile.consents_to(category)
    }

    pub fn forget(&mut self, customer: CustomerId, category: DataCategory) -> usize {
        self.profiles
            .get_mut(&customer)
            .map_or(0, |p| p.forget(category))
    }

    pub fn purge_expired(&mut self, now: Millis) -> usize {
        let policy = &self.config.retention;
        self.profiles
            .values_mut()
            .map(|p| p.purge_expired(policy, now))
            .sum()
    }

    fn consents(&self, session_id: SessionId, category: DataCategory) -> bool {
        self.sessions
            .get(&session_id)
            .and_then(|s| self.profiles.get(&s.customer_id))
            .is_none_or(|p| p.consents_to(category))
    }

    /// Appends an audit entry; the payload body is kept only if the
    /// customer consents to the category it belongs to.
    pub fn record(
        &mut self,
        kind: AuditKind,
        payload: &serde_json::Value,
        session_id: SessionId,
        at: Millis,
    ) -> crate::audit::AuditEntry {
        let retain = match kind {
            AuditKind::Utterance | AuditKind::Reply => {
                self.consents(session_id, DataCategory::Conversational)
            }
            AuditKind::FrameRef => self.consents(session_id, DataCategory::Visual),
            _ => true,
        };
        self.audit
            .append(kind, payload, session_id, at, retain)
            .clone()
    }

    /// Queues a message for the client holding `session_id`.
    pub fn send(
        &mut self,
        session_id: SessionId,
        payload: MessagePayload,
    ) -> Result<(), BranchError> {
        let customer_id = self.session_checked(session_id)?.customer_id;
        self.outbox.push(Outbound {
            session_id,
            customer_id,
            payload,
        });
        Ok(())
    }

    pub fn need_of(&self, session_id: SessionId) -> Option<ServiceNeed> {
        self.needs.get(&session_id).copied()
    }

    /// Current 1-based line position of a queued customer.
    pub fn queue_position(&self, customer: CustomerId) -> Option<(StationId, usize)> {
        self.queues.locate(customer).map(|(s, i)| (s, i + 1))
    }

    // ---- internals -----------------------------------------------------

    fn session_checked(&self, id: SessionId) -> Result<&Session, BranchError> {
        self.sessions
            .get(&id)
            .ok_or(BranchError::UnknownSession(id))
    }

    fn transition(
        &mut self,
        id: SessionId,
        to: SessionState,
        at: Millis,
    ) -> Result<(), BranchError> {
        let session = self
            .sessions
            .get_mut(&id)
            .ok_or(BranchError::UnknownSession(id))?;
        if !session.state.can_transition_to(to) {
            return Err(wrong_state(session, "transition"));
        }
        self.transitions.push(TransitionRecord {
            session_id: id,
            from: session.state,
            to,
            at,
        });
        session.state = to;
        session.state_entered_at = at;
        Ok(())
    }

    fn leave_line(&mut self, customer: CustomerId) {
        if let Some((entry, idx)) = self.queues.remove(customer) {
            self.notify_line_from(entry.assigned_station, idx);
        }
    }

    /// Sends positions to everyone at or behind index `from` in a line.
    fn notify_line_from(&mut self, station: StationId, from: usize) {
        let eta_per_slot = self.config.service_time_mean_s;
        let updates: Vec<Outbound> = self
            .queues
            .line(station)
            .iter()
            .enumerate()
            .skip(from)
            .filter_map(|(idx, entry)| {
                let session_id = *self.open_by_customer.get(&entry.customer_id)?;
                let position = idx as u32 + 1;
                Some(Outbound {
                    session_id,
                    customer_id: entry.customer_id,
                    payload: MessagePayload::QueueUpdate {
                        position,
                        station_id: station,
                        eta_s: (f64::from(position) * eta_per_slot).round() as u64,
                    },
                })
            })
            .collect();
        self.outbox.extend(updates);
    }
}

fn wrong_state(session: &Session, operation: &'static str) -> BranchError {
    BranchError::WrongState {
        session: session.session_id,
        state: session.state,
        operation,
    }
}
