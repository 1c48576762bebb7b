//! The single event loop that owns all mutable service state.
//!
//! Callers submit closures over [`State`]; the loop runs them one at a time,
//! then flushes the branch outbox to connected clients, dispatches idle
//! stations and persists new audit records before replying.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use teller_core::api::StatusSummary;
use teller_core::audit::persist::ChainFileWriter;
use teller_core::branch::{Branch, SessionState};
use teller_core::config::ServiceConfig;
use teller_core::dialog::{Dialog, PreparedTurn, TurnOutcome};
use teller_core::inference::{self, InferenceBackend, InferenceError, InferenceResponse};
use teller_core::protocol::{
    encode, ClientKind, CustomerId, MessageEnvelope, MessagePayload, SequenceCounter,
    SequenceTracker, SessionId, StationId,
};
use teller_core::Millis;
use tokio::sync::{mpsc, oneshot};

use crate::error::{ApiError, ServiceError};

pub fn now_ms() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as Millis)
}

type Job = Box<dyn FnOnce(&mut State) + Send>;

/// Cloneable front door to the event loop.
#[derive(Clone)]
pub struct Handle {
    tx: mpsc::UnboundedSender<Job>,
}

impl Handle {
    /// Runs `f` on the event loop and waits for its result.
    pub async fn call<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut State) -> R + Send + 'static,
    ) -> Result<R, ApiError> {
        let (reply, rx) = oneshot::channel();
        let job: Job = Box::new(move |state| {
            let out = f(state);
            state.settle();
            let _ = reply.send(out);
        });
        self.tx.send(job).map_err(|_| ApiError::stopped())?;
        rx.await.map_err(|_| ApiError::stopped())
    }

    /// One dialog turn: prepare on the loop, infer off it, complete on it.
    pub async fn converse(
        &self,
        session: SessionId,
        text: String,
        locale: String,
    ) -> Result<TurnOutcome, ApiError> {
        let (turn, backend, gateway) = self
            .call(move |s| {
                let at = now_ms();
                s.dialog
                    .prepare_turn(&mut s.branch, session, &text, &locale, at)
                    .map(|t| (t, Arc::clone(&s.backend), s.dialog.config.gateway))
            })
            .await??;
        let request = turn.request.clone();
        let result = tokio::task::spawn_blocking(move || {
            inference::infer(&request, backend.as_ref(), &gateway)
        })
        .await
        .unwrap_or(Err(InferenceError::BackendUnavailable(
            "inference task failed".into(),
        )));
        self.complete(turn, result).await
    }

    async fn complete(
        &self,
        turn: PreparedTurn,
        result: Result<InferenceResponse, InferenceError>,
    ) -> Result<TurnOutcome, ApiError> {
        self.call(move |s| {
            let at = now_ms();
            s.dialog
                .complete_turn(&mut s.branch, turn, result, at)
                .map_err(ApiError::from)
        })
        .await?
    }
}

pub(crate) struct Conn {
    pub tx: mpsc::UnboundedSender<String>,
    pub kind: Option<ClientKind>,
    /// Server-to-client envelopes carry this id.
    pub session: SessionId,
    pub customer: Option<CustomerId>,
    pub station: Option<StationId>,
    pub locale: String,
    pub inbound: SequenceTracker,
}

pub struct State {
    pub branch: Branch,
    pub dialog: Dialog,
    pub backend: Arc<dyn InferenceBackend>,
    auto_dispatch: bool,
    pub(crate) conns: BTreeMap<u64, Conn>,
    next_conn: u64,
    /// Which connection receives a session's messages.
    pub(crate) routes: BTreeMap<SessionId, u64>,
    out_seq: BTreeMap<SessionId, SequenceCounter>,
    /// Utterance that put a customer in line, answered once service starts.
    pub(crate) pending: BTreeMap<SessionId, (String, String)>,
    events: Vec<String>,
    event_file: Option<File>,
    audit_file: Option<ChainFileWriter>,
    persisted: usize,
    me: mpsc::WeakUnboundedSender<Job>,
}

/// Starts the event loop.
pub fn spawn(config: &ServiceConfig) -> Result<Handle, ServiceError> {
    let mut branch = Branch::new(config.branch.clone());
    let now = now_ms();
    for s in &config.stations {
        branch
            .register_station(s.clone(), now)
            .map_err(|e| ServiceError::Config(e.to_string()))?;
    }
    let audit_file = config
        .audit_file
        .as_deref()
        .map(ChainFileWriter::open)
        .transpose()?;
    let event_file = config
        .event_log
        .as_deref()
        .map(|p| OpenOptions::new().create(true).append(true).open(p))
        .transpose()?;
    let (tx, mut rx) = mpsc::unbounded_channel::<Job>();
    let mut state = State {
        branch,
        dialog: Dialog::new(config.dialog.clone()),
        backend: config.backend.build(config.dialog.gateway.timeout_ms),
        auto_dispatch: config.auto_dispatch,
        conns: BTreeMap::new(),
        next_conn: 1,
        routes: BTreeMap::new(),
        out_seq: BTreeMap::new(),
        pending: BTreeMap::new(),
        events: Vec::new(),
        event_file,
        audit_file,
        persisted: 0,
        me: tx.downgrade(),
    };
    tokio::spawn(async move {
        while let Some(job) = rx.recv().await {
            job(&mut state);
        }
    });
    Ok(Handle { tx })
}

impl State {
    pub fn events_after(&self, after: usize) -> &[String] {
        self.events.get(after..).unwrap_or_default()
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    pub(crate) fn open_conn(&mut self, tx: mpsc::UnboundedSender<String>) -> u64 {
        let id = self.next_conn;
        self.next_conn += 1;
        let session = self.branch.reserve_session_id();
        self.conns.insert(
            id,
            Conn {
                tx,
                kind: None,
                session,
                customer: None,
                station: None,
                locale: "en".into(),
                inbound: SequenceTracker::default(),
            },
        );
        id
    }

    pub(crate) fn close_conn(&mut self, id: u64) {
        if let Some(conn) = self.conns.remove(&id) {
            if self.routes.get(&conn.session) == Some(&id) {
                self.routes.remove(&conn.session);
            }
        }
    }

    pub(crate) fn log_event(&mut self, line: String) {
        if let Some(f) = &mut self.event_file {
            if let Err(e) = writeln!(f, "{line}") {
                tracing::error!("event log write failed: {e}");
            }
        }
        self.events.push(line);
    }

    /// Sends `payload` on `session`, numbered by the server's counter for it.
    pub(crate) fn emit(&mut self, session: SessionId, payload: MessagePayload) {
        let seq = self.out_seq.entry(session).or_default().next_seq();
        let envelope = MessageEnvelope::new(session, seq, now_ms(), payload);
        let text = match encode(&envelope) {
            Ok(bytes) => String::from_utf8(bytes).expect("canonical JSON is UTF-8"),
            Err(e) => {
                tracing::error!("dropping unencodable envelope: {e}");
                return;
            }
        };
        if let Some(conn) = self.routes.get(&session).and_then(|c| self.conns.get(c)) {
            let _ = conn.tx.send(text.clone());
        }
        self.log_event(text);
    }

    /// Replies on a connection's own channel, whether or not a session is open.
    pub(crate) fn reply(&mut self, conn: u64, payload: MessagePayload) {
        let Some(session) = self.conns.get(&conn).map(|c| c.session) else {
            return;
        };
        let seq = self.out_seq.entry(session).or_default().next_seq();
        let envelope = MessageEnvelope::new(session, seq, now_ms(), payload);
        if let Ok(bytes) = encode(&envelope) {
            let text = String::from_utf8(bytes).expect("canonical JSON is UTF-8");
            let _ = self.conns[&conn].tx.send(text.clone());
            self.log_event(text);
        }
    }

    pub(crate) fn error_to(&mut self, conn: u64, code: &str, detail: impl Into<String>) {
        self.reply(
            conn,
            MessagePayload::ErrorMsg {
                code: code.to_owned(),
                detail: detail.into(),
            },
        );
    }

    /// Bookkeeping after every command.
    fn settle(&mut self) {
        loop {
            self.flush();
            if !self.auto_dispatch || !self.dispatch_idle() {
                break;
            }
        }
        self.persist_audit();
    }

    fn flush(&mut self) {
        for out in self.branch.drain_outbox() {
            if matches!(out.payload, MessagePayload::SessionClose { .. }) {
                self.pending.remove(&out.session_id);
            }
            self.emit(out.session_id, out.payload);
        }
        for t in self.branch.drain_transitions() {
            if !t.from.can_transition_to(t.to) {
                tracing::error!(
                    "illegal transition {:?} -> {:?} on {}",
                    t.from,
                    t.to,
                    t.session_id
                );
            }
        }
    }

    /// Serves the head of every idle line. Returns whether anyone moved.
    fn dispatch_idle(&mut self) -> bool {
        let now = now_ms();
        let idle: Vec<StationId> = self
            .branch
            .registry()
            .available(now)
            .map(|s| s.station_id)
            .filter(|&id| !self.branch.station_busy(id) && self.branch.queues().len(id) > 0)
            .collect();
        let mut moved = false;
        for station in idle {
            let Some(customer) = self.branch.next_in_queue(station, now) else {
                continue;
            };
            moved = true;
            let Some(session) = self.branch.open_session_for(customer).map(|s| s.session_id) else {
                continue;
            };
            if let Some((text, locale)) = self.pending.remove(&session) {
                self.spawn_turn(session, text, locale);
            }
        }
        moved
    }

    pub(crate) fn spawn_turn(&self, session: SessionId, text: String, locale: String) {
        let Some(tx) = self.me.upgrade() else {
            return;
        };
        let handle = Handle { tx };
        tokio::spawn(async move {
            if let Err(e) = handle.converse(session, text, locale).await {
                tracing::warn!("turn on {session} failed: {e}");
            }
        });
    }

    fn persist_audit(&mut self) {
        let Some(writer) = &mut self.audit_file else {
            return;
        };
        let entries = self.branch.audit().entries();
        for entry in &entries[self.persisted..] {
            if let Err(e) = writer.append(entry) {
                tracing::error!("audit file write failed: {e}");
                return;
            }
            self.persisted += 1;
        }
    }

    /// Current line position, resent to a queued customer who speaks.
    pub(crate) fn resend_position(&mut self, session: SessionId, customer: CustomerId) {
        if let Some((station, position)) = self.branch.queue_position(customer) {
            let mean = self.branch.config().service_time_mean_s;
            self.emit(
                session,
                MessagePayload::QueueUpdate {
                    position: position as u32,
                    station_id: station,
                    eta_s: (position as f64 * mean).round() as u64,
                },
            );
        }
    }

    pub(crate) fn status(&self) -> StatusSummary {
        let now = now_ms();
        let open = self
            .branch
            .sessions()
            .filter(|s| s.state != SessionState::Closed)
            .count();
        StatusSummary {
            stations: self.branch.registry().len(),
            available_stations: self.branch.registry().available(now).count(),
            open_sessions: open,
            queued: self.branch.queues().total(),
            flow: self.branch.flow_counts(),
            audit_len: self.branch.audit().len(),
            connections: self.conns.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use teller_core::audit::persist::{read_chain_file, verify_bytes};
    use teller_core::audit::ChainVerdict;

    #[tokio::test]
    async fn calls_run_in_order_on_one_state() {
        let handle = spawn(&ServiceConfig::default()).unwrap();
        let mut seen = Vec::new();
        for i in 0..5 {
            seen.push(handle.call(move |s| {
                s.log_event(format!("e{i}"));
                s.events_after(0).len()
            }));
        }
        let mut lens = Vec::new();
        for f in seen {
            lens.push(f.await.unwrap());
        }
        assert_eq!(lens, [1, 2, 3, 4, 5]);
        let tail = handle.call(|s| s.events_after(3).to_vec()).await.unwrap();
        assert_eq!(tail, ["e3", "e4"]);
        assert!(handle
            .call(|s| s.events_after(99).is_empty())
            .await
            .unwrap());
    }

    #[tokio::test]
    async fn settle_persists_new_audit_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.chain");
        let config = ServiceConfig {
            audit_file: Some(path.clone()),
            ..ServiceConfig::default()
        };
        let handle = spawn(&config).unwrap();
        handle
            .call(|s| {
                s.branch.set_consent(
                    CustomerId(1),
                    teller_core::profile::DataCategory::Visual,
                    false,
                );
                let sid = SessionId::from_u128(9);
                s.branch.authorize(sid, "vault", 1);
                s.branch.authorize(sid, "vault", 2);
            })
            .await
            .unwrap();
        let bytes = read_chain_file(&path).unwrap();
        assert_eq!(verify_bytes(&bytes), ChainVerdict::Ok);
        let n = teller_core::audit::persist::decode_chain(&bytes)
            .unwrap()
            .len();
        assert_eq!(n, 2);
        // Nothing new, nothing appended.
        handle.call(|_| ()).await.unwrap();
        assert_eq!(read_chain_file(&path).unwrap(), bytes);
    }

    #[tokio::test]
    async fn emit_routes_to_the_bound_connection_only() {
        let handle = spawn(&ServiceConfig::default()).unwrap();
        let (a_tx, mut a_rx) = mpsc::unbounded_channel();
        let (b_tx, mut b_rx) = mpsc::unbounded_channel();
        let session = handle
            .call(move |s| {
                let a = s.open_conn(a_tx);
                s.open_conn(b_tx);
                let session = s.conns[&a].session;
                s.routes.insert(session, a);
                s.emit(session, MessagePayload::SessionClose { reason: "x".into() });
                s.emit(session, MessagePayload::SessionClose { reason: "y".into() });
                session
            })
            .await
            .unwrap();
        let first = teller_core::protocol::decode(a_rx.recv().await.unwrap().as_bytes()).unwrap();
        let second = teller_core::protocol::decode(a_rx.recv().await.unwrap().as_bytes()).unwrap();
        assert_eq!((first.session_id, first.seq, second.seq), (session, 0, 1));
        assert!(b_rx.try_recv().is_err());
    }

    #[tokio::test]
    async fn closing_a_connection_drops_its_route() {
        let handle = spawn(&ServiceConfig::default()).unwrap();
        let (tx, _rx) = mpsc::unbounded_channel();
        let left = handle
            .call(move |s| {
                let c = s.open_conn(tx);
                let session = s.conns[&c].session;
                s.routes.insert(session, c);
                s.close_conn(c);
                (s.connections(), s.routes.len())
            })
            .await
            .unwrap();
        assert_eq!(left, (0, 0));
    }
}
