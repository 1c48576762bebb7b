//! Protocol endpoint: one envelope per text message, in both directions.
//!
//! Every connection gets a reserved session id up front; server messages
//! on that connection carry it. Avatars say hello with their customer id,
//! agents with their station id.

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State as AxumState;
use axum::response::Response;
use futures_util::{SinkExt, StreamExt};
use teller_core::branch::{ServiceNeed, SessionState};
use teller_core::inference::classify_intent;
use teller_core::protocol::{
    decode, encode, ClientKind, CustomerId, MessagePayload, SeqCheck, StationId,
};
use teller_core::ranging::ProximityZone;
use teller_core::station::Point;
use tokio::sync::mpsc;

use crate::actor::{now_ms, Handle, State};
use crate::AppState;

pub async fn upgrade(ws: WebSocketUpgrade, AxumState(app): AxumState<AppState>) -> Response {
    ws.on_upgrade(move |socket| run(socket, app.handle))
}

async fn run(socket: WebSocket, handle: Handle) {
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let Ok(conn) = handle.call(move |s| s.open_conn(tx)).await else {
        return;
    };
    let (mut sink, mut stream) = socket.split();
    loop {
        tokio::select! {
            out = rx.recv() => match out {
                Some(text) => {
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let text = text.as_str().to_owned();
                    if handle.call(move |s| s.inbound(conn, text.as_bytes())).await.is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let _ = handle
                        .call(move |s| s.error_to(conn, "malformed", "envelopes are text messages"))
                        .await;
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    let _ = handle.call(move |s| s.close_conn(conn)).await;
}

impl State {
    /// Handles one client message. Malformed input is answered with an
    /// ErrorMsg and dropped; the connection stays up.
    pub(crate) fn inbound(&mut self, conn: u64, bytes: &[u8]) {
        let envelope = match decode(bytes) {
            Ok(e) => e,
            Err(e) => return self.error_to(conn, "malformed", e.to_string()),
        };
        let Some(c) = self.conns.get_mut(&conn) else {
            return;
        };
        let is_hello = matches!(envelope.payload, MessagePayload::ClientHello { .. });
        let session_ok =
            envelope.session_id == c.session || (is_hello && envelope.session_id.is_nil());
        if !session_ok {
            let detail = format!(
                "expected session {}, got {}",
                c.session, envelope.session_id
            );
            return self.error_to(conn, "wrong_session", detail);
        }
        match c.inbound.observe(envelope.seq) {
            SeqCheck::Accept => {}
            SeqCheck::Duplicate => return,
            SeqCheck::Gap {
                missing_from,
                missing_to,
            } => {
                self.error_to(
                    conn,
                    "sequence_gap",
                    format!("missing {missing_from}..={missing_to}"),
                );
            }
        }
        if let Ok(canonical) = encode(&envelope) {
            self.log_event(String::from_utf8(canonical).expect("canonical JSON is UTF-8"));
        }
        let kind = self.conns[&conn].kind;
        match (kind, envelope.payload) {
            (
                _,
                MessagePayload::ClientHello {
                    client_kind,
                    client_id,
                    locale,
                },
            ) => self.hello(conn, client_kind, &client_id, locale),
            (None, _) => self.error_to(conn, "hello_required", "send ClientHello first"),
            (Some(ClientKind::Avatar), payload) => self.avatar_message(conn, payload),
            (Some(ClientKind::Agent), payload) => self.agent_message(conn, payload),
        }
    }

    fn hello(&mut self, conn: u64, kind: ClientKind, client_id: &str, locale: String) {
        let now = now_ms();
        match kind {
            ClientKind::Avatar => {
                let Ok(customer) = client_id.parse::<u64>().map(CustomerId) else {
                    return self.error_to(
                        conn,
                        "bad_client_id",
                        "avatar client_id must be a customer id",
                    );
                };
                // A reconnecting customer picks up their open session.
                let resumed = self
                    .branch
                    .open_session_for(customer)
                    .map(|s| (s.session_id, s.state.is_authenticated(), s.resources()));
                let c = self.conns.get_mut(&conn).expect("checked");
                c.kind = Some(kind);
                c.customer = Some(customer);
                c.locale = locale;
                let reply = match resumed {
                    Some((session, authed, entitlements)) => {
                        c.session = session;
                        self.routes.insert(session, conn);
                        MessagePayload::AuthResult {
                            ok: authed,
                            entitlements,
                            reason: Some("resumed".into()),
                        }
                    }
                    None => MessagePayload::AuthResult {
                        ok: false,
                        entitlements: Default::default(),
                        reason: Some("awaiting authentication".into()),
                    },
                };
                self.reply(conn, reply);
            }
            ClientKind::Agent => {
                let Ok(station) = client_id.parse::<u32>().map(StationId) else {
                    return self.error_to(
                        conn,
                        "bad_client_id",
                        "agent client_id must be a station id",
                    );
                };
                if self.branch.heartbeat(station, now).is_err() {
                    return self.error_to(
                        conn,
                        "unknown_station",
                        format!("station {station} is not registered"),
                    );
                }
                let c = self.conns.get_mut(&conn).expect("checked");
                c.kind = Some(kind);
                c.station = Some(station);
                c.locale = locale;
                self.reply(
                    conn,
                    MessagePayload::AuthResult {
                        ok: true,
                        entitlements: Default::default(),
                        reason: Some("station link".into()),
                    },
                );
            }
        }
    }

    fn avatar_message(&mut self, conn: u64, payload: MessagePayload) {
        let now = now_ms();
        let customer = self.conns[&conn]
            .customer
            .expect("avatar hello sets customer");
        let reserved = self.conns[&conn].session;
        let open = self
            .branch
            .open_session_for(customer)
            .map(|s| (s.session_id, s.state, s.bound_station));
        match payload {
            MessagePayload::ProximityUpdate {
                station_id,
                zone,
                distance_m,
            } => {
                match open {
                    None if zone >= ProximityZone::Near => {
                        match self.branch.open_preconnect_as(
                            customer,
                            station_id,
                            now,
                            Some(reserved),
                        ) {
                            Ok(session) => {
                                self.conns.get_mut(&conn).expect("checked").session = session;
                                self.routes.insert(session, conn);
                            }
                            Err(e) => return self.error_to(conn, "unknown_station", e.to_string()),
                        }
                    }
                    // Stepping up to a different station moves the customer.
                    Some((session, SessionState::Queued | SessionState::InService, bound))
                        if zone == ProximityZone::Immediate && bound != Some(station_id) =>
                    {
                        if let Err(e) = self.branch.rebind_session(session, station_id, now) {
                            return self.error_to(conn, "rebind_failed", e.to_string());
                        }
                    }
                    _ => {}
                }
                // Server-confirmed zone.
                self.reply(
                    conn,
                    MessagePayload::ProximityUpdate {
                        station_id,
                        zone,
                        distance_m,
                    },
                );
            }
            MessagePayload::AuthRequest {
                customer_id,
                credential,
            } => {
                if customer_id != customer {
                    return self.error_to(
                        conn,
                        "customer_mismatch",
                        "AuthRequest names another customer",
                    );
                }
                let Some((session, ..)) = open else {
                    return self.error_to(conn, "not_preconnected", "approach a station first");
                };
                let reply = match self.branch.authenticate(session, &credential, now) {
                    Ok(ents) => {
                        let locale = self.conns[&conn].locale.clone();
                        self.branch.ensure_profile(customer, "", &locale).locale = locale.clone();
                        MessagePayload::AuthResult {
                            ok: true,
                            entitlements: ents.into_iter().map(|e| e.resource).collect(),
                            reason: None,
                        }
                    }
                    Err(e) => MessagePayload::AuthResult {
                        ok: false,
                        entitlements: Default::default(),
                        reason: Some(e.to_string()),
                    },
                };
                self.emit(session, reply);
            }
            MessagePayload::UtteranceIn { text, locale } => {
                let Some((session, state, bound)) = open else {
                    return self.error_to(conn, "not_preconnected", "approach a station first");
                };
                match state {
                    SessionState::Authenticated => {
                        let need = classify_intent(&text)
                            .need()
                            .unwrap_or(ServiceNeed::GeneralInquiry);
                        let here = bound
                            .and_then(|b| self.branch.registry().get(b))
                            .map_or(Point::new(0.0, 0.0), |s| s.position);
                        match self.branch.assign_station(
                            customer,
                            need,
                            |s| here.distance_to(s.position),
                            now,
                        ) {
                            Ok(_) => {
                                self.pending.insert(session, (text, locale));
                            }
                            Err(e) => self.error_to(conn, "assignment_failed", e.to_string()),
                        }
                    }
                    SessionState::Queued => {
                        self.pending.insert(session, (text, locale));
                        self.resend_position(session, customer);
                    }
                    SessionState::InService => self.spawn_turn(session, text, locale),
                    other => {
                        self.error_to(conn, "wrong_state", format!("cannot talk while {other:?}"))
                    }
                }
            }
            MessagePayload::SessionClose { reason } => {
                if let Some((session, ..)) = open {
                    if let Err(e) = self.branch.close_session(session, &reason, now) {
                        self.error_to(conn, "wrong_state", e.to_string());
                    }
                }
            }
            other => self.error_to(
                conn,
                "unexpected_payload",
                format!("{} is not sent by avatars", other.tag()),
            ),
        }
    }

    fn agent_message(&mut self, conn: u64, payload: MessagePayload) {
        let now = now_ms();
        let station = self.conns[&conn].station.expect("agent hello sets station");
        match payload {
            MessagePayload::ObservationReport(report) => {
                if report.station_id != station {
                    return self.error_to(conn, "wrong_station", "report names another station");
                }
                let _ = self.branch.heartbeat(station, now);
                if let Err(e) = self.branch.record_observation(report, now) {
                    self.error_to(conn, "unknown_station", e.to_string());
                }
            }
            MessagePayload::FramePush {
                station_id, frame, ..
            } => {
                if station_id != station {
                    return self.error_to(conn, "wrong_station", "frame names another station");
                }
                if !frame.digest_matches() {
                    return self.error_to(conn, "frame_digest", "digest does not match png_bytes");
                }
                let _ = self.branch.heartbeat(station, now);
                if let Err(e) = self.branch.record_frame(station, frame) {
                    self.error_to(conn, "unknown_station", e.to_string());
                }
            }
            other => self.error_to(
                conn,
                "unexpected_payload",
                format!("{} is not sent by agents", other.tag()),
            ),
        }
    }
}
