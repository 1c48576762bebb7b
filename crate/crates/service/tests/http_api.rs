mod common;

use common::{start, S1, S2};
use teller_core::audit::persist::{read_chain_file, verify_bytes};
use teller_core::audit::{AuditKind, ChainVerdict};
use teller_core::branch::{AgentRole, Decision, ServiceNeed, SessionState};
use teller_core::inference::{BackendKind, InferenceRequest};
use teller_core::profile::DataCategory;
use teller_core::protocol::{CustomerId, SessionId};
use teller_core::sim::SimConfig;
use teller_core::station::Point;

const C1: CustomerId = CustomerId(1001);
const C2: CustomerId = CustomerId(1002);

#[tokio::test]
async fn health_status_and_roles() {
    let svc = start(true).await;
    assert!(svc.client.health().await.unwrap());
    let status = svc.client.status().await.unwrap();
    assert_eq!(status.stations, 2);
    assert_eq!(status.available_stations, 2);
    assert_eq!(status.open_sessions, 0);
    assert_eq!(svc.client.roles().await.unwrap(), AgentRole::ALL.to_vec());
    assert_eq!(svc.client.stations().await.unwrap().len(), 2);
}

#[tokio::test]
async fn registration_conflicts_and_validation() {
    let svc = start(true).await;
    let dup = svc
        .client
        .register_station(&common::station(1, 0.0, AgentRole::SalesAssociate))
        .await
        .unwrap_err();
    assert_eq!(dup.status(), Some(409));
    assert_eq!(dup.code(), Some("registration_rejected"));
    // ensure_station treats the conflict as success.
    svc.client
        .ensure_station(&common::station(1, 0.0, AgentRole::CustomerService))
        .await
        .unwrap();

    let mut bad = common::station(9, 3.0, AgentRole::SalesAssociate);
    bad.fov_range_m = -1.0;
    let err = svc.client.register_station(&bad).await.unwrap_err();
    assert_eq!(err.code(), Some("invalid_station"));

    let third = common::station(3, 12.0, AgentRole::SalesAssociate);
    svc.client.register_station(&third).await.unwrap();
    assert_eq!(svc.client.stations().await.unwrap().len(), 3);
    svc.client.heartbeat(third.station_id).await.unwrap();
    let err = svc
        .client
        .heartbeat(teller_core::protocol::StationId(77))
        .await
        .unwrap_err();
    assert_eq!(err.code(), Some("unknown_station"));
}

#[tokio::test]
async fn preconnect_authenticate_assign_and_serve() {
    let svc = start(false).await;
    let c = &svc.client;
    let s = c.open_session(C1, S1).await.unwrap();
    assert_eq!(s.state, SessionState::PreConnected);
    // Opening again returns the same session.
    assert_eq!(
        c.open_session(C1, S1).await.unwrap().session_id,
        s.session_id
    );

    let err = c.authenticate(s.session_id, "wrong").await.unwrap_err();
    assert_eq!((err.status(), err.code()), (Some(401), Some("auth_failed")));
    let ents = c.authenticate(s.session_id, "1234").await.unwrap();
    assert!(ents.entitlements.contains("faq.read"));
    assert!(!ents.entitlements.contains("accounts.balance"));

    // Only the advisor desk handles transactions.
    let a = c
        .assign(
            s.session_id,
            ServiceNeed::TransactionRequest,
            Some(Point::new(0.0, 1.0)),
        )
        .await
        .unwrap();
    assert_eq!(a.station_id, S2);
    assert!(!a.handoff);
    assert_eq!(
        c.session(s.session_id).await.unwrap().state,
        SessionState::Queued
    );
    assert_eq!(c.status().await.unwrap().queued, 1);

    assert_eq!(c.next_in_queue(S1).await.unwrap(), None);
    assert_eq!(c.next_in_queue(S2).await.unwrap(), Some(C1));
    assert_eq!(
        c.session(s.session_id).await.unwrap().state,
        SessionState::InService
    );
    // Busy station serves nobody else.
    assert_eq!(c.next_in_queue(S2).await.unwrap(), None);

    c.close(s.session_id, Some("done")).await.unwrap();
    assert_eq!(
        c.session(s.session_id).await.unwrap().state,
        SessionState::Closed
    );
    let flow = c.status().await.unwrap().flow;
    assert_eq!((flow.arrivals, flow.served), (1, 1));
}

#[tokio::test]
async fn auto_dispatch_serves_idle_station() {
    let svc = start(true).await;
    let c = &svc.client;
    let s = c.open_session(C1, S1).await.unwrap();
    c.authenticate(s.session_id, "1234").await.unwrap();
    let a = c
        .assign(s.session_id, ServiceNeed::GeneralInquiry, None)
        .await
        .unwrap();
    assert_eq!(a.station_id, S1);
    assert_eq!(
        c.session(s.session_id).await.unwrap().state,
        SessionState::InService
    );
}

#[tokio::test]
async fn utterance_transcript_and_audit() {
    let svc = start(true).await;
    let c = &svc.client;
    let s = c.open_session(C1, S1).await.unwrap();
    let err = c.utterance(s.session_id, "hello", "en").await.unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(409), Some("not_in_service"))
    );

    c.authenticate(s.session_id, "1234").await.unwrap();
    c.assign(s.session_id, ServiceNeed::GeneralInquiry, None)
        .await
        .unwrap();
    let turn = c
        .utterance(s.session_id, "what are your hours", "en")
        .await
        .unwrap();
    assert!(!turn.text.is_empty());
    assert_eq!(turn.role, AgentRole::CustomerService);

    let lines = c.transcript(s.session_id).await.unwrap();
    let kinds: Vec<AuditKind> = lines.iter().map(|l| l.kind).collect();
    assert_eq!(kinds, [AuditKind::Utterance, AuditKind::Reply]);
    assert!(lines.iter().all(|l| l.body.is_some()));
    assert!(lines[0]
        .body
        .as_ref()
        .unwrap()
        .to_string()
        .contains("what are your hours"));

    let entries = c.session_audit(s.session_id).await.unwrap();
    assert!(entries.iter().any(|e| e.kind == AuditKind::AuthAttempt));
    assert!(entries.iter().all(|e| e.session_id == s.session_id));
}

#[tokio::test]
async fn conversational_opt_out_keeps_bodies_out_of_the_store() {
    let svc = start(true).await;
    let c = &svc.client;
    let s = c.open_session(C1, S1).await.unwrap();
    c.authenticate(s.session_id, "1234").await.unwrap();
    assert!(!c
        .set_consent(C1, DataCategory::Conversational, false)
        .await
        .unwrap());
    c.assign(s.session_id, ServiceNeed::GeneralInquiry, None)
        .await
        .unwrap();
    c.utterance(s.session_id, "hello there", "en")
        .await
        .unwrap();
    let lines = c.transcript(s.session_id).await.unwrap();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l.body.is_none()));
}

#[tokio::test]
async fn role_switch_and_authorization() {
    let svc = start(true).await;
    let c = &svc.client;
    let s = c.open_session(C1, S1).await.unwrap();
    c.authenticate(s.session_id, "1234").await.unwrap();
    assert!(matches!(
        c.authorize(s.session_id, "accounts.balance").await.unwrap(),
        Decision::Deny(_)
    ));
    // Roles change only while someone is being served.
    let err = c
        .switch_role(s.session_id, "FinancialAdvisor", None)
        .await
        .unwrap_err();
    assert_eq!(err.code(), Some("wrong_state"));
    c.assign(s.session_id, ServiceNeed::GeneralInquiry, None)
        .await
        .unwrap();
    let err = c
        .switch_role(s.session_id, "Janitor", None)
        .await
        .unwrap_err();
    assert_eq!(err.code(), Some("unknown_role"));

    let after = c
        .switch_role(s.session_id, "FinancialAdvisor", Some("needs advice"))
        .await
        .unwrap();
    assert_eq!(after.active_role, Some(AgentRole::FinancialAdvisor));
    assert_eq!(
        c.authorize(s.session_id, "accounts.balance").await.unwrap(),
        Decision::Allow
    );
    assert!(matches!(
        c.authorize(s.session_id, "vault.open").await.unwrap(),
        Decision::Deny(_)
    ));
    let kinds: Vec<AuditKind> = c
        .session_audit(s.session_id)
        .await
        .unwrap()
        .iter()
        .map(|e| e.kind)
        .collect();
    assert!(kinds.contains(&AuditKind::RoleSwitch));
    // Denials are audited, grants are not.
    assert_eq!(
        kinds
            .iter()
            .filter(|k| **k == AuditKind::Authorization)
            .count(),
        2
    );
}

#[tokio::test]
async fn rebind_moves_queued_customer_to_back_of_line() {
    let svc = start(false).await;
    let c = &svc.client;
    let mut ids = Vec::new();
    for (cust, pin) in [(C1, "1234"), (C2, "5678")] {
        let s = c.open_session(cust, S1).await.unwrap();
        c.authenticate(s.session_id, pin).await.unwrap();
        ids.push(s.session_id);
    }
    c.assign(ids[0], ServiceNeed::TransactionRequest, None)
        .await
        .unwrap();
    c.assign(ids[1], ServiceNeed::GeneralInquiry, None)
        .await
        .unwrap();
    let moved = c.rebind(ids[1], S2).await.unwrap();
    assert_eq!(moved.station_id, S2);
    assert_eq!(moved.position, 2);
    let s = c.session(ids[1]).await.unwrap();
    assert_eq!((s.state, s.bound_station), (SessionState::Queued, Some(S2)));

    let err = c
        .rebind(ids[1], teller_core::protocol::StationId(42))
        .await
        .unwrap_err();
    assert_eq!(err.code(), Some("unknown_station"));
}

#[tokio::test]
async fn consent_roundtrip_and_forget() {
    let svc = start(true).await;
    let c = &svc.client;
    let err = c.profile(C2).await.unwrap_err();
    assert_eq!(err.status(), Some(404));
    assert!(!c
        .set_consent(C2, DataCategory::Visual, false)
        .await
        .unwrap());
    let profile = c.profile(C2).await.unwrap();
    assert!(!profile.consents_to(DataCategory::Visual));
    assert!(c.set_consent(C2, DataCategory::Visual, true).await.unwrap());
    assert!(c
        .profile(C2)
        .await
        .unwrap()
        .consents_to(DataCategory::Visual));
    assert_eq!(c.forget(C2, DataCategory::Conversational).await.unwrap(), 0);
}

#[tokio::test]
async fn bad_and_unknown_sessions() {
    let svc = start(true).await;
    let err = svc
        .client
        .session(SessionId::from_u128(12345))
        .await
        .unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(404), Some("unknown_session"))
    );
    let resp = reqwest_get(&format!(
        "http://{}/v1/sessions/not-a-session",
        svc.running.addr
    ))
    .await;
    assert_eq!(resp, 400);
}

async fn reqwest_get(url: &str) -> u16 {
    // The typed client only builds well-formed ids, so go around it.
    let (host, path) = url.trim_start_matches("http://").split_once('/').unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(host).await.unwrap();
    s.write_all(
        format!("GET /{path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n").as_bytes(),
    )
    .await
    .unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).await.unwrap();
    buf.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[tokio::test]
async fn audit_file_mirrors_the_chain() {
    let svc = start(true).await;
    let c = &svc.client;
    let s = c.open_session(C1, S1).await.unwrap();
    c.authenticate(s.session_id, "1234").await.unwrap();
    c.assign(s.session_id, ServiceNeed::GeneralInquiry, None)
        .await
        .unwrap();
    c.utterance(s.session_id, "help", "en").await.unwrap();
    let summary = c.verify_audit().await.unwrap();
    assert_eq!(summary.verdict, ChainVerdict::Ok);
    assert!(summary.len >= 3);
    let bytes = read_chain_file(&svc.audit_path()).unwrap();
    assert_eq!(verify_bytes(&bytes), ChainVerdict::Ok);
    assert_eq!(
        teller_core::audit::persist::decode_chain(&bytes)
            .unwrap()
            .len(),
        summary.len
    );
}

#[tokio::test]
async fn infer_endpoint_uses_the_mock_backend() {
    let svc = start(true).await;
    let req = InferenceRequest {
        request_id: "r1".into(),
        prompt_text: "Customer: I want to transfer money".into(),
        image: None,
    };
    let resp = svc.client.infer(&req).await.unwrap();
    assert_eq!(resp.backend, BackendKind::Mock);
    assert!(!resp.text.is_empty());
}

#[tokio::test]
async fn sim_endpoints_match_the_library() {
    let svc = start(true).await;
    let cfg = SimConfig {
        seed: 7,
        duration_s: 300.0,
        ..SimConfig::default()
    };
    let remote = svc.client.sim_run(&cfg).await.unwrap();
    assert_eq!(remote, teller_core::sim::run(&cfg).unwrap());
    let trace = svc.client.sim_trace(&cfg).await.unwrap();
    assert_eq!(trace.report, remote);
    let text: String = trace.log.iter().map(|l| format!("{l}\n")).collect();
    assert_eq!(
        teller_core::sim::log_digest(&text),
        remote.determinism_digest
    );
    let savings = svc.client.sim_compare(&cfg).await.unwrap();
    assert_eq!(savings, teller_core::sim::compare_baseline(&cfg).unwrap());

    let scaling = svc.client.sim_scaling(&cfg).await.unwrap();
    assert_eq!(
        scaling,
        teller_core::sim::throughput_by_station_count(&cfg).unwrap()
    );

    let bad = SimConfig {
        duration_s: 0.0,
        ..SimConfig::default()
    };
    let err = svc.client.sim_run(&bad).await.unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(400), Some("invalid_config"))
    );
}
