//! One conversational turn, split around the (possibly slow) model call.
//!
//! [`Dialog::prepare_turn`] translates the utterance, audits it, gathers the
//! context the stateless model needs and picks at most one frame.
//! [`Dialog::complete_turn`] applies intent-driven role switching, validates
//! the reply, audits it and queues the `AgentReply` for the customer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{export_transcript, AuditKind};
use crate::branch::{AgentRole, Branch, BranchError, SessionState};
use crate::inference::{
    self, sentiment, translate, GatewayConfig, IdentityTranslator, InferenceBackend,
    InferenceError, InferenceRequest, InferenceResponse, Intent, PromptTemplate, SessionSnapshot,
    Speaker, Translator, Turn, Validation, ValidationPolicy,
};
use crate::profile::DataCategory;
use crate::protocol::{MessagePayload, SessionId};
use crate::Millis;

/// Language the model is prompted in.
pub const PIVOT_LOCALE: &str = "en";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialogConfig {
    pub template: PromptTemplate,
    pub gateway: GatewayConfig,
    pub fallback_reply: String,
}

impl Default for DialogConfig {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default(),
            gateway: GatewayConfig::default(),
            fallback_reply:
                "I'm sorry, I can't answer that reliably. Let me get a colleague to help."
                    .to_owned(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DialogError {
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error("session {0} is {1:?}, not in service")]
    NotInService(SessionId, SessionState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTurn {
    pub session_id: SessionId,
    pub request: InferenceRequest,
    pub customer_locale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOutcome {
    /// Reply as delivered, in the customer's locale.
    pub text: String,
    pub intent: Intent,
    pub role: AgentRole,
    pub validation: Validation,
    pub latency_ms: u64,
    pub role_switched: bool,
}

#[derive(Clone)]
pub struct Dialog {
    pub config: DialogConfig,
    translator: Arc<dyn Translator>,
}

impl Default for Dialog {
    fn default() -> Self {
        Self::new(DialogConfig::default())
    }
}

impl Dialog {
    pub fn new(config: DialogConfig) -> Self {
        Self {
            config,
            translator: Arc::new(IdentityTranslator),
        }
    }

    pub fn with_translator(mut self, translator: Arc<dyn Translator>) -> Self {
        self.translator = translator;
        self
    }

    pub fn prepare_turn(
        &self,
        branch: &mut Branch,
        session_id: SessionId,
        utterance: &str,
        locale: &str,
        at: Millis,
    ) -> Result<PreparedTurn, DialogError> {
        let session = branch
            .session(session_id)
            .ok_or(BranchError::UnknownSession(session_id))?;
        let (Some(role), SessionState::InService) = (session.active_role, session.state) else {
            return Err(DialogError::NotInService(session_id, session.state));
        };
        let customer = session.customer_id;
        let station = session.bound_station;
        let snapshot = snapshot(branch, session_id);

        let (text, note) = translate(utterance, locale, PIVOT_LOCALE, self.translator.as_ref());
        let mood = sentiment(&text);
        let mut payload = json!({"text": text, "locale": locale, "sentiment": mood});
        if let Some(note) = note {
            payload["translation_note"] = Value::String(note);
        }
        branch.record(AuditKind::Utterance, &payload, session_id, at);
        // Refusals are audited by the branch; the turn goes on either way.
        let _ = branch.remember(
            customer,
            DataCategory::Sentiment,
            "sentiment",
            &mood.to_string(),
            at,
        );

        let image = station.and_then(|st| branch.take_frame(st)).and_then(|frame| {
            branch
                .remember(customer, DataCategory::Visual, "last_frame", &frame.digest, at)
                .ok()?;
            branch.record(
                AuditKind::FrameRef,
                &json!({"station_id": station, "digest": frame.digest, "selection": "bound_station_latest"}),
                session_id,
                at,
            );
            Some(frame)
        });

        let customer_locale = branch
            .profile(customer)
            .map_or_else(|| locale.to_owned(), |p| p.locale.clone());
        let prompt_text = inference::build_prompt(&self.config.template, &snapshot, &text, role);
        Ok(PreparedTurn {
            session_id,
            request: InferenceRequest {
                request_id: format!("{session_id}-{}", branch.audit().len()),
                prompt_text,
                image,
            },
            customer_locale,
        })
    }

    pub fn complete_turn(
        &self,
        branch: &mut Branch,
        turn: PreparedTurn,
        result: Result<InferenceResponse, InferenceError>,
        at: Millis,
    ) -> Result<TurnOutcome, DialogError> {
        let session_id = turn.session_id;
        let session = branch
            .session(session_id)
            .ok_or(BranchError::UnknownSession(session_id))?;
        let (Some(mut role), SessionState::InService) = (session.active_role, session.state) else {
            return Err(DialogError::NotInService(session_id, session.state));
        };
        let customer = session.customer_id;

        let response = match result {
            Ok(r) => r,
            Err(e) => {
                branch.record(
                    AuditKind::ValidationFailure,
                    &json!({"request_id": turn.request.request_id, "error": e.to_string()}),
                    session_id,
                    at,
                );
                return self.deliver(
                    branch,
                    session_id,
                    &turn,
                    self.config.fallback_reply.clone(),
                    Intent::Unknown,
                    role,
                    Validation::Valid,
                    0,
                    false,
                    at,
                );
            }
        };

        let mut role_switched = false;
        if let Some(need) = response.intent.need().filter(|n| !role.can_serve(*n)) {
            if let Some(capable) = AgentRole::ALL.into_iter().find(|r| r.can_serve(need)) {
                branch.switch_role(session_id, capable, &format!("intent {need:?}"), at)?;
                role = capable;
                role_switched = true;
            }
        }

        let facts: Vec<String> = branch
            .profile(customer)
            .map(|p| p.facts.iter().map(|f| f.value.clone()).collect())
            .unwrap_or_default();
        let fact_refs: Vec<&str> = facts.iter().map(String::as_str).collect();
        let policy = ValidationPolicy::for_role(role, self.config.gateway.max_response_chars);
        let validation = inference::validate(&response, &policy, &fact_refs);
        let text = match &validation {
            Validation::Valid => response.text.clone(),
            Validation::HallucinationSuspected(why) => {
                branch.record(
                    AuditKind::ValidationFailure,
                    &json!({"request_id": turn.request.request_id, "suspicion": why, "text": response.text}),
                    session_id,
                    at,
                );
                self.config.fallback_reply.clone()
            }
        };
        self.deliver(
            branch,
            session_id,
            &turn,
            text,
            response.intent,
            role,
            validation,
            response.latency_ms,
            role_switched,
            at,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn deliver(
        &self,
        branch: &mut Branch,
        session_id: SessionId,
        turn: &PreparedTurn,
        text: String,
        intent: Intent,
        role: AgentRole,
        validation: Validation,
        latency_ms: u64,
        role_switched: bool,
        at: Millis,
    ) -> Result<TurnOutcome, DialogError> {
        branch.record(
            AuditKind::Reply,
            &json!({"text": text, "intent": intent, "role": role}),
            session_id,
            at,
        );
        let (localized, note) = translate(
            &text,
            PIVOT_LOCALE,
            &turn.customer_locale,
            self.translator.as_ref(),
        );
        if let Some(note) = note {
            branch.record(
                AuditKind::ValidationFailure,
                &json!({"request_id": turn.request.request_id, "translation_note": note}),
                session_id,
                at,
            );
        }
        branch.send(
            session_id,
            MessagePayload::AgentReply {
                text: localized.clone(),
                intent,
                role,
            },
        )?;
        Ok(TurnOutcome {
            text: localized,
            intent,
            role,
            validation,
            latency_ms,
            role_switched,
        })
    }

    /// Prepare, infer and complete in one call.
    pub fn converse(
        &self,
        branch: &mut Branch,
        backend: &dyn InferenceBackend,
        session_id: SessionId,
        utterance: &str,
        locale: &str,
        at: Millis,
    ) -> Result<TurnOutcome, DialogError> {
        let turn = self.prepare_turn(branch, session_id, utterance, locale, at)?;
        let result = inference::infer(&turn.request, backend, &self.config.gateway);
        self.complete_turn(branch, turn, result, at)
    }
}

/// Context for the prompt, limited to what the session may see: identity
/// facts need `profile.name`, transactional facts need `accounts.balance`.
/// Transcript turns whose bodies were not retained are left out.
fn snapshot(branch: &Branch, session_id: SessionId) -> SessionSnapshot {
    let Some(session) = branch.session(session_id) else {
        return SessionSnapshot::default();
    };
    let profile = branch.profile(session.customer_id);
    let visible = |c: DataCategory| match c {
        DataCategory::Identity => session.entitled_to("profile.name"),
        DataCategory::Transactional => session.entitled_to("accounts.balance"),
        _ => false,
    };
    let facts = profile
        .map(|p| {
            p.facts
                .iter()
                .filter(|f| visible(f.category))
                .map(|f| (f.key.clone(), f.value.clone()))
                .collect()
        })
        .unwrap_or_default();
    let transcript = export_transcript(branch.audit().entries(), session_id)
        .into_iter()
        .filter_map(|e| {
            let body = branch.audit().payload(&e.payload_digest)?;
            let value: Value = serde_json::from_slice(body).ok()?;
            Some(Turn {
                speaker: if e.kind == AuditKind::Utterance {
                    Speaker::Customer
                } else {
                    Speaker::Agent
                },
                text: value.get("text")?.as_str()?.to_owned(),
            })
        })
        .collect();
    SessionSnapshot {
        display_name: profile.map(|p| p.display_name.clone()).unwrap_or_default(),
        facts,
        transcript,
    }
}
