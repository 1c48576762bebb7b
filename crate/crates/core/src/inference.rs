//! Stateless vision-language inference: request/response types, a
//! deterministic mock backend, an HTTP remote backend, prompt rendering,
//! translation hooks, response validation and a lexicon sentiment stub.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use std::time::Duration;

use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branch::{AgentRole, ServiceNeed};
use crate::station::EncodedFrame;

pub const DEFAULT_MAX_RESPONSE_CHARS: usize = 2000;
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_TRANSCRIPT_WINDOW: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intent {
    GeneralInquiry,
    TransactionRequest,
    InformationLookup,
    Unknown,
}

impl Intent {
    pub fn need(self) -> Option<ServiceNeed> {
        match self {
            Intent::GeneralInquiry => Some(ServiceNeed::GeneralInquiry),
            Intent::TransactionRequest => Some(ServiceNeed::TransactionRequest),
            Intent::InformationLookup => Some(ServiceNeed::InformationLookup),
            Intent::Unknown => None,
        }
    }
}

impl From<ServiceNeed> for Intent {
    fn from(need: ServiceNeed) -> Self {
        match need {
            ServiceNeed::GeneralInquiry => Intent::GeneralInquiry,
            ServiceNeed::TransactionRequest => Intent::TransactionRequest,
            ServiceNeed::InformationLookup => Intent::InformationLookup,
        }
    }
}

const KEYWORDS: &[(&str, Intent)] = &[
    ("balance", Intent::InformationLookup),
    ("statement", Intent::InformationLookup),
    ("history", Intent::InformationLookup),
    ("rate", Intent::InformationLookup),
    ("transfer", Intent::TransactionRequest),
    ("deposit", Intent::TransactionRequest),
    ("withdraw", Intent::TransactionRequest),
    ("payment", Intent::TransactionRequest),
    ("hello", Intent::GeneralInquiry),
    ("help", Intent::GeneralInquiry),
    ("hours", Intent::GeneralInquiry),
    ("question", Intent::GeneralInquiry),
];

/// Keyword intent table; the first listed keyword found wins.
pub fn classify_intent(text: &str) -> Intent {
    let lower = text.to_lowercase();
    KEYWORDS
        .iter()
        .find(|(kw, _)| lower.contains(kw))
        .map_or(Intent::Unknown, |(_, intent)| *intent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub request_id: String,
    pub prompt_text: String,
    /// Single-image model: at most one frame.
    pub image: Option<EncodedFrame>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub text: String,
    pub intent: Intent,
    pub backend: BackendKind,
    pub latency_ms: u64,
}

/// What a backend returns before the gateway applies its checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub intent: Option<Intent>,
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out")]
    Timeout,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("inference timed out")]
    Timeout,
    #[error("response of {len} chars exceeds {max}")]
    OversizeResponse { len: usize, max: usize },
}

pub trait InferenceBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, request: &InferenceRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub max_response_chars: usize,
    pub timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            max_response_chars: DEFAULT_MAX_RESPONSE_CHARS,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

/// Runs one request. An unavailable backend is retried once; nothing else is.
pub fn infer(
    request: &InferenceRequest,
    backend: &dyn InferenceBackend,
    config: &GatewayConfig,
) -> Result<InferenceResponse, InferenceError> {
    if request.prompt_text.trim().is_empty() {
        return Err(InferenceError::EmptyPrompt);
    }
    let started = std::time::Instant::now();
    let completion = match backend.complete(request) {
        Err(BackendError::Unavailable(_)) => backend.complete(request),
        other => other,
    }
    .map_err(|e| match e {
        BackendError::Unavailable(why) => InferenceError::BackendUnavailable(why),
        BackendError::Timeout => InferenceError::Timeout,
    })?;
    let latency_ms = completion
        .latency_ms
        .unwrap_or_else(|| started.elapsed().as_millis() as u64);
    if latency_ms > config.timeout_ms {
        return Err(InferenceError::Timeout);
    }
    let len = completion.text.chars().count();
    if len > config.max_response_chars {
        return Err(InferenceError::OversizeResponse {
            len,
            max: config.max_response_chars,
        });
    }
    let intent = completion
        .intent
        .unwrap_or_else(|| classify_intent(last_customer_line(&request.prompt_text)));
    Ok(InferenceResponse {
        text: completion.text,
        intent,
        backend: backend.kind(),
        latency_ms,
    })
}

fn last_customer_line(prompt: &str) -> &str {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Customer:"))
        .map_or(prompt, str::trim)
}

/// Deterministic stand-in for the model: a pure function of the request.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

impl MockBackend {
    /// Simulated latency: 40 ms plus 1 ms per 20 prompt bytes.
    pub fn latency_for(request: &InferenceRequest) -> u64 {
        40 + request.prompt_text.len() as u64 / 20
    }
}

impl InferenceBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(&self, request: &InferenceRequest) -> Result<Completion, BackendError> {
        let intent = classify_intent(last_customer_line(&request.prompt_text));
        let facts = prompt_facts(&request.prompt_text);
        let text = match intent {
            Intent::InformationLookup => match facts.get("balance") {
                Some(balance) => format!("Your current balance is {balance}."),
                None => "Let me look that up for you.".to_owned(),
            },
            Intent::TransactionRequest => {
                "I can help with that transaction. Let's confirm the details together.".to_owned()
            }
            Intent::GeneralInquiry => "Hello! How can I help you today?".to_owned(),
            Intent::Unknown => "Could you tell me a little more about what you need?".to_owned(),
        };
        Ok(Completion {
            text,
            intent: Some(intent),
            latency_ms: Some(Self::latency_for(request)),
        })
    }
}

/// `- key: value` lines from the facts section of a rendered prompt.
fn prompt_facts(prompt: &str) -> BTreeMap<&str, &str> {
    prompt
        .lines()
        .skip_while(|l| *l != FACTS_HEADER)
        .skip(1)
        .map_while(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_once(": "))
        .collect()
}

/// HTTP backend: `POST {prompt, image, request_id}` returning `{text, intent?}`.
/// `image` is the base64 PNG or null.
pub struct RemoteBackend {
    url: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    image: Option<String>,
    request_id: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    text: String,
    #[serde(default)]
    intent: Option<Intent>,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, timeout_ms: u64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
        }
    }
}

impl InferenceBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn complete(&self, request: &InferenceRequest) -> Result<Completion, BackendError> {
        let body = RemoteRequest {
            prompt: &request.prompt_text,
            image: request
                .image
                .as_ref()
                .map(|f| base64::engine::general_purpose::STANDARD.encode(&f.png_bytes)),
            request_id: &request.request_id,
        };
        let started = std::time::Instant::now();
        let reply: RemoteResponse = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BackendError::Timeout,
                other => BackendError::Unavailable(other.to_string()),
            })?;
        Ok(Completion {
            text: reply.text,
            intent: reply.intent,
            latency_ms: Some(started.elapsed().as_millis() as u64),
        })
    }
}

// ---- prompts ---------------------------------------------------------------

const FACTS_HEADER: &str = "Known facts:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Customer,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// Everything the prompt may draw on. The gateway keeps no other context.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub display_name: String,
    pub facts: Vec<(String, String)>,
    pub transcript: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub personas: BTreeMap<AgentRole, String>,
    /// Transcript lines kept in the prompt; each message is one turn.
    pub window: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        let personas = BTreeMap::from([
            (
                AgentRole::CustomerService,
                "You are a friendly bank customer service agent. Answer briefly and only from known facts.".to_owned(),
            ),
            (
                AgentRole::FinancialAdvisor,
                "You are a bank financial advisor. Quote account figures only from known facts.".to_owned(),
            ),
            (
                AgentRole::SalesAssociate,
                "You are a bank sales associate. Describe products without inventing prices.".to_owned(),
            ),
        ]);
        Self {
            personas,
            window: DEFAULT_TRANSCRIPT_WINDOW,
        }
    }
}

/// Pure rendering: persona, facts, the last `window` turns, then the utterance.
pub fn build_prompt(
    template: &PromptTemplate,
    snapshot: &SessionSnapshot,
    utterance: &str,
    role: AgentRole,
) -> String {
    let mut out = String::new();
    if let Some(persona) = template.personas.get(&role) {
        out.push_str(persona);
        out.push('\n');
    }
    if !snapshot.facts.is_empty() {
        out.push_str(FACTS_HEADER);
        out.push('\n');
        for (k, v) in &snapshot.facts {
            out.push_str(&format!("- {k}: {v}\n"));
        }
    }
    let skip = snapshot.transcript.len().saturating_sub(template.window);
    for turn in &snapshot.transcript[skip..] {
        let who = match turn.speaker {
            Speaker::Customer => "Customer",
            Speaker::Agent => "Agent",
        };
        out.push_str(&format!("{who}: {}\n", turn.text));
    }
    out.push_str(&format!("Customer: {utterance}\nAgent:"));
    out
}

// ---- translation -------------------------------------------------------------

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("translator unavailable: {0}")]
pub struct TranslatorUnavailable(pub String);

pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, from: &str, to: &str) -> Result<String, TranslatorUnavailable>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(
        &self,
        text: &str,
        _from: &str,
        _to: &str,
    ) -> Result<String, TranslatorUnavailable> {
        Ok(text.to_owned())
    }
}

/// Identity when the locales match. A failing translator also falls back to
/// identity; the second value is then a note for the audit log.
pub fn translate(
    text: &str,
    from: &str,
    to: &str,
    translator: &dyn Translator,
) -> (String, Option<String>) {
    if from == to {
        return (text.to_owned(), None);
    }
    match translator.translate(text, from, to) {
        Ok(t) => (t, None),
        Err(e) => (text.to_owned(), Some(format!("{e}; kept {from} text"))),
    }
}

// ---- validation --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationPolicy {
    /// Needs the active role may act on. `Unknown` intents always pass.
    pub allowed_intents: BTreeSet<ServiceNeed>,
    pub max_len: usize,
    pub fact_echo: bool,
}

impl ValidationPolicy {
    pub fn for_role(role: AgentRole, max_len: usize) -> Self {
        Self {
            allowed_intents: role.capabilities().iter().copied().collect(),
            max_len,
            fact_echo: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Suspicion {
    Intent { intent: Intent },
    Length { len: usize, max: usize },
    FactEcho { amount: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Validation {
    Valid,
    HallucinationSuspected(Suspicion),
}

fn money_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[$€£]\s?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").expect("valid regex")
    })
}

/// Monetary amounts quoted in `text`, in order of appearance.
pub fn monetary_tokens(text: &str) -> Vec<&str> {
    money_regex().find_iter(text).map(|m| m.as_str()).collect()
}

/// Checks intent, then length, then that every amount quoted in the reply is
/// also quoted, character for character, in some fact. Reports the first
/// rule that fails.
pub fn validate(
    response: &InferenceResponse,
    policy: &ValidationPolicy,
    facts: &[&str],
) -> Validation {
    if let Some(need) = response.intent.need() {
        if !policy.allowed_intents.contains(&need) {
            return Validation::HallucinationSuspected(Suspicion::Intent {
                intent: response.intent,
            });
        }
    }
    let len = response.text.chars().count();
    if len > policy.max_len {
        return Validation::HallucinationSuspected(Suspicion::Length {
            len,
            max: policy.max_len,
        });
    }
    if policy.fact_echo {
        let known: BTreeSet<&str> = facts.iter().flat_map(|f| monetary_tokens(f)).collect();
        if let Some(amount) = monetary_tokens(&response.text)
            .into_iter()
            .find(|amount| !known.contains(amount))
        {
            return Validation::HallucinationSuspected(Suspicion::FactEcho {
                amount: amount.to_owned(),
            });
        }
    }
    Validation::Valid
}

// ---- sentiment ---------------------------------------------------------------

const LEXICON: &str = include_str!("../data/sentiment_lexicon.txt");

fn lexicon() -> &'static BTreeMap<String, i32> {
    static MAP: OnceLock<BTreeMap<String, i32>> = OnceLock::new();
    MAP.get_or_init(|| parse_lexicon(LEXICON))
}

/// `word polarity` per line; `#` starts a comment.
pub fn parse_lexicon(text: &str) -> BTreeMap<String, i32> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter_map(|l| {
            let (word, polarity) = l.split_once(char::is_whitespace)?;
            Some((word.to_lowercase(), polarity.trim().parse().ok()?))
        })
        .collect()
}

/// Sign of (positive words minus negative words).
pub fn sentiment(utterance: &str) -> i8 {
    sentiment_with(utterance, lexicon())
}

pub fn sentiment_with(utterance: &str, lexicon: &BTreeMap<String, i32>) -> i8 {
    let score: i32 = utterance
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .filter_map(|w| lexicon.get(&w.to_lowercase()))
        .sum();
    score.signum() as i8
}
