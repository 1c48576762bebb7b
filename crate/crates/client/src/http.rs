use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use teller_core::api::*;
use teller_core::audit::AuditEntry;
use teller_core::branch::{
    AgentRole, Assignment, CrowdReport, Decision, ServiceNeed, Session, StationStatus,
};
use teller_core::dialog::TurnOutcome;
use teller_core::inference::{InferenceRequest, InferenceResponse};
use teller_core::profile::{CustomerProfile, DataCategory};
use teller_core::protocol::{CustomerId, SessionId, StationId};
use teller_core::sim::{MetricsReport, ScalingPoint, SimConfig};
use teller_core::station::{AgentStation, Point};

use crate::error::ClientError;

/// Typed wrapper over the service's HTTP/JSON operations.
#[derive(Debug, Clone)]
pub struct BranchClient {
    base: String,
    http: reqwest::Client,
}

async fn check(resp: Response) -> Result<Response, ClientError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await?;
    let body = serde_json::from_str::<ErrorBody>(&text).unwrap_or_else(|_| ErrorBody {
        code: status
            .canonical_reason()
            .unwrap_or("error")
            .to_lowercase()
            .replace(' ', "_"),
        detail: text,
    });
    Err(ClientError::Api {
        status: status.as_u16(),
        body,
    })
}

impl BranchClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let resp = check(self.http.get(self.url(path)).send().await?).await?;
        Ok(resp.json().await?)
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, ClientError> {
        let resp = check(self.http.post(self.url(path)).json(body).send().await?).await?;
        Ok(resp.json().await?)
    }

    /// For operations that answer 204.
    async fn post_unit<B: Serialize + ?Sized>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<(), ClientError> {
        check(self.http.post(self.url(path)).json(body).send().await?).await?;
        Ok(())
    }

    pub async fn health(&self) -> Result<bool, ClientError> {
        let v: serde_json::Value = self.get("/healthz").await?;
        Ok(v["status"] == "ok")
    }

    pub async fn status(&self) -> Result<StatusSummary, ClientError> {
        self.get("/v1/status").await
    }

    pub async fn roles(&self) -> Result<Vec<AgentRole>, ClientError> {
        self.get("/v1/roles").await
    }

    pub async fn stations(&self) -> Result<Vec<StationStatus>, ClientError> {
        self.get("/v1/stations").await
    }

    pub async fn register_station(
        &self,
        station: &AgentStation,
    ) -> Result<AgentStation, ClientError> {
        self.post("/v1/stations", station).await
    }

    pub async fn heartbeat(&self, station: StationId) -> Result<(), ClientError> {
        self.post_unit(&format!("/v1/stations/{}/heartbeat", station.0), &())
            .await
    }

    /// Moves the head of `station`'s line into service, if the station is free.
    pub async fn next_in_queue(
        &self,
        station: StationId,
    ) -> Result<Option<CustomerId>, ClientError> {
        let next: NextServed = self
            .post(&format!("/v1/stations/{}/next", station.0), &())
            .await?;
        Ok(next.customer_id)
    }

    pub async fn crowd(&self) -> Result<CrowdReport, ClientError> {
        self.get("/v1/crowd").await
    }

    pub async fn sessions(&self) -> Result<Vec<Session>, ClientError> {
        self.get("/v1/sessions").await
    }

    pub async fn open_session(
        &self,
        customer_id: CustomerId,
        station_id: StationId,
    ) -> Result<Session, ClientError> {
        self.post(
            "/v1/sessions",
            &OpenRequest {
                customer_id,
                station_id,
            },
        )
        .await
    }

    pub async fn session(&self, id: SessionId) -> Result<Session, ClientError> {
        self.get(&format!("/v1/sessions/{id}")).await
    }

    pub async fn authenticate(
        &self,
        id: SessionId,
        credential: &str,
    ) -> Result<EntitlementList, ClientError> {
        let req = AuthenticateRequest {
            credential: credential.to_owned(),
        };
        self.post(&format!("/v1/sessions/{id}/authenticate"), &req)
            .await
    }

    pub async fn assign(
        &self,
        id: SessionId,
        need: ServiceNeed,
        position: Option<Point>,
    ) -> Result<Assignment, ClientError> {
        self.post(
            &format!("/v1/sessions/{id}/assign"),
            &AssignRequest { need, position },
        )
        .await
    }

    pub async fn switch_role(
        &self,
        id: SessionId,
        role: &str,
        reason: Option<&str>,
    ) -> Result<Session, ClientError> {
        let req = RoleRequest {
            role: role.to_owned(),
            reason: reason.map(str::to_owned),
        };
        self.post(&format!("/v1/sessions/{id}/role"), &req).await
    }

    pub async fn authorize(&self, id: SessionId, resource: &str) -> Result<Decision, ClientError> {
        let req = AuthorizeRequest {
            resource: resource.to_owned(),
        };
        self.post(&format!("/v1/sessions/{id}/authorize"), &req)
            .await
    }

    pub async fn rebind(
        &self,
        id: SessionId,
        station_id: StationId,
    ) -> Result<LinePosition, ClientError> {
        self.post(
            &format!("/v1/sessions/{id}/rebind"),
            &RebindRequest { station_id },
        )
        .await
    }

    pub async fn close(&self, id: SessionId, reason: Option<&str>) -> Result<(), ClientError> {
        let req = CloseRequest {
            reason: reason.map(str::to_owned),
        };
        self.post_unit(&format!("/v1/sessions/{id}/close"), &req)
            .await
    }

    /// One dialog turn; waits for the reply.
    pub async fn utterance(
        &self,
        id: SessionId,
        text: &str,
        locale: &str,
    ) -> Result<TurnOutcome, ClientError> {
        let req = UtteranceRequest {
            text: text.to_owned(),
            locale: locale.to_owned(),
        };
        self.post(&format!("/v1/sessions/{id}/utterance"), &req)
            .await
    }

    pub async fn transcript(&self, id: SessionId) -> Result<Vec<TranscriptLine>, ClientError> {
        self.get(&format!("/v1/sessions/{id}/transcript")).await
    }

    pub async fn session_audit(&self, id: SessionId) -> Result<Vec<AuditEntry>, ClientError> {
        self.get(&format!("/v1/sessions/{id}/audit")).await
    }

    pub async fn profile(&self, customer: CustomerId) -> Result<CustomerProfile, ClientError> {
        self.get(&format!("/v1/profiles/{}", customer.0)).await
    }

    /// Returns the value the server now holds.
    pub async fn set_consent(
        &self,
        customer: CustomerId,
        category: DataCategory,
        value: bool,
    ) -> Result<bool, ClientError> {
        let held: ConsentChange = self
            .post(
                &format!("/v1/profiles/{}/consent", customer.0),
                &ConsentChange { category, value },
            )
            .await?;
        Ok(held.value)
    }

    pub async fn forget(
        &self,
        customer: CustomerId,
        category: DataCategory,
    ) -> Result<usize, ClientError> {
        let removed: Removed = self
            .post(
                &format!("/v1/profiles/{}/forget", customer.0),
                &ForgetRequest { category },
            )
            .await?;
        Ok(removed.removed)
    }

    pub async fn verify_audit(&self) -> Result<AuditSummary, ClientError> {
        self.get("/v1/audit/verify").await
    }

    pub async fn events(&self, after: usize) -> Result<EventPage, ClientError> {
        self.get(&format!("/v1/events?after={after}")).await
    }

    pub async fn infer(&self, req: &InferenceRequest) -> Result<InferenceResponse, ClientError> {
        self.post("/v1/infer", req).await
    }

    pub async fn sim_run(&self, cfg: &SimConfig) -> Result<MetricsReport, ClientError> {
        self.post("/v1/sim/run", cfg).await
    }

    /// Report plus the event log lines its digest covers.
    pub async fn sim_trace(&self, cfg: &SimConfig) -> Result<SimTrace, ClientError> {
        self.post("/v1/sim/trace", cfg).await
    }

    pub async fn sim_compare(&self, cfg: &SimConfig) -> Result<f64, ClientError> {
        let s: Savings = self.post("/v1/sim/compare", cfg).await?;
        Ok(s.preconnect_savings_ms)
    }

    /// Throughput with 1, 2, ... of the floor's stations.
    pub async fn sim_scaling(&self, cfg: &SimConfig) -> Result<Vec<ScalingPoint>, ClientError> {
        self.post("/v1/sim/scaling", cfg).await
    }

    /// Registers `station`, treating "already registered" as success.
    pub async fn ensure_station(&self, station: &AgentStation) -> Result<(), ClientError> {
        match self.register_station(station).await {
            Ok(_) => Ok(()),
            Err(ClientError::Api { status, .. }) if status == StatusCode::CONFLICT.as_u16() => {
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}
