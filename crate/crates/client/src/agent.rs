use std::sync::Arc;
use std::time::Duration;

use teller_core::protocol::MessagePayload;
use teller_core::station::{
    capture_frame, encode_frame, in_field_of_view, observe, AgentStation, CustomerSighting,
};
use tokio::task::JoinHandle;

use crate::conn::Connection;
use crate::error::ClientError;
use crate::http::BranchClient;

/// Where customers stand right now, as a station's sensors would see them.
pub trait World: Send + Sync + 'static {
    fn sightings(&self) -> Vec<CustomerSighting>;
}

impl<F: Fn() -> Vec<CustomerSighting> + Send + Sync + 'static> World for F {
    fn sightings(&self) -> Vec<CustomerSighting> {
        self()
    }
}

/// Keeps one station linked: registers it, then every tick reports who is in
/// view and pushes a captured frame. Reports double as heartbeats.
pub struct StationAgent {
    pub station: AgentStation,
    pub interval: Duration,
    pub push_frames: bool,
}

/// A running agent; dropping it leaves the task running, [`AgentTask::stop`] ends it.
pub struct AgentTask {
    handle: JoinHandle<Result<(), ClientError>>,
}

impl AgentTask {
    pub fn stop(&self) {
        self.handle.abort();
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    /// Waits for the task; an aborted task counts as a clean stop.
    pub async fn join(self) -> Result<(), ClientError> {
        match self.handle.await {
            Ok(r) => r,
            Err(_) => Ok(()),
        }
    }
}

impl StationAgent {
    pub fn new(station: AgentStation) -> Self {
        Self {
            station,
            interval: Duration::from_millis(500),
            push_frames: true,
        }
    }

    pub fn interval(mut self, interval: Duration) -> Self {
        self.interval = interval;
        self
    }

    pub fn push_frames(mut self, on: bool) -> Self {
        self.push_frames = on;
        self
    }

    /// Registers the station if needed, opens the agent link and runs until stopped.
    pub async fn spawn(
        self,
        client: &BranchClient,
        world: Arc<dyn World>,
    ) -> Result<AgentTask, ClientError> {
        client.ensure_station(&self.station).await?;
        let (conn, answer) =
            Connection::agent(&crate::ws_url(client.base()), self.station.station_id).await?;
        if let MessagePayload::ErrorMsg { code, detail } = answer.payload {
            return Err(ClientError::Api {
                status: 400,
                body: teller_core::api::ErrorBody { code, detail },
            });
        }
        let handle = tokio::spawn(self.run(conn, world));
        Ok(AgentTask { handle })
    }

    async fn run(self, mut conn: Connection, world: Arc<dyn World>) -> Result<(), ClientError> {
        let mut ticker = tokio::time::interval(self.interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            tokio::select! {
                _ = ticker.tick() => self.tick(&mut conn, world.as_ref()).await?,
                incoming = conn.recv() => {
                    if let MessagePayload::ErrorMsg { code, detail } = incoming?.payload {
                        tracing::warn!("station {}: {code}: {detail}", self.station.station_id);
                    }
                }
            }
        }
    }

    async fn tick(&self, conn: &mut Connection, world: &dyn World) -> Result<(), ClientError> {
        let sightings = world.sightings();
        conn.send(MessagePayload::ObservationReport(observe(
            &self.station,
            &sightings,
        )))
        .await?;
        if !self.push_frames {
            return Ok(());
        }
        let station = self.station.clone();
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let encoded = tokio::task::spawn_blocking(move || {
            let visible: Vec<_> = sightings
                .iter()
                .map(|s| s.position)
                .filter(|&p| in_field_of_view(&station, p))
                .collect();
            encode_frame(&capture_frame(&station, &visible, now))
        })
        .await
        .map_err(|_| ClientError::Closed)?;
        match encoded {
            Ok(frame) => {
                conn.send(MessagePayload::FramePush {
                    station_id: self.station.station_id,
                    frame,
                    captured_at: now,
                })
                .await?;
            }
            Err(e) => tracing::warn!(
                "station {}: frame encoding failed: {e}",
                self.station.station_id
            ),
        }
        Ok(())
    }
}
