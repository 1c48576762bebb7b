//! Deterministic discrete-event simulation of a branch.
//!
//! Customers arrive at the entry point, pick a station, walk to it while
//! ranging against its beacon, and are served. Crossing into the Near zone
//! (or Immediate in baseline mode) opens the session transport, which becomes
//! usable after a fixed handshake delay. Reaching Immediate counts as
//! presence: the customer authenticates and joins the station's line at that
//! instant in both modes, so the queue evolves identically and the modes
//! differ only in when the first agent reply can be delivered.
//!
//! All randomness comes from one seeded generator and is drawn only on
//! arrivals and ticks, never on connection events, so the two modes consume
//! the same stream.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::branch::{
    select_station, AgentRole, Branch, BranchConfig, ServiceNeed, StationCandidate,
};
use crate::canonical;
use crate::dialog::Dialog;
use crate::inference::MockBackend;
use crate::profile::DataCategory;
use crate::protocol::{self, CustomerId, MessageEnvelope, SequenceCounter, SessionId, StationId};
use crate::ranging::{rssi_at, ProximityTracker, ProximityZone, RangingConfig};
use crate::station::{
    capture_frame, encode_frame, in_field_of_view, observe, AgentStation, CustomerSighting, Point,
};
use crate::Millis;

/// How far in front of its station a customer stands while served.
pub const STANDING_OFFSET_M: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("event at {event} ms precedes clock {now} ms")]
    TimeRegression { now: Millis, event: Millis },
    #[error("invariant violated at {at} ms: {what}")]
    InvariantViolation { at: Millis, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub width_m: f64,
    pub height_m: f64,
    pub entry_point: Point,
    pub stations: Vec<AgentStation>,
}

impl Default for FloorPlan {
    /// Three stations along the back wall, facing the entrance.
    fn default() -> Self {
        let station = |id: u32, x: f64, role: AgentRole| AgentStation {
            station_id: StationId(id),
            position: Point::new(x, 1.0),
            orientation_rad: std::f64::consts::FRAC_PI_2,
            fov_angle_rad: std::f64::consts::FRAC_PI_2,
            fov_range_m: 8.0,
            role,
            beacon: crate::ranging::BeaconIdentity {
                region_uuid: uuid::Uuid::from_u128(0x007e_11e5_0000_0000_0000_0000_0000_0001),
                major: 1,
                minor: id,
            },
        };
        Self {
            width_m: 20.0,
            height_m: 12.0,
            entry_point: Point::new(10.0, 11.5),
            stations: vec![
                station(1, 5.0, AgentRole::CustomerService),
                station(2, 10.0, AgentRole::FinancialAdvisor),
                station(3, 15.0, AgentRole::SalesAssociate),
            ],
        }
    }
}

impl FloorPlan {
    fn contains(&self, p: Point) -> bool {
        (0.0..=self.width_m).contains(&p.x) && (0.0..=self.height_m).contains(&p.y)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.width_m > 0.0 && self.height_m > 0.0) {
            return Err("floor dimensions must be positive".into());
        }
        if !self.contains(self.entry_point) {
            return Err("entry point outside the floor".into());
        }
        if self.stations.is_empty() {
            return Err("floor has no stations".into());
        }
        for (i, s) in self.stations.iter().enumerate() {
            s.validate().map_err(|e| e.to_string())?;
            if !self.contains(s.position) {
                return Err(format!("station {} outside the floor", s.station_id));
            }
            for other in &self.stations[..i] {
                if other.station_id == s.station_id {
                    return Err(format!("duplicate station id {}", s.station_id));
                }
                if other.position == s.position {
                    return Err(format!(
                        "stations {} and {} share a position",
                        other.station_id, s.station_id
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A fixed arrival replacing the Poisson stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptArrival {
    pub at_s: f64,
    pub need: ServiceNeed,
    /// Drawn from the service distribution when absent.
    #[serde(default)]
    pub service_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Directive {
    Rebind { station: StationId },
    OptOut { category: DataCategory },
    SwitchRole { role: AgentRole },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptAction {
    pub at_s: f64,
    pub customer: CustomerId,
    pub action: Directive,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub arrivals: Vec<ScriptArrival>,
    #[serde(default)]
    pub actions: Vec<ScriptAction>,
}

/// Simulation parameters (TOML).
///
/// ```toml
/// seed = 7
/// duration_s = 3600
/// arrival_rate_per_min = 2.0
/// walk_speed_mps = 1.2
/// service_time_mean_s = 120
/// handshake_ms = 300
/// baseline_mode = false
///
/// [ranging]
/// noise_sigma_db = 2.0
///
/// [floor]
/// width_m = 20.0
/// height_m = 12.0
/// entry_point = { x = 10.0, y = 11.5 }
/// [[floor.stations]]
/// # same fields as a service station entry
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub arrival_rate_per_min: f64,
    pub walk_speed_mps: f64,
    pub service_time_mean_s: f64,
    pub handshake_ms: u64,
    pub report_interval_s: f64,
    pub baseline_mode: bool,
    pub ranging: RangingConfig,
    pub floor: FloorPlan,
    pub script: Option<Script>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 3600.0,
            arrival_rate_per_min: 2.0,
            walk_speed_mps: 1.2,
            service_time_mean_s: 120.0,
            handshake_ms: 300,
            report_interval_s: 1.0,
            baseline_mode: false,
            ranging: RangingConfig::default(),
            floor: FloorPlan::default(),
            script: None,
        }
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SimConfig =
            toml::from_str(&text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_owned()));
        if !(self.arrival_rate_per_min >= 0.0 && self.arrival_rate_per_min.is_finite()) {
            return bad("arrival_rate_per_min must be >= 0");
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s must be > 0");
        }
        if !(self.walk_speed_mps > 0.0 && self.walk_speed_mps.is_finite()) {
            return bad("walk_speed_mps must be > 0");
        }
        if !(self.service_time_mean_s > 0.0 && self.service_time_mean_s.is_finite()) {
            return bad("service_time_mean_s must be > 0");
        }
        if !(self.report_interval_s > 0.0) {
            return bad("report_interval_s must be > 0");
        }
        self.ranging
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.0))?;
        self.floor.validate().map_err(SimError::InvalidConfig)?;
        if let Some(script) = &self.script {
            let ids: BTreeSet<StationId> =
                self.floor.stations.iter().map(|s| s.station_id).collect();
            for a in &script.arrivals {
                if !(a.at_s >= 0.0) || a.service_s.is_some_and(|s| !(s > 0.0)) {
                    return bad("script arrivals need at_s >= 0 and service_s > 0");
                }
            }
            for a in &script.actions {
                if !(a.at_s >= 0.0) {
                    return bad("script actions need at_s >= 0");
                }
                if let Directive::Rebind { station } = a.action {
                    if !ids.contains(&station) {
                        return bad("script rebinds to an unknown station");
                    }
                }
            }
        }
        Ok(())
    }

    fn tick_ms(&self) -> Millis {
        ((1000.0 / self.ranging.sample_hz).round() as Millis).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Arriving,
    Walking,
    AtStation,
    InService,
    Done,
}

#[derive(Debug, Clone)]
pub struct CustomerActor {
    pub customer_id: CustomerId,
    pub position: Point,
    pub target: Point,
    pub target_station: StationId,
    pub need: ServiceNeed,
    pub phase: Phase,
    service_ms: Millis,
    tracker: ProximityTracker,
    pub session: Option<SessionId>,
    pub link_ready_at: Option<Millis>,
    pub presence_at: Option<Millis>,
    pub service_started_at: Option<Millis>,
    pub first_reply_at: Option<Millis>,
    greeted: bool,
    service_token: u64,
}

impl CustomerActor {
    pub fn distance_to_target(&self) -> f64 {
        self.position.distance_to(self.target)
    }

    pub fn zone(&self) -> ProximityZone {
        self.tracker.zone()
    }

    /// Time from presence to the first agent reply.
    pub fn time_to_first_reply(&self) -> Option<Millis> {
        Some(self.first_reply_at? - self.presence_at?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// Poisson arrival, or the scripted arrival at this index.
    Arrival(Option<usize>),
    Tick,
    Report,
    LinkReady(CustomerId),
    ReplyDelivered(CustomerId),
    ServiceComplete(CustomerId, u64),
    Action(usize),
}

/// Canonical JSON lines plus a running SHA-256 over them.
#[derive(Debug, Clone)]
pub struct EventLog {
    lines: Vec<String>,
    hasher: Sha256,
}

impl Default for EventLog {
    fn default() -> Self {
        Self {
            lines: Vec::new(),
            hasher: Sha256::new(),
        }
    }
}

impl EventLog {
    fn push(&mut self, t: Millis, kind: &str, mut fields: Value) {
        fields["t"] = json!(t);
        fields["kind"] = json!(kind);
        let line = canonical::to_canonical_string(&fields);
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    /// The persisted form: one line per event, each newline-terminated.
    pub fn to_text(&self) -> String {
        self.lines.iter().flat_map(|l| [l.as_str(), "\n"]).collect()
    }
}

/// Digest of a persisted event log, as stored in the metrics report.
pub fn log_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// World state advanced one event at a time by [`World::step`].
pub struct World {
    config: SimConfig,
    branch: Branch,
    dialog: Dialog,
    rng: ChaCha8Rng,
    now: Millis,
    tick_ms: Millis,
    duration_ms: Millis,
    actors: BTreeMap<CustomerId, CustomerActor>,
    next_customer: u64,
    arrivals: u64,
    max_queue_len: usize,
    seq: BTreeMap<SessionId, SequenceCounter>,
    log: EventLog,
}

impl World {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut branch = Branch::new(BranchConfig {
            service_time_mean_s: config.service_time_mean_s,
            report_interval_ms: secs_to_ms(config.report_interval_s),
            heartbeat_interval_ms: secs_to_ms(config.report_interval_s),
            ..BranchConfig::default()
        });
        for s in &config.floor.stations {
            branch
                .register_station(s.clone(), 0)
                .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            tick_ms: config.tick_ms(),
            duration_ms: secs_to_ms(config.duration_s),
            config,
            branch,
            dialog: Dialog::default(),
            now: 0,
            actors: BTreeMap::new(),
            next_customer: 1,
            arrivals: 0,
            max_queue_len: 0,
            seq: BTreeMap::new(),
            log: EventLog::default(),
        })
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn branch(&self) -> &Branch {
        &self.branch
    }

    pub fn actors(&self) -> &BTreeMap<CustomerId, CustomerActor> {
        &self.actors
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn duration_ms(&self) -> Millis {
        self.duration_ms
    }

    /// Events to seed the queue with.
    pub fn initial_events(&mut self) -> Vec<(Millis, Event)> {
        let mut events = vec![(0, Event::Tick), (0, Event::Report)];
        match &self.config.script {
            Some(script) => {
                events.extend(
                    script
                        .arrivals
                        .iter()
                        .enumerate()
                        .map(|(i, a)| (secs_to_ms(a.at_s), Event::Arrival(Some(i)))),
                );
                events.extend(
                    script
                        .actions
                        .iter()
                        .enumerate()
                        .map(|(i, a)| (secs_to_ms(a.at_s), Event::Action(i))),
                );
            }
            None => {
                if let Some(gap) = self.draw_interarrival() {
                    events.push((gap, Event::Arrival(None)));
                }
            }
        }
        events
    }

    fn draw_interarrival(&mut self) -> Option<Millis> {
        let per_s = self.config.arrival_rate_per_min / 60.0;
        let exp = Exp::new(per_s).ok().filter(|_| per_s > 0.0)?;
        Some(secs_to_ms(exp.sample(&mut self.rng)))
    }

    fn draw_service(&mut self) -> Millis {
        let exp = Exp::new(1.0 / self.config.service_time_mean_s).expect("validated mean");
        secs_to_ms(exp.sample(&mut self.rng)).max(1)
    }

    /// Applies one event. Returns the events it schedules.
    pub fn step(&mut self, at: Millis, event: &Event) -> Result<Vec<(Millis, Event)>, SimError> {
        if at < self.now {
            return Err(SimError::TimeRegression {
                now: self.now,
                event: at,
            });
        }
        self.now = at;
        let mut next = Vec::new();
        match *event {
            Event::Arrival(script_idx) => self.on_arrival(script_idx, &mut next)?,
            Event::Tick => {
                self.on_tick(&mut next)?;
                next.push((at + self.tick_ms, Event::Tick));
            }
            Event::Report => {
                self.on_report()?;
                next.push((
                    at + secs_to_ms(self.config.report_interval_s),
                    Event::Report,
                ));
            }
            Event::LinkReady(c) => self.on_link_ready(c, &mut next)?,
            Event::ReplyDelivered(c) => self.on_reply(c),
            Event::ServiceComplete(c, token) => self.on_service_complete(c, token, &mut next)?,
            Event::Action(i) => self.on_action(i, &mut next)?,
        }
        self.dispatch_idle(&mut next)?;
        self.check_invariants()?;
        Ok(next)
    }

    fn violation(&self, what: impl Into<String>) -> SimError {
        SimError::InvariantViolation {
            at: self.now,
            what: what.into(),
        }
    }

    fn station(&self, id: StationId) -> &AgentStation {
        self.branch
            .registry()
            .get(id)
            .expect("sim stations never leave")
    }

    fn standing_point(station: &AgentStation) -> Point {
        Point::new(
            station.position.x + STANDING_OFFSET_M * station.orientation_rad.cos(),
            station.position.y + STANDING_OFFSET_M * station.orientation_rad.sin(),
        )
    }

    fn on_arrival(
        &mut self,
        script_idx: Option<usize>,
        next: &mut Vec<(Millis, Event)>,
    ) -> Result<(), SimError> {
        let (need, service_ms) = match script_idx {
            Some(i) => {
                let a = self.config.script.as_ref().expect("scripted").arrivals[i].clone();
                let service = match a.service_s {
                    Some(s) => secs_to_ms(s).max(1),
                    None => self.draw_service(),
                };
                (a.need, service)
            }
            None => {
                let need = ServiceNeed::ALL[self.rng.random_range(0..ServiceNeed::ALL.len())];
                let service = self.draw_service();
                if let Some(gap) = self.draw_interarrival() {
                    next.push((self.now + gap, Event::Arrival(None)));
                }
                (need, service)
            }
        };
        let customer_id = CustomerId(self.next_customer);
        self.next_customer += 1;
        self.arrivals += 1;

        let entry = self.config.floor.entry_point;
        let candidates: Vec<StationCandidate> = self
            .branch
            .registry()
            .available(self.now)
            .map(|s| StationCandidate {
                station_id: s.station_id,
                capable: s.role.can_serve(need),
                queue_len: self.branch.queues().len(s.station_id) + self.walking_to(s.station_id),
                distance_m: entry.distance_to(Self::standing_point(s)),
            })
            .collect();
        let assignment =
            select_station(&candidates).ok_or_else(|| self.violation("no station available"))?;
        let station = self.station(assignment.station_id).clone();
        self.branch.enroll(customer_id, credential(customer_id));
        self.actors.insert(
            customer_id,
            CustomerActor {
                customer_id,
                position: entry,
                target: Self::standing_point(&station),
                target_station: station.station_id,
                need,
                phase: Phase::Arriving,
                service_ms,
                tracker: ProximityTracker::new(station.beacon),
                session: None,
                link_ready_at: None,
                presence_at: None,
                service_started_at: None,
                first_reply_at: None,
                greeted: false,
                service_token: 0,
            },
        );
        self.log.push(
            self.now,
            "arrival",
            json!({"customer": customer_id, "need": need, "station": station.station_id, "handoff": assignment.handoff}),
        );
        Ok(())
    }

    fn walking_to(&self, station: StationId) -> usize {
        self.actors
            .values()
            .filter(|a| a.target_station == station && a.phase < Phase::AtStation)
            .count()
    }

    fn on_tick(&mut self, next: &mut Vec<(Millis, Event)>) -> Result<(), SimError> {
        let step_m = self.config.walk_speed_mps * self.tick_ms as f64 / 1000.0;
        let sigma = self.config.ranging.noise_sigma_db;
        let ids: Vec<CustomerId> = self.actors.keys().copied().collect();
        for id in ids {
            let actor = self.actors.get_mut(&id).expect("listed");
            if actor.phase == Phase::Done
                || actor.phase == Phase::InService && actor.position == actor.target
            {
                continue;
            }
            let before = actor.position;
            let remaining = actor.position.distance_to(actor.target);
            if remaining > 0.0 {
                actor.position = if remaining <= step_m {
                    actor.target
                } else {
                    let f = step_m / remaining;
                    Point::new(
                        before.x + (actor.target.x - before.x) * f,
                        before.y + (actor.target.y - before.y) * f,
                    )
                };
            }
            let moved = before.distance_to(actor.position);
            if actor.phase == Phase::Arriving {
                actor.phase = Phase::Walking;
            }
            if moved > step_m + 1e-9 {
                return Err(self.violation(format!("customer {id} moved {moved} m in one tick")));
            }
            if !self.config.floor.contains(actor.position) {
                return Err(self.violation(format!("customer {id} left the floor")));
            }
            if actor.phase != Phase::Walking {
                continue;
            }
            let noise = if sigma > 0.0 {
                Normal::new(0.0, sigma)
                    .expect("validated sigma")
                    .sample(&mut self.rng)
            } else {
                0.0
            };
            let station_pos = self
                .branch
                .registry()
                .get(actor.target_station)
                .expect("registered")
                .position;
            let rssi = rssi_at(
                actor.position.distance_to(station_pos),
                &self.config.ranging,
                noise,
            );
            if let Some(ev) = actor.tracker.observe(rssi, self.now, &self.config.ranging) {
                let station = actor.target_station;
                self.log.push(
                    self.now,
                    "zone",
                    json!({"customer": id, "station": station, "from": ev.from_zone, "to": ev.to_zone,
                           "distance_m": round_mm(ev.distance_m)}),
                );
                self.on_zone(id, ev.to_zone, next)?;
            }
        }
        Ok(())
    }

    fn on_zone(
        &mut self,
        id: CustomerId,
        zone: ProximityZone,
        next: &mut Vec<(Millis, Event)>,
    ) -> Result<(), SimError> {
        let trigger = if self.config.baseline_mode {
            ProximityZone::Immediate
        } else {
            ProximityZone::Near
        };
        let actor = &self.actors[&id];
        let station = actor.target_station;
        if zone >= trigger && actor.session.is_none() {
            let session = self
                .branch
                .open_preconnect(id, station, self.now)
                .map_err(|e| self.violation(e.to_string()))?;
            self.actors.get_mut(&id).expect("exists").session = Some(session);
            self.log.push(
                self.now,
                "connect",
                json!({"customer": id, "session": session, "zone": zone}),
            );
            next.push((self.now + self.config.handshake_ms, Event::LinkReady(id)));
        }
        if zone == ProximityZone::Immediate {
            self.on_presence(id)?;
        }
        Ok(())
    }

    fn on_presence(&mut self, id: CustomerId) -> Result<(), SimError> {
        let now = self.now;
        let actor = self.actors.get_mut(&id).expect("exists");
        actor.phase = Phase::AtStation;
        actor.presence_at = Some(now);
        let (session, station, need) = (
            actor.session.expect("connected"),
            actor.target_station,
            actor.need,
        );
        self.branch
            .authenticate(session, credential(id).as_bytes(), now)
            .map_err(|e| self.violation(e.to_string()))?;
        for (category, key, value) in seed_facts(id) {
            let _ = self.branch.remember(id, category, key, &value, now);
        }
        let position = self
            .branch
            .enqueue(session, station, need, now)
            .map_err(|e| self.violation(e.to_string()))?;
        self.log.push(
            now,
            "presence",
            json!({"customer": id, "station": station, "position": position}),
        );
        Ok(())
    }

    /// Serves the head of an idle station's line.
    fn maybe_start_service(
        &mut self,
        station: StationId,
        next: &mut Vec<(Millis, Event)>,
    ) -> Result<(), SimError> {
        if self.branch.station_busy(station) {
            return Ok(());
        }
        let Some(id) = self.branch.next_in_queue(station, self.now) else {
            return Ok(());
        };
        let now = self.now;
        let actor = self
            .actors
            .get_mut(&id)
            .ok_or_else(|| SimError::InvariantViolation {
                at: now,
                what: format!("queued customer {id} has no actor"),
            })?;
        actor.phase = Phase::InService;
        actor.service_started_at = Some(now);
        actor.service_token += 1;
        let wait = now - actor.presence_at.unwrap_or(now);
        let done = (
            now + actor.service_ms,
            Event::ServiceComplete(id, actor.service_token),
        );
        let link_up = actor.link_ready_at.is_some();
        next.push(done);
        self.log.push(
            now,
            "service_start",
            json!({"customer": id, "station": station, "wait_ms": wait}),
        );
        if link_up {
            self.greet(id, next)?;
        }
        Ok(())
    }

    fn greet(&mut self, id: CustomerId, next: &mut Vec<(Millis, Event)>) -> Result<(), SimError> {
        let now = self.now;
        let actor = self.actors.get_mut(&id).expect("exists");
        if actor.greeted || actor.phase != Phase::InService {
            return Ok(());
        }
        actor.greeted = true;
        let (session, need, station_id) = (
            actor.session.expect("connected"),
            actor.need,
            actor.target_station,
        );
        let station = self.station(station_id).clone();
        let visible: Vec<Point> = self
            .actors
            .values()
            .filter(|a| a.phase != Phase::Done && in_field_of_view(&station, a.position))
            .map(|a| a.position)
            .collect();
        let frame = encode_frame(&capture_frame(&station, &visible, now))
            .map_err(|e| self.violation(e.to_string()))?;
        self.branch
            .record_frame(station_id, frame)
            .map_err(|e| self.violation(e.to_string()))?;
        let outcome = self
            .dialog
            .converse(
                &mut self.branch,
                &MockBackend,
                session,
                opening_line(need),
                "en",
                now,
            )
            .map_err(|e| self.violation(e.to_string()))?;
        next.push((now + outcome.latency_ms, Event::ReplyDelivered(id)));
        Ok(())
    }

    fn on_link_ready(
        &mut self,
        id: CustomerId,
        next: &mut Vec<(Millis, Event)>,
    ) -> Result<(), SimError> {
        let actor = self.actors.get_mut(&id).expect("exists");
        actor.link_ready_at = Some(self.now);
        self.log
            .push(self.now, "link_ready", json!({"customer": id}));
        self.greet(id, next)
    }

    fn on_reply(&mut self, id: CustomerId) {
        let actor = self.actors.get_mut(&id).expect("exists");
        if actor.first_reply_at.is_none() {
            actor.first_reply_at = Some(self.now);
            let ttfr = actor.time_to_first_reply();
            self.log.push(
                self.now,
                "first_reply",
                json!({"customer": id, "ttfr_ms": ttfr}),
            );
        }
    }

    fn on_service_complete(
        &mut self,
        id: CustomerId,
        token: u64,
        next: &mut Vec<(Millis, Event)>,
    ) -> Result<(), SimError> {
        let actor = &self.actors[&id];
        if actor.service_token != token || actor.phase != Phase::InService {
            return Ok(());
        }
        let (session, station) = (actor.session.expect("connected"), actor.target_station);
        self.branch
            .close_session(session, "served", self.now)
            .map_err(|e| self.violation(e.to_string()))?;
        self.actors.get_mut(&id).expect("exists").phase = Phase::Done;
        self.log.push(
            self.now,
            "service_complete",
            json!({"customer": id, "station": station}),
        );
        self.maybe_start_service(station, next)
    }

    fn on_action(&mut self, idx: usize, next: &mut Vec<(Millis, Event)>) -> Result<(), SimError> {
        let action = self.config.script.as_ref().expect("scripted").actions[idx].clone();
        let id = action.customer;
        let now = self.now;
        let Some(actor) = self.actors.get(&id) else {
            self.log.push(
                now,
                "action_skipped",
                json!({"customer": id, "action": action.action}),
            );
            return Ok(());
        };
        let session = actor.session;
        let phase = actor.phase;
        let applied = match (&action.action, session) {
            (Directive::OptOut { category }, _) => {
                self.branch.set_consent(id, *category, false);
                true
            }
            (Directive::SwitchRole { role }, Some(s)) if phase == Phase::InService => {
                self.branch.switch_role(s, *role, "directive", now).is_ok()
            }
            (Directive::Rebind { station }, Some(s)) if phase == Phase::AtStation => {
                self.branch
                    .rebind_session(s, *station, now)
                    .map_err(|e| self.violation(e.to_string()))?;
                let target = Self::standing_point(self.station(*station));
                let actor = self.actors.get_mut(&id).expect("exists");
                actor.target_station = *station;
                actor.target = target;
                true
            }
            _ => false,
        };
        let kind = if applied { "action" } else { "action_skipped" };
        self.log
            .push(now, kind, json!({"customer": id, "action": action.action}));
        if let (true, Directive::Rebind { station }) = (applied, &action.action) {
            self.maybe_start_service(*station, next)?;
        }
        Ok(())
    }

    fn on_report(&mut self) -> Result<(), SimError> {
        let sightings: Vec<CustomerSighting> = self
            .actors
            .values()
            .filter(|a| a.phase != Phase::Done)
            .map(|a| CustomerSighting {
                customer_id: a.customer_id,
                position: a.position,
            })
            .collect();
        let stations: Vec<AgentStation> = self.branch.registry().all().cloned().collect();
        for s in &stations {
            self.branch
                .heartbeat(s.station_id, self.now)
                .map_err(|e| self.violation(e.to_string()))?;
            self.branch
                .record_observation(observe(s, &sightings), self.now)
                .map_err(|e| self.violation(e.to_string()))?;
        }
        if !sightings.is_empty() {
            let crowd = self.branch.crowd_levels(self.now);
            self.log
                .push(self.now, "crowd", json!({"counts": crowd.counts}));
        }
        Ok(())
    }

    /// Moves branch output into the log and starts service where a station
    /// has become free.
    fn flush(&mut self) -> Result<(), SimError> {
        for t in self.branch.drain_transitions() {
            if !t.from.can_transition_to(t.to) {
                return Err(
                    self.violation(format!("illegal transition {:?} -> {:?}", t.from, t.to))
                );
            }
            self.log.push(
                self.now,
                "transition",
                json!({"session": t.session_id, "from": t.from, "to": t.to}),
            );
        }
        for out in self.branch.drain_outbox() {
            let seq = self.seq.entry(out.session_id).or_default().next_seq();
            let envelope = MessageEnvelope::new(out.session_id, seq, self.now, out.payload);
            let bytes = protocol::encode(&envelope).map_err(|e| self.violation(e.to_string()))?;
            let value: Value = serde_json::from_slice(&bytes).expect("encoder emits JSON");
            self.log
                .push(self.now, "envelope", json!({"envelope": value}));
        }
        Ok(())
    }

    fn check_invariants(&mut self) -> Result<(), SimError> {
        let lines: Vec<(StationId, usize)> = self
            .branch
            .queues()
            .stations()
            .map(|(s, l)| (s, l.len()))
            .collect();
        let mut seen = BTreeSet::new();
        for (station, len) in &lines {
            self.max_queue_len = self.max_queue_len.max(*len);
            for e in self.branch.queues().line(*station) {
                if !seen.insert(e.customer_id) {
                    return Err(self.violation(format!("customer {} in two queues", e.customer_id)));
                }
            }
        }
        let served = self
            .actors
            .values()
            .filter(|a| a.phase == Phase::Done)
            .count() as u64;
        let in_system = self
            .actors
            .values()
            .filter(|a| a.phase != Phase::Done)
            .count() as u64;
        if self.arrivals != served + in_system {
            return Err(self.violation("arrivals != served + in system"));
        }
        let flow = self.branch.flow_counts();
        let present = self
            .actors
            .values()
            .filter(|a| a.presence_at.is_some())
            .count();
        let started = self
            .actors
            .values()
            .filter(|a| a.service_started_at.is_some())
            .count();
        if flow.arrivals != present || flow.served != started || flow.departed_unserved != 0 {
            return Err(self.violation(format!("branch flow {flow:?} disagrees with actors")));
        }
        Ok(())
    }

    /// Starts service wherever a station is idle with a line.
    fn dispatch_idle(&mut self, next: &mut Vec<(Millis, Event)>) -> Result<(), SimError> {
        let stations: Vec<StationId> = self.branch.queues().stations().map(|(s, _)| s).collect();
        for s in stations {
            self.maybe_start_service(s, next)?;
        }
        self.flush()
    }

    fn outcome(&self) -> RunOutcome {
        let mut waits: Vec<Millis> = self
            .actors
            .values()
            .filter(|a| a.phase == Phase::Done)
            .filter_map(|a| Some(a.service_started_at? - a.presence_at?))
            .collect();
        waits.sort_unstable();
        RunOutcome {
            arrivals: self.arrivals,
            served: waits.len() as u64,
            waits_ms: waits,
            max_queue_len: self.max_queue_len as u64,
            ttfr_ms: self
                .actors
                .values()
                .filter_map(|a| Some((a.customer_id, a.time_to_first_reply()?)))
                .collect(),
            digest: self.log.digest(),
        }
    }
}

fn secs_to_ms(s: f64) -> Millis {
    (s * 1000.0).round() as Millis
}

fn round_mm(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn credential(id: CustomerId) -> String {
    format!("pin-{id}")
}

fn opening_line(need: ServiceNeed) -> &'static str {
    match need {
        ServiceNeed::GeneralInquiry => "Hello, I have a question about your opening hours",
        ServiceNeed::TransactionRequest => "Hi, I'd like to make a transfer",
        ServiceNeed::InformationLookup => "Can you tell me my account balance?",
    }
}

/// Profile facts a returning customer already has on file.
fn seed_facts(id: CustomerId) -> [(DataCategory, &'static str, String); 2] {
    let cents = 10_000 + (id.0 * 7_919) % 500_000;
    [
        (DataCategory::Identity, "name", format!("Customer {id}")),
        (
            DataCategory::Transactional,
            "balance",
            format!("${}.{:02}", cents / 100, cents % 100),
        ),
    ]
}

/// Per-run results used to build a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub arrivals: u64,
    pub served: u64,
    pub waits_ms: Vec<Millis>,
    pub max_queue_len: u64,
    pub ttfr_ms: BTreeMap<CustomerId, Millis>,
    pub digest: String,
}

/// Drives a [`World`] through a (time, insertion order) priority queue.
pub struct Simulation {
    world: World,
    queue: BTreeMap<(Millis, u64), Event>,
    inserted: u64,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let mut world = World::new(config)?;
        let initial = world.initial_events();
        let mut sim = Self {
            world,
            queue: BTreeMap::new(),
            inserted: 0,
        };
        sim.schedule(initial);
        Ok(sim)
    }

    fn schedule(&mut self, events: Vec<(Millis, Event)>) {
        for (at, e) in events {
            self.queue.insert((at, self.inserted), e);
            self.inserted += 1;
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Processes the next event if it falls within the run. Returns false when done.
    pub fn advance(&mut self) -> Result<bool, SimError> {
        let Some(entry) = self.queue.first_entry() else {
            return Ok(false);
        };
        if entry.key().0 > self.world.duration_ms() {
            return Ok(false);
        }
        let ((at, _), event) = entry.remove_entry();
        let next = self.world.step(at, &event)?;
        self.schedule(next);
        Ok(true)
    }

    pub fn run_to_end(mut self) -> Result<World, SimError> {
        while self.advance()? {}
        Ok(self.world)
    }
}

/// Runs one mode only.
pub fn simulate(config: &SimConfig) -> Result<(RunOutcome, EventLog), SimError> {
    let world = Simulation::new(config.clone())?.run_to_end()?;
    Ok((world.outcome(), world.log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub arrivals_count: u64,
    pub determinism_digest: String,
    pub max_queue_len: u64,
    pub mean_wait_s: f64,
    pub p95_wait_s: f64,
    pub preconnect_savings_ms: f64,
    pub served_count: u64,
}

impl MetricsReport {
    pub fn to_canonical(&self) -> String {
        canonical::to_canonical(self).expect("report serializes")
    }
}

/// Mean paired difference (baseline minus pre-connect) over customers with a
/// first reply in both runs.
pub fn paired_savings(baseline: &RunOutcome, preconnect: &RunOutcome) -> f64 {
    let diffs: Vec<f64> = preconnect
        .ttfr_ms
        .iter()
        .filter_map(|(id, pre)| Some(*baseline.ttfr_ms.get(id)? as f64 - *pre as f64))
        .collect();
    if diffs.is_empty() {
        0.0
    } else {
        diffs.iter().sum::<f64>() / diffs.len() as f64
    }
}

fn percentile_nearest_rank(sorted: &[Millis], p: f64) -> Millis {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn counterpart(config: &SimConfig) -> SimConfig {
    SimConfig {
        baseline_mode: !config.baseline_mode,
        ..config.clone()
    }
}

/// Runs `config` plus its counterpart mode; the digest is that of `config`'s run.
pub fn run_with_log(config: &SimConfig) -> Result<(MetricsReport, EventLog), SimError> {
    let (primary, log) = simulate(config)?;
    let (other, _) = simulate(&counterpart(config))?;
    let (base, pre) = if config.baseline_mode {
        (&primary, &other)
    } else {
        (&other, &primary)
    };
    let waits = &primary.waits_ms;
    let mean_wait_s = if waits.is_empty() {
        0.0
    } else {
        waits.iter().sum::<u64>() as f64 / waits.len() as f64 / 1000.0
    };
    let report = MetricsReport {
        arrivals_count: primary.arrivals,
        determinism_digest: primary.digest.clone(),
        max_queue_len: primary.max_queue_len,
        mean_wait_s,
        p95_wait_s: percentile_nearest_rank(waits, 0.95) as f64 / 1000.0,
        preconnect_savings_ms: paired_savings(base, pre),
        served_count: primary.served,
    };
    Ok((report, log))
}

pub fn run(config: &SimConfig) -> Result<MetricsReport, SimError> {
    run_with_log(config).map(|(r, _)| r)
}

pub fn compare_baseline(config: &SimConfig) -> Result<f64, SimError> {
    let (pre, _) = simulate(&SimConfig {
        baseline_mode: false,
        ..config.clone()
    })?;
    let (base, _) = simulate(&SimConfig {
        baseline_mode: true,
        ..config.clone()
    })?;
    Ok(paired_savings(&base, &pre))
}

/// Throughput with the first `stations` floor stations open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub stations: usize,
    pub arrivals_count: u64,
    pub served_count: u64,
    pub served_per_hour: f64,
    pub mean_wait_s: f64,
}

/// Reruns `config` with 1, 2, ... of its floor stations. Reports throughput
/// only; nothing here models cost.
pub fn throughput_by_station_count(config: &SimConfig) -> Result<Vec<ScalingPoint>, SimError> {
    let hours = config.duration_s / 3600.0;
    (1..=config.floor.stations.len())
        .map(|k| {
            let mut cfg = config.clone();
            cfg.floor.stations.truncate(k);
            cfg.validate()?;
            let (out, _) = simulate(&cfg)?;
            let mean_wait_s = if out.waits_ms.is_empty() {
                0.0
            } else {
                out.waits_ms.iter().sum::<u64>() as f64 / out.waits_ms.len() as f64 / 1000.0
            };
            Ok(ScalingPoint {
                stations: k,
                arrivals_count: out.arrivals,
                served_count: out.served,
                served_per_hour: out.served as f64 / hours,
                mean_wait_s,
            })
        })
        .collect()
}

pub fn emit_metrics(report: &MetricsReport, path: &Path) -> Result<(), SimError> {
    std::fs::write(path, report.to_canonical() + "\n")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, SimError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(text.trim_end())
        .map_err(|e| SimError::InvalidConfig(format!("metrics file: {e}")))
}

#[cfg(test)]
mod tests;
