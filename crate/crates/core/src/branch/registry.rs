use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::protocol::StationId;
use crate::station::{AgentStation, ObservationReport};
use crate::Millis;

/// Missed heartbeats before a station counts as unavailable.
pub const MISSED_HEARTBEATS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisteredStation {
    pub station: AgentStation,
    pub registered_at: Millis,
    pub last_heartbeat: Millis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationStatus {
    pub station: AgentStation,
    pub available: bool,
    pub last_heartbeat: Millis,
}

#[derive(Debug, Clone)]
pub struct StationRegistry {
    stations: BTreeMap<StationId, RegisteredStation>,
    heartbeat_interval_ms: u64,
}

impl StationRegistry {
    pub fn new(heartbeat_interval_ms: u64) -> Self {
        Self {
            stations: BTreeMap::new(),
            heartbeat_interval_ms,
        }
    }

    /// Returns false if the id is already taken.
    pub fn register(&mut self, station: AgentStation, now: Millis) -> bool {
        if self.stations.contains_key(&station.station_id) {
            return false;
        }
        self.stations.insert(
            station.station_id,
            RegisteredStation {
                station,
                registered_at: now,
                last_heartbeat: now,
            },
        );
        true
    }

    pub fn heartbeat(&mut self, id: StationId, now: Millis) -> bool {
        match self.stations.get_mut(&id) {
            Some(s) => {
                s.last_heartbeat = s.last_heartbeat.max(now);
                true
            }
            None => false,
        }
    }

    pub fn get(&self, id: StationId) -> Option<&AgentStation> {
        self.stations.get(&id).map(|s| &s.station)
    }

    pub fn contains(&self, id: StationId) -> bool {
        self.stations.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn is_available(&self, id: StationId, now: Millis) -> bool {
        self.stations.get(&id).is_some_and(|s| {
            now.saturating_sub(s.last_heartbeat) < MISSED_HEARTBEATS * self.heartbeat_interval_ms
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &AgentStation> {
        self.stations.values().map(|s| &s.station)
    }

    pub fn available(&self, now: Millis) -> impl Iterator<Item = &AgentStation> {
        self.stations
            .values()
            .filter(move |s| self.is_available(s.station.station_id, now))
            .map(|s| &s.station)
    }

    pub fn status(&self, now: Millis) -> Vec<StationStatus> {
        self.stations
            .values()
            .map(|s| StationStatus {
                station: s.station.clone(),
                available: self.is_available(s.station.station_id, now),
                last_heartbeat: s.last_heartbeat,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrowdReport {
    /// `None` marks a station without a fresh report.
    pub counts: BTreeMap<StationId, Option<usize>>,
    /// Age of the oldest report that contributed a count.
    pub staleness_ms: Option<u64>,
}

/// Per-station head counts from the latest observation reports; a report
/// older than twice the reporting interval does not count.
pub fn crowd_levels(
    stations: impl IntoIterator<Item = StationId>,
    latest: &BTreeMap<StationId, (ObservationReport, Millis)>,
    report_interval_ms: u64,
    now: Millis,
) -> CrowdReport {
    let mut counts = BTreeMap::new();
    let mut staleness_ms: Option<u64> = None;
    for id in stations {
        let fresh = latest
            .get(&id)
            .map(|(report, at)| (report, now.saturating_sub(*at)))
            .filter(|(_, age)| *age <= 2 * report_interval_ms);
        let count = fresh.map(|(report, age)| {
            staleness_ms = Some(staleness_ms.map_or(age, |s| s.max(age)));
            report.customer_ids_in_fov.len()
        });
        counts.insert(id, count);
    }
    CrowdReport {
        counts,
        staleness_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::AgentRole;
    use crate::protocol::CustomerId;
    use crate::ranging::BeaconIdentity;
    use crate::station::Point;

    fn station(id: u32) -> AgentStation {
        AgentStation {
            station_id: StationId(id),
            position: Point::new(id as f64, 0.0),
            orientation_rad: 0.0,
            fov_angle_rad: 1.0,
            fov_range_m: 5.0,
            role: AgentRole::CustomerService,
            beacon: BeaconIdentity {
                region_uuid: uuid::Uuid::nil(),
                major: 1,
                minor: id,
            },
        }
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut r = StationRegistry::new(1000);
        assert!(r.register(station(1), 0));
        assert!(!r.register(station(1), 5));
        assert!(r.register(station(2), 5));
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn three_missed_heartbeats_mark_unavailable() {
        let mut r = StationRegistry::new(1000);
        r.register(station(1), 0);
        assert!(r.is_available(StationId(1), 2999));
        assert!(!r.is_available(StationId(1), 3000));
        r.heartbeat(StationId(1), 3000);
        assert!(r.is_available(StationId(1), 3500));
        assert!(!r.heartbeat(StationId(9), 0));
    }

    #[test]
    fn crowd_counts_and_staleness() {
        let report = |id: u32, n: u64| ObservationReport {
            station_id: StationId(id),
            customer_ids_in_fov: (0..n).map(CustomerId).collect(),
        };
        let ids = [StationId(1), StationId(2), StationId(3)];
        let none = crowd_levels(ids, &BTreeMap::new(), 1000, 0);
        assert!(none.counts.values().all(Option::is_none));
        assert_eq!(none.staleness_ms, None);

        let latest = BTreeMap::from([
            (StationId(1), (report(1, 3), 9_000)),
            (StationId(2), (report(2, 1), 7_500)),
            (StationId(3), (report(3, 4), 1_000)),
        ]);
        let c = crowd_levels(ids, &latest, 1000, 9_400);
        assert_eq!(c.counts[&StationId(1)], Some(3));
        assert_eq!(c.counts[&StationId(2)], Some(1));
        assert_eq!(c.counts[&StationId(3)], None);
        assert_eq!(c.staleness_ms, Some(1_900));
    }
}
