//! Simulated BLE beacon ranging.
//!
//! RSSI follows a log-distance path-loss model with caller-supplied Gaussian
//! shadowing. Samples are smoothed with an EMA in dB space, inverted to a
//! distance estimate, and fed to a hysteresis state machine over the zones
//! `Unknown < Far < Near < Immediate`. Zone changes are the events that drive
//! proactive engagement.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BeaconIdentity {
    pub region_uuid: Uuid,
    /// Branch id.
    pub major: u32,
    /// Station id.
    pub minor: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneThresholds {
    pub immediate_m: f64,
    pub near_m: f64,
    pub far_m: f64,
}

impl Default for ZoneThresholds {
    fn default() -> Self {
        Self {
            immediate_m: 1.0,
            near_m: 4.0,
            far_m: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RangingConfig {
    /// Received power at the 1 m reference distance.
    pub p0_dbm: f64,
    pub path_loss_exponent_n: f64,
    pub noise_sigma_db: f64,
    pub min_distance_m: f64,
    pub ema_alpha: f64,
    pub sample_hz: f64,
    pub zone_thresholds_m: ZoneThresholds,
    pub hysteresis_m: f64,
}

impl Default for RangingConfig {
    fn default() -> Self {
        Self {
            p0_dbm: -59.0,
            path_loss_exponent_n: 2.0,
            noise_sigma_db: 2.0,
            min_distance_m: 0.1,
            ema_alpha: 0.3,
            sample_hz: 10.0,
            zone_thresholds_m: ZoneThresholds::default(),
            hysteresis_m: 0.5,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid ranging config: {0}")]
pub struct RangingConfigError(pub String);

impl RangingConfig {
    pub fn validate(&self) -> Result<(), RangingConfigError> {
        let t = self.zone_thresholds_m;
        let err = |m: &str| Err(RangingConfigError(m.to_owned()));
        if !(0.0 < t.immediate_m && t.immediate_m < t.near_m && t.near_m < t.far_m) {
            return err("zone thresholds must be positive and strictly increasing");
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return err("ema_alpha must lie in (0, 1]");
        }
        let smallest_gap = t
            .immediate_m
            .min(t.near_m - t.immediate_m)
            .min(t.far_m - t.near_m);
        if !(self.hysteresis_m >= 0.0 && self.hysteresis_m < smallest_gap) {
            return err("hysteresis must be non-negative and below the smallest threshold gap");
        }
        if !(self.path_loss_exponent_n > 0.0) {
            return err("path loss exponent must be positive");
        }
        if !(self.min_distance_m > 0.0) {
            return err("min_distance_m must be positive");
        }
        if !(self.noise_sigma_db >= 0.0) {
            return err("noise sigma must be non-negative");
        }
        if !(self.sample_hz > 0.0) {
            return err("sample_hz must be positive");
        }
        Ok(())
    }

    /// Outer boundary of a zone; leaving it outward requires `boundary + hysteresis`.
    fn outer_boundary(&self, zone: ProximityZone) -> Option<f64> {
        let t = self.zone_thresholds_m;
        match zone {
            ProximityZone::Unknown => None,
            ProximityZone::Far => Some(t.far_m),
            ProximityZone::Near => Some(t.near_m),
            ProximityZone::Immediate => Some(t.immediate_m),
        }
    }
}

/// Ordered from farthest to closest; `Unknown` doubles as "out of range".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProximityZone {
    Unknown,
    Far,
    Near,
    Immediate,
}

impl ProximityZone {
    fn closer(self) -> Option<Self> {
        match self {
            ProximityZone::Unknown => Some(ProximityZone::Far),
            ProximityZone::Far => Some(ProximityZone::Near),
            ProximityZone::Near => Some(ProximityZone::Immediate),
            ProximityZone::Immediate => None,
        }
    }

    fn farther(self) -> Option<Self> {
        match self {
            ProximityZone::Unknown => None,
            ProximityZone::Far => Some(ProximityZone::Unknown),
            ProximityZone::Near => Some(ProximityZone::Far),
            ProximityZone::Immediate => Some(ProximityZone::Near),
        }
    }

    pub fn is_adjacent(self, other: Self) -> bool {
        self.closer() == Some(other) || self.farther() == Some(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximityEvent {
    pub station: BeaconIdentity,
    pub from_zone: ProximityZone,
    pub to_zone: ProximityZone,
    pub at: Millis,
    pub distance_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZoneTransition {
    pub from: ProximityZone,
    pub to: ProximityZone,
}

impl ZoneTransition {
    pub fn into_event(
        self,
        station: BeaconIdentity,
        at: Millis,
        distance_m: f64,
    ) -> ProximityEvent {
        ProximityEvent {
            station,
            from_zone: self.from,
            to_zone: self.to,
            at,
            distance_m,
        }
    }
}

/// Log-distance path loss: `p0 - 10 n log10(max(d, d_min)) + noise`.
pub fn rssi_at(distance_m: f64, config: &RangingConfig, noise_draw_db: f64) -> f64 {
    let d = distance_m.max(config.min_distance_m);
    config.p0_dbm - 10.0 * config.path_loss_exponent_n * d.log10() + noise_draw_db
}

/// Inverse of the noiseless path-loss model.
pub fn estimate_distance(rssi_dbm: f64, config: &RangingConfig) -> f64 {
    10f64.powf((config.p0_dbm - rssi_dbm) / (10.0 * config.path_loss_exponent_n))
}

pub fn smooth(prev_ema: Option<f64>, sample: f64, alpha: f64) -> f64 {
    match prev_ema {
        None => sample,
        Some(prev) => alpha * sample + (1.0 - alpha) * prev,
    }
}

/// One step of the zone state machine.
///
/// Moving closer by one zone needs `distance < boundary - hysteresis` of the
/// target zone; moving away needs `distance > boundary + hysteresis` of the
/// current zone. From `Unknown` the machine may land in any zone whose entry
/// bound is satisfied, taking the closest one.
pub fn classify(
    distance_m: f64,
    prev_zone: ProximityZone,
    config: &RangingConfig,
) -> (ProximityZone, Option<ZoneTransition>) {
    let h = config.hysteresis_m;
    let enters = |zone: ProximityZone| {
        config
            .outer_boundary(zone)
            .is_some_and(|boundary| distance_m < boundary - h)
    };

    let next = if prev_zone == ProximityZone::Unknown {
        [
            ProximityZone::Immediate,
            ProximityZone::Near,
            ProximityZone::Far,
        ]
        .into_iter()
        .find(|&z| enters(z))
        .unwrap_or(ProximityZone::Unknown)
    } else if let Some(closer) = prev_zone.closer().filter(|&z| enters(z)) {
        closer
    } else if config
        .outer_boundary(prev_zone)
        .is_some_and(|boundary| distance_m > boundary + h)
    {
        prev_zone.farther().unwrap_or(prev_zone)
    } else {
        prev_zone
    };

    let transition = (next != prev_zone).then_some(ZoneTransition {
        from: prev_zone,
        to: next,
    });
    (next, transition)
}

/// Per-(client, beacon) ranging state: EMA of RSSI plus the current zone.
#[derive(Debug, Clone)]
pub struct ProximityTracker {
    pub station: BeaconIdentity,
    ema_dbm: Option<f64>,
    zone: ProximityZone,
}

impl ProximityTracker {
    pub fn new(station: BeaconIdentity) -> Self {
        Self {
            station,
            ema_dbm: None,
            zone: ProximityZone::Unknown,
        }
    }

    pub fn zone(&self) -> ProximityZone {
        self.zone
    }

    pub fn smoothed_rssi(&self) -> Option<f64> {
        self.ema_dbm
    }

    /// Feeds one RSSI sample; returns an event if the zone changed.
    pub fn observe(
        &mut self,
        rssi_dbm: f64,
        at: Millis,
        config: &RangingConfig,
    ) -> Option<ProximityEvent> {
        let ema = smooth(self.ema_dbm, rssi_dbm, config.ema_alpha);
        self.ema_dbm = Some(ema);
        let distance = estimate_distance(ema, config);
        let (zone, transition) = classify(distance, self.zone, config);
        self.zone = zone;
        transition.map(|t| t.into_event(self.station, at, distance))
    }
}
