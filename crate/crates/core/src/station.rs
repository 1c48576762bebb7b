//! Agent stations: physically placed cameras with a fixed field of view.
//!
//! Frames are rendered synthetically (deterministic for a given station,
//! world and timestamp) at 480x360 and shipped as PNG.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::branch::AgentRole;
use crate::protocol::{CustomerId, StationId};
use crate::ranging::BeaconIdentity;
use crate::Millis;

pub const FRAME_WIDTH: u32 = 480;
pub const FRAME_HEIGHT: u32 = 360;
pub const FRAME_BYTES: usize = (FRAME_WIDTH * FRAME_HEIGHT * 3) as usize;

/// Side length of the square marker drawn per visible customer.
pub const MARKER_SIZE: u32 = 17;
const MARKER_COLOR: [u8; 3] = [250, 250, 250];

#[derive(Debug, Error)]
pub enum StationError {
    #[error("invalid station {0}: {1}")]
    InvalidStation(StationId, String),
    #[error(
        "frame must be {FRAME_WIDTH}x{FRAME_HEIGHT} RGB, got {width}x{height} with {len} bytes"
    )]
    InvalidFrame { width: u32, height: u32, len: usize },
    #[error("PNG encoding failed: {0}")]
    EncodingFailed(String),
    #[error("PNG decoding failed: {0}")]
    DecodingFailed(String),
    #[error("frame digest mismatch")]
    DigestMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_to(self, other: Point) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStation {
    pub station_id: StationId,
    pub position: Point,
    /// Facing direction, radians counter-clockwise from +x.
    pub orientation_rad: f64,
    /// Full cone angle.
    #[serde(default = "default_fov_angle")]
    pub fov_angle_rad: f64,
    #[serde(default = "default_fov_range")]
    pub fov_range_m: f64,
    pub role: AgentRole,
    pub beacon: BeaconIdentity,
}

fn default_fov_angle() -> f64 {
    PI / 2.0
}

fn default_fov_range() -> f64 {
    8.0
}

impl AgentStation {
    pub fn validate(&self) -> Result<(), StationError> {
        let bad = |m: &str| Err(StationError::InvalidStation(self.station_id, m.to_owned()));
        if !(self.fov_angle_rad > 0.0 && self.fov_angle_rad <= TAU) {
            return bad("fov angle must lie in (0, 2pi]");
        }
        if !(self.fov_range_m > 0.0) {
            return bad("fov range must be positive");
        }
        if self.station_id.0 != self.beacon.minor {
            return bad("station id must equal the beacon minor");
        }
        if !(self.position.x.is_finite()
            && self.position.y.is_finite()
            && self.orientation_rad.is_finite())
        {
            return bad("position and orientation must be finite");
        }
        Ok(())
    }

    /// Signed angle of `point` off the optical axis, clockwise positive
    /// (camera-right), in `(-pi, pi]`.
    pub fn bearing_to(&self, point: Point) -> f64 {
        let heading = (point.y - self.position.y).atan2(point.x - self.position.x);
        wrap_angle(self.orientation_rad - heading)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Boundaries are inclusive and the station's own position is visible.
pub fn in_field_of_view(station: &AgentStation, point: Point) -> bool {
    // Absorbs rounding in atan2 so the cone edge stays inclusive.
    const EDGE_EPS: f64 = 1e-12;
    let distance = station.position.distance_to(point);
    if distance > station.fov_range_m {
        return false;
    }
    distance == 0.0 || station.bearing_to(point).abs() <= station.fov_angle_rad / 2.0 + EDGE_EPS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// Row-major 8-bit RGB.
    pub pixels: Vec<u8>,
    pub captured_at: Millis,
}

impl Frame {
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        captured_at: Millis,
    ) -> Result<Self, StationError> {
        if width != FRAME_WIDTH || height != FRAME_HEIGHT || pixels.len() != FRAME_BYTES {
            return Err(StationError::InvalidFrame {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            captured_at,
        })
    }

    pub fn filled(color: [u8; 3], captured_at: Millis) -> Self {
        let pixels = color.iter().copied().cycle().take(FRAME_BYTES).collect();
        Self {
            width: FRAME_WIDTH,
            height: FRAME_HEIGHT,
            pixels,
            captured_at,
        }
    }

    pub fn pixel(&self, col: u32, row: u32) -> [u8; 3] {
        let i = ((row * self.width + col) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set_pixel(&mut self, col: u32, row: u32, rgb: [u8; 3]) {
        let i = ((row * self.width + col) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn check(&self) -> Result<(), StationError> {
        if self.width != FRAME_WIDTH
            || self.height != FRAME_HEIGHT
            || self.pixels.len() != FRAME_BYTES
        {
            return Err(StationError::InvalidFrame {
                width: self.width,
                height: self.height,
                len: self.pixels.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedFrame {
    #[serde(with = "crate::protocol::base64_bytes")]
    pub png_bytes: Vec<u8>,
    /// Lowercase hex SHA-256 of `png_bytes`.
    pub digest: String,
}

impl EncodedFrame {
    pub fn from_png(png_bytes: Vec<u8>) -> Self {
        let digest = hex::encode(Sha256::digest(&png_bytes));
        Self { png_bytes, digest }
    }

    pub fn digest_matches(&self) -> bool {
        hex::encode(Sha256::digest(&self.png_bytes)) == self.digest
    }
}

/// Background color keyed on the station id.
pub fn background_color(station_id: StationId) -> [u8; 3] {
    let id = station_id.0;
    [
        (32 + id.wrapping_mul(37) % 160) as u8,
        (32 + id.wrapping_mul(91) % 160) as u8,
        (32 + id.wrapping_mul(151) % 160) as u8,
    ]
}

/// Column of the marker center for a bearing: `-fov/2..=fov/2` maps linearly
/// onto `0..=479`. `None` when the bearing is outside the cone.
pub fn projected_column(station: &AgentStation, bearing: f64) -> Option<u32> {
    let half = station.fov_angle_rad / 2.0;
    if bearing.abs() > half + 1e-12 {
        return None;
    }
    let t = ((bearing + half) / station.fov_angle_rad).clamp(0.0, 1.0);
    Some((t * f64::from(FRAME_WIDTH - 1)).round() as u32)
}

/// Synthetic camera: a station-colored background with one marker per
/// visible customer, centered vertically, at the projected column.
#[derive(Debug, Clone)]
pub struct FrameSource {
    pub station: AgentStation,
}

impl FrameSource {
    pub fn new(station: AgentStation) -> Self {
        Self { station }
    }

    pub fn capture_frame(&self, visible: &[Point], t: Millis) -> Frame {
        capture_frame(&self.station, visible, t)
    }
}

pub fn capture_frame(station: &AgentStation, visible: &[Point], t: Millis) -> Frame {
    let mut frame = Frame::filled(background_color(station.station_id), t);
    let half = MARKER_SIZE / 2;
    let row_center = FRAME_HEIGHT / 2;
    for &p in visible {
        if !in_field_of_view(station, p) {
            continue;
        }
        let bearing = if p == station.position {
            0.0
        } else {
            station.bearing_to(p)
        };
        let Some(col_center) = projected_column(station, bearing) else {
            continue;
        };
        let cols = col_center.saturating_sub(half)..=(col_center + half).min(FRAME_WIDTH - 1);
        for col in cols {
            for row in row_center - half..=row_center + half {
                frame.set_pixel(col, row, MARKER_COLOR);
            }
        }
    }
    frame
}

pub fn encode_frame(frame: &Frame) -> Result<EncodedFrame, StationError> {
    frame.check()?;
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, frame.width, frame.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| StationError::EncodingFailed(e.to_string()))?;
        writer
            .write_image_data(&frame.pixels)
            .map_err(|e| StationError::EncodingFailed(e.to_string()))?;
    }
    Ok(EncodedFrame::from_png(out))
}

pub fn decode_frame(encoded: &EncodedFrame, captured_at: Millis) -> Result<Frame, StationError> {
    if !encoded.digest_matches() {
        return Err(StationError::DigestMismatch);
    }
    let decoder = png::Decoder::new(std::io::Cursor::new(&encoded.png_bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| StationError::DecodingFailed(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| StationError::DecodingFailed("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| StationError::DecodingFailed(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(StationError::DecodingFailed(format!(
            "expected 8-bit RGB, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Frame::new(info.width, info.height, buf, captured_at)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CustomerSighting {
    pub customer_id: CustomerId,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationReport {
    pub station_id: StationId,
    /// Sorted ascending.
    pub customer_ids_in_fov: Vec<CustomerId>,
}

pub fn observe(station: &AgentStation, world: &[CustomerSighting]) -> ObservationReport {
    let mut ids: Vec<CustomerId> = world
        .iter()
        .filter(|c| in_field_of_view(station, c.position))
        .map(|c| c.customer_id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ObservationReport {
        station_id: station.station_id,
        customer_ids_in_fov: ids,
    }
}

/// On-disk station layout (TOML):
///
/// ```toml
/// [[stations]]
/// station_id = 1
/// position = { x = 2.0, y = 0.0 }
/// orientation_rad = 1.5707963267948966
/// fov_angle_rad = 1.5707963267948966   # optional, default pi/2
/// fov_range_m = 8.0                    # optional, default 8
/// role = "CustomerService"
/// beacon = { region_uuid = "...", major = 1, minor = 1 }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StationLayout {
    #[serde(default)]
    pub stations: Vec<AgentStation>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use uuid::Uuid;

    fn station(orientation: f64) -> AgentStation {
        AgentStation {
            station_id: StationId(3),
            position: Point::new(0.0, 0.0),
            orientation_rad: orientation,
            fov_angle_rad: PI / 2.0,
            fov_range_m: 8.0,
            role: AgentRole::CustomerService,
            beacon: BeaconIdentity {
                region_uuid: Uuid::nil(),
                major: 1,
                minor: 3,
            },
        }
    }

    /// Independent geometry: dot-product cone test.
    fn cone_oracle(s: &AgentStation, p: Point) -> bool {
        let (dx, dy) = (p.x - s.position.x, p.y - s.position.y);
        let norm = dx.hypot(dy);
        if norm > s.fov_range_m {
            return false;
        }
        if norm == 0.0 {
            return true;
        }
        let cos_dev = (dx * s.orientation_rad.cos() + dy * s.orientation_rad.sin()) / norm;
        cos_dev >= (s.fov_angle_rad / 2.0).cos()
    }

    #[test]
    fn fov_examples() {
        let s = station(0.0);
        assert!(in_field_of_view(&s, s.position));
        assert!(!in_field_of_view(&s, Point::new(-1.0, 0.0)));
        assert!(in_field_of_view(&s, Point::new(2.0, 2.0)));
        assert!(!in_field_of_view(&s, Point::new(2.0, 2.001)));
        assert!(in_field_of_view(&s, Point::new(8.0, 0.0)));
        assert!(!in_field_of_view(&s, Point::new(8.0001, 0.0)));
    }

    #[test]
    fn fov_matches_dot_product_oracle_off_the_edges() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5000 {
            let mut s = station(rng.random_range(-PI..PI));
            s.fov_angle_rad = rng.random_range(0.1..TAU);
            s.position = Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let p = Point::new(rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0));
            let dev = s.bearing_to(p).abs();
            let near_edge = (dev - s.fov_angle_rad / 2.0).abs() < 1e-9
                || (s.position.distance_to(p) - s.fov_range_m).abs() < 1e-9;
            if !near_edge {
                assert_eq!(in_field_of_view(&s, p), cone_oracle(&s, p), "{s:?} {p:?}");
            }
        }
    }

    #[test]
    fn full_circle_fov_sees_behind() {
        let mut s = station(0.0);
        s.fov_angle_rad = TAU;
        assert!(in_field_of_view(&s, Point::new(-3.0, 0.0)));
    }

    #[test]
    fn empty_world_renders_background() {
        let s = station(0.0);
        let f = capture_frame(&s, &[], 5);
        assert_eq!(f, Frame::filled(background_color(s.station_id), 5));
    }

    #[test]
    fn capture_is_deterministic() {
        let s = station(0.3);
        let world = [Point::new(3.0, 1.0), Point::new(4.0, -0.5)];
        assert_eq!(
            capture_frame(&s, &world, 9).pixels,
            capture_frame(&s, &world, 9).pixels
        );
    }

    #[test]
    fn bearing_zero_lands_on_center_column() {
        let s = station(0.0);
        let f = capture_frame(&s, &[Point::new(3.0, 0.0)], 0);
        let bg = background_color(s.station_id);
        let row = FRAME_HEIGHT / 2;
        let lit: Vec<u32> = (0..FRAME_WIDTH)
            .filter(|&c| f.pixel(c, row) != bg)
            .collect();
        assert_eq!(lit.first(), Some(&(240 - MARKER_SIZE / 2)));
        assert_eq!(lit.last(), Some(&(240 + MARKER_SIZE / 2)));
        // Projection oracle: linear map of [-fov/2, fov/2] onto [0, 479].
        let oracle = |b: f64| ((b + PI / 4.0) / (PI / 2.0) * 479.0).round() as u32;
        assert_eq!(oracle(0.0), 240);
        for b in [-PI / 4.0, -0.3, 0.1, PI / 4.0] {
            assert_eq!(projected_column(&s, b), Some(oracle(b)));
        }
    }

    #[test]
    fn camera_right_maps_to_higher_columns() {
        let s = station(0.0);
        // Negative y is to the right of a camera looking along +x.
        assert!(s.bearing_to(Point::new(3.0, -1.0)) > 0.0);
    }

    #[test]
    fn black_frame_roundtrips() {
        let f = Frame::filled([0, 0, 0], 1);
        let enc = encode_frame(&f).unwrap();
        assert_eq!(&enc.png_bytes[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(decode_frame(&enc, 1).unwrap(), f);
    }

    #[test]
    fn random_frame_roundtrips() {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut pixels = vec![0u8; FRAME_BYTES];
        rng.fill_bytes(&mut pixels);
        let f = Frame::new(FRAME_WIDTH, FRAME_HEIGHT, pixels, 0).unwrap();
        let back = decode_frame(&encode_frame(&f).unwrap(), 0).unwrap();
        assert_eq!(back.pixels, f.pixels);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        assert!(matches!(
            Frame::new(100, 100, vec![0; 100 * 100 * 3], 0),
            Err(StationError::InvalidFrame { .. })
        ));
        let f = Frame {
            width: 100,
            height: 100,
            pixels: vec![0; 30000],
            captured_at: 0,
        };
        assert!(encode_frame(&f).is_err());
    }

    #[test]
    fn tampered_png_digest_is_caught() {
        let mut enc = encode_frame(&Frame::filled([1, 2, 3], 0)).unwrap();
        enc.png_bytes[40] ^= 1;
        assert!(matches!(
            decode_frame(&enc, 0),
            Err(StationError::DigestMismatch)
        ));
    }

    #[test]
    fn observe_excludes_customers_behind() {
        let s = station(0.0);
        let world = [
            CustomerSighting {
                customer_id: CustomerId(2),
                position: Point::new(1.0, 0.0),
            },
            CustomerSighting {
                customer_id: CustomerId(1),
                position: Point::new(-1.0, 0.0),
            },
        ];
        assert_eq!(observe(&s, &world).customer_ids_in_fov, vec![CustomerId(2)]);
        assert!(observe(&s, &[]).customer_ids_in_fov.is_empty());
    }

    #[test]
    fn station_invariants() {
        let mut s = station(0.0);
        s.validate().unwrap();
        s.beacon.minor = 9;
        assert!(s.validate().is_err());
        let mut s = station(0.0);
        s.fov_angle_rad = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn layout_parses_from_toml() {
        let text = r#"
            [[stations]]
            station_id = 1
            position = { x = 2.0, y = 0.5 }
            orientation_rad = 1.0
            role = "FinancialAdvisor"
            beacon = { region_uuid = "00000000-0000-0000-0000-000000000000", major = 7, minor = 1 }
        "#;
        let layout: StationLayout = toml::from_str(text).unwrap();
        let s = &layout.stations[0];
        assert_eq!(s.fov_angle_rad, PI / 2.0);
        assert_eq!(s.fov_range_m, 8.0);
        assert_eq!(s.role, AgentRole::FinancialAdvisor);
        s.validate().unwrap();
    }
}
