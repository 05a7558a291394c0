//! Domain types for drainage telemetry and the pure formulas that turn raw
//! sensor values into clog levels and warning evaluations.
//!
//! Nothing in this module performs I/O. Every function is a pure function of
//! its arguments and may be called from any thread.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

/// Speed of sound in dry air at 20 °C, in meters per second.
pub const DEFAULT_SONIC_SPEED_MPS: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("node id must not be nil")]
    NilNodeId,
    #[error("invalid node id: {0}")]
    BadNodeId(String),
    #[error("latitude {0} outside [-90, 90] or not finite")]
    BadLatitude(f64),
    #[error("longitude {0} outside [-180, 180] or not finite")]
    BadLongitude(f64),
    #[error("echo time must be finite and >= 0, got {0}")]
    BadEchoTime(f64),
    #[error("sonic speed must be finite and > 0, got {0}")]
    BadSonicSpeed(f64),
    #[error("pipe height must be finite and > 0, got {0}")]
    BadPipeHeight(f64),
    #[error("distance must be finite and >= 0, got {0}")]
    BadDistance(f64),
    #[error("reading from node {reading} evaluated against spec for node {spec}")]
    NodeMismatch { reading: NodeId, spec: NodeId },
}

/// Identity of one sensor node. Never the nil UUID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Uuid", into = "Uuid")]
pub struct NodeId(Uuid);

impl NodeId {
    pub fn new(id: Uuid) -> Result<Self, ModelError> {
        if id.is_nil() {
            return Err(ModelError::NilNodeId);
        }
        Ok(Self(id))
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Result<Self, ModelError> {
        Self::new(Uuid::from_bytes(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        self.0.as_bytes()
    }

    pub fn uuid(&self) -> Uuid {
        self.0
    }
}

impl TryFrom<Uuid> for NodeId {
    type Error = ModelError;

    fn try_from(id: Uuid) -> Result<Self, Self::Error> {
        Self::new(id)
    }
}

impl From<NodeId> for Uuid {
    fn from(id: NodeId) -> Self {
        id.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.hyphenated().fmt(f)
    }
}

impl FromStr for NodeId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let id = Uuid::parse_str(s).map_err(|_| ModelError::BadNodeId(s.to_string()))?;
        Self::new(id)
    }
}

/// A WGS-84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeoPoint", into = "RawGeoPoint")]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl TryFrom<RawGeoPoint> for GeoPoint {
    type Error = ModelError;

    fn try_from(raw: RawGeoPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat_deg, raw.lon_deg)
    }
}

impl From<GeoPoint> for RawGeoPoint {
    fn from(p: GeoPoint) -> Self {
        RawGeoPoint {
            lat_deg: p.lat_deg,
            lon_deg: p.lon_deg,
        }
    }
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, ModelError> {
        if !lat_deg.is_finite() || !(-90.0..=90.0).contains(&lat_deg) {
            return Err(ModelError::BadLatitude(lat_deg));
        }
        if !lon_deg.is_finite() || !(-180.0..=180.0).contains(&lon_deg) {
            return Err(ModelError::BadLongitude(lon_deg));
        }
        Ok(Self { lat_deg, lon_deg })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }
}

/// Static per-node configuration: pipe geometry and alert thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeSpec {
    pub node_id: NodeId,
    /// Interior pipe height, cm.
    pub pipe_height_cm: f64,
    /// Minimum healthy flow, L/min.
    pub set_limit_flow_lpm: f64,
    /// Fill height above which low flow indicates a clog, cm.
    pub fill_threshold_cm: f64,
    pub gas_threshold_ppm: f64,
    pub location: GeoPoint,
}

/// One violated [`PipeSpec`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Returns every violated invariant of `spec`; an empty list means the spec
/// is well-formed.
pub fn validate_pipe_spec(spec: &PipeSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut positive = |field: &'static str, name: &str, v: f64| {
        if !v.is_finite() {
            out.push(Violation {
                field,
                message: format!("non-finite {name}"),
            });
            false
        } else if v <= 0.0 {
            out.push(Violation {
                field,
                message: format!("non-positive {name}"),
            });
            false
        } else {
            true
        }
    };
    let ph_ok = positive("pipe_height_cm", "pipe_height", spec.pipe_height_cm);
    positive("set_limit_flow_lpm", "setlimit", spec.set_limit_flow_lpm);
    let fill_ok = positive(
        "fill_threshold_cm",
        "fill_threshold",
        spec.fill_threshold_cm,
    );
    positive("gas_threshold_ppm", "gas_threshold", spec.gas_threshold_ppm);
    if ph_ok && fill_ok && spec.fill_threshold_cm >= spec.pipe_height_cm {
        out.push(Violation {
            field: "fill_threshold_cm",
            message: "fill_threshold ≥ pipe_height".to_string(),
        });
    }
    out
}

/// One timestamped sample from one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryReading {
    pub node_id: NodeId,
    pub seq: u32,
    pub timestamp_ms: u64,
    pub flow_lpm: f64,
    /// Ultrasonic round-trip time, µs.
    pub echo_time_us: f64,
    pub gas_ppm: f64,
    pub position: GeoPoint,
}

impl TelemetryReading {
    /// Names the first numeric field that is negative or not finite.
    pub fn invalid_field(&self) -> Option<&'static str> {
        [
            ("flow_lpm", self.flow_lpm),
            ("echo_time_us", self.echo_time_us),
            ("gas_ppm", self.gas_ppm),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite() || *v < 0.0)
        .map(|(name, _)| name)
    }
}

/// Distance and fill height derived from one echo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedDepths {
    /// Crown-to-surface distance, cm.
    pub distance_cm: f64,
    /// Fill height measured from the pipe floor, cm.
    pub garbage_level_cm: f64,
    /// The echo reached further than the pipe is tall.
    pub anomalous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cause {
    ClogRule,
    GasThreshold,
}

/// Set of warning causes. Serialized as a list of [`Cause`] names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "Vec<Cause>", into = "Vec<Cause>")]
pub struct Causes {
    bits: u8,
}

impl Causes {
    const CLOG: u8 = 0b01;
    const GAS: u8 = 0b10;

    pub const fn empty() -> Self {
        Self { bits: 0 }
    }

    pub fn insert(&mut self, cause: Cause) {
        self.bits |= Self::bit(cause);
    }

    pub fn contains(&self, cause: Cause) -> bool {
        self.bits & Self::bit(cause) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Cause> + '_ {
        [Cause::ClogRule, Cause::GasThreshold]
            .into_iter()
            .filter(|c| self.contains(*c))
    }

    /// Compact single-byte form used by the on-disk record format.
    pub fn to_bits(self) -> u8 {
        self.bits
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits & !(Self::CLOG | Self::GAS) == 0).then_some(Self { bits })
    }

    fn bit(cause: Cause) -> u8 {
        match cause {
            Cause::ClogRule => Self::CLOG,
            Cause::GasThreshold => Self::GAS,
        }
    }
}

impl FromIterator<Cause> for Causes {
    fn from_iter<I: IntoIterator<Item = Cause>>(iter: I) -> Self {
        let mut c = Causes::empty();
        for cause in iter {
            c.insert(cause);
        }
        c
    }
}

impl From<Vec<Cause>> for Causes {
    fn from(v: Vec<Cause>) -> Self {
        v.into_iter().collect()
    }
}

impl From<Causes> for Vec<Cause> {
    fn from(c: Causes) -> Self {
        c.iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WarningState {
    Normal,
    Warning,
}

/// Result of applying the warning rule to one reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertEvaluation {
    pub state: WarningState,
    pub causes: Causes,
    pub garbage_level_cm: f64,
}

impl AlertEvaluation {
    pub fn is_warning(&self) -> bool {
        self.state == WarningState::Warning
    }
}

/// Converts an ultrasonic round-trip time into a one-way distance in cm:
/// half of time × speed.
pub fn echo_to_distance(echo_time_us: f64, sonic_speed_mps: f64) -> Result<f64, ModelError> {
    if !echo_time_us.is_finite() || echo_time_us < 0.0 {
        return Err(ModelError::BadEchoTime(echo_time_us));
    }
    if !sonic_speed_mps.is_finite() || sonic_speed_mps <= 0.0 {
        return Err(ModelError::BadSonicSpeed(sonic_speed_mps));
    }
    let seconds = echo_time_us * 1e-6;
    Ok(0.5 * seconds * sonic_speed_mps * 100.0)
}

/// Inverse of [`echo_to_distance`]: the round-trip time, µs, for a one-way
/// distance in cm.
pub fn distance_to_echo(distance_cm: f64, sonic_speed_mps: f64) -> f64 {
    2.0 * (distance_cm / 100.0) / sonic_speed_mps * 1e6
}

/// Fill height from the pipe floor given the crown-to-surface distance.
///
/// A distance larger than the pipe is physically impossible; it is clamped to
/// an empty pipe and flagged rather than rejected.
pub fn clog_level(pipe_height_cm: f64, distance_cm: f64) -> Result<DerivedDepths, ModelError> {
    if !pipe_height_cm.is_finite() || pipe_height_cm <= 0.0 {
        return Err(ModelError::BadPipeHeight(pipe_height_cm));
    }
    if !distance_cm.is_finite() || distance_cm < 0.0 {
        return Err(ModelError::BadDistance(distance_cm));
    }
    if distance_cm > pipe_height_cm {
        return Ok(DerivedDepths {
            distance_cm,
            garbage_level_cm: 0.0,
            anomalous: true,
        });
    }
    Ok(DerivedDepths {
        distance_cm,
        garbage_level_cm: pipe_height_cm - distance_cm,
        anomalous: false,
    })
}

/// Echo time through distance and clog level.
pub fn derive_depths(
    reading: &TelemetryReading,
    spec: &PipeSpec,
    sonic_speed_mps: f64,
) -> Result<DerivedDepths, ModelError> {
    let distance = echo_to_distance(reading.echo_time_us, sonic_speed_mps)?;
    clog_level(spec.pipe_height_cm, distance)
}

/// The clog rule (low flow together with high fill) and the gas threshold.
/// Comparisons are strict.
pub fn evaluate_depths(
    reading: &TelemetryReading,
    spec: &PipeSpec,
    depths: &DerivedDepths,
) -> AlertEvaluation {
    let mut causes = Causes::empty();
    if reading.flow_lpm < spec.set_limit_flow_lpm
        && depths.garbage_level_cm > spec.fill_threshold_cm
    {
        causes.insert(Cause::ClogRule);
    }
    if reading.gas_ppm > spec.gas_threshold_ppm {
        causes.insert(Cause::GasThreshold);
    }
    AlertEvaluation {
        state: if causes.is_empty() {
            WarningState::Normal
        } else {
            WarningState::Warning
        },
        causes,
        garbage_level_cm: depths.garbage_level_cm,
    }
}

pub fn evaluate_warning(
    reading: &TelemetryReading,
    spec: &PipeSpec,
    sonic_speed_mps: f64,
) -> Result<AlertEvaluation, ModelError> {
    if reading.node_id != spec.node_id {
        return Err(ModelError::NodeMismatch {
            reading: reading.node_id,
            spec: spec.node_id,
        });
    }
    let depths = derive_depths(reading, spec, sonic_speed_mps)?;
    Ok(evaluate_depths(reading, spec, &depths))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn node(n: u8) -> NodeId {
        let mut b = [0u8; 16];
        b[15] = n;
        b[0] = 0xA0;
        NodeId::from_bytes(b).unwrap()
    }

    pub fn spec() -> PipeSpec {
        PipeSpec {
            node_id: node(1),
            pipe_height_cm: 100.0,
            set_limit_flow_lpm: 10.0,
            fill_threshold_cm: 50.0,
            gas_threshold_ppm: 300.0,
            location: GeoPoint::new(23.8103, 90.4125).unwrap(),
        }
    }

    pub fn reading(flow: f64, distance_cm: f64, gas: f64) -> TelemetryReading {
        TelemetryReading {
            node_id: node(1),
            seq: 1,
            timestamp_ms: 1_700_000_000_000,
            flow_lpm: flow,
            echo_time_us: distance_to_echo(distance_cm, DEFAULT_SONIC_SPEED_MPS),
            gas_ppm: gas,
            position: GeoPoint::new(23.8103, 90.4125).unwrap(),
        }
    }
}
