//! On-disk record layout.
//!
//! ```text
//! [u32 payload_len][payload][u32 crc32(payload)]        (big-endian)
//!
//! payload:
//!   0  70 reading as a wire frame (flags 0, zero key)
//!  70   8 ingest_offset       u64
//!  78   8 distance_cm         f64 bits
//!  86   8 garbage_level_cm    f64 bits
//!  94   1 anomalous           0 | 1
//!  95   1 state               0 = Normal, 1 = Warning
//!  96   1 causes              bit 0 ClogRule, bit 1 GasThreshold
//!  97   8 pipe_height_cm      f64 bits   ┐
//! 105   8 set_limit_flow_lpm  f64 bits   │ thresholds in force
//! 113   8 fill_threshold_cm   f64 bits   │ when the record was
//! 121   8 gas_threshold_ppm   f64 bits   │ appended
//! 129   8 sonic_speed_mps     f64 bits   ┘
//! ```

use serde::{Deserialize, Serialize};
use wlds_core::model::{
    AlertEvaluation, Causes, DerivedDepths, PipeSpec, TelemetryReading, WarningState,
};
use wlds_core::wire::{self, AuthKey, Frame, FRAME_LEN};

pub const PAYLOAD_LEN: usize = FRAME_LEN + 8 + 8 + 8 + 1 + 1 + 1 + 5 * 8;
pub const RECORD_LEN: usize = 4 + PAYLOAD_LEN + 4;

/// Readings are stored as frames under a fixed all-zero key; integrity on
/// disk comes from the record CRC.
fn storage_key() -> AuthKey {
    AuthKey::new([0; 32])
}

/// Thresholds and constants a record was evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchivedSpec {
    pub pipe_height_cm: f64,
    pub set_limit_flow_lpm: f64,
    pub fill_threshold_cm: f64,
    pub gas_threshold_ppm: f64,
    pub sonic_speed_mps: f64,
}

impl ArchivedSpec {
    pub fn new(spec: &PipeSpec, sonic_speed_mps: f64) -> Self {
        Self {
            pipe_height_cm: spec.pipe_height_cm,
            set_limit_flow_lpm: spec.set_limit_flow_lpm,
            fill_threshold_cm: spec.fill_threshold_cm,
            gas_threshold_ppm: spec.gas_threshold_ppm,
            sonic_speed_mps,
        }
    }

    /// Rebuilds a full spec for re-evaluation; `location` is not archived.
    pub fn to_pipe_spec(&self, reading: &TelemetryReading) -> PipeSpec {
        PipeSpec {
            node_id: reading.node_id,
            pipe_height_cm: self.pipe_height_cm,
            set_limit_flow_lpm: self.set_limit_flow_lpm,
            fill_threshold_cm: self.fill_threshold_cm,
            gas_threshold_ppm: self.gas_threshold_ppm,
            location: reading.position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub reading: TelemetryReading,
    pub derived: DerivedDepths,
    pub evaluation: AlertEvaluation,
    pub ingest_offset: u64,
    pub spec: ArchivedSpec,
}

pub(crate) fn encode(rec: &StoredRecord) -> Vec<u8> {
    let frame = Frame::from_reading(&rec.reading, 0)
        .expect("stored readings are quantized before encoding")
        .encode(&storage_key());
    let mut out = Vec::with_capacity(RECORD_LEN);
    out.extend_from_slice(&(PAYLOAD_LEN as u32).to_be_bytes());
    out.extend_from_slice(&frame);
    out.extend_from_slice(&rec.ingest_offset.to_be_bytes());
    out.extend_from_slice(&rec.derived.distance_cm.to_bits().to_be_bytes());
    out.extend_from_slice(&rec.derived.garbage_level_cm.to_bits().to_be_bytes());
    out.push(rec.derived.anomalous as u8);
    out.push(match rec.evaluation.state {
        WarningState::Normal => 0,
        WarningState::Warning => 1,
    });
    out.push(rec.evaluation.causes.to_bits());
    for v in [
        rec.spec.pipe_height_cm,
        rec.spec.set_limit_flow_lpm,
        rec.spec.fill_threshold_cm,
        rec.spec.gas_threshold_ppm,
        rec.spec.sonic_speed_mps,
    ] {
        out.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    let crc = wire::crc32(&out[4..]);
    out.extend_from_slice(&crc.to_be_bytes());
    debug_assert_eq!(out.len(), RECORD_LEN);
    out
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum ParseOutcome {
    Record(usize),
    /// Not enough bytes for a whole record.
    Torn,
    /// Bytes present but not a valid record.
    Corrupt(String),
}

/// Checks framing and CRC of the record starting at `buf[0]`.
pub(crate) fn frame_len(buf: &[u8]) -> ParseOutcome {
    if buf.len() < 4 {
        return ParseOutcome::Torn;
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len != PAYLOAD_LEN {
        return ParseOutcome::Corrupt(format!("payload length {len}"));
    }
    let total = 4 + len + 4;
    if buf.len() < total {
        return ParseOutcome::Torn;
    }
    let crc = u32::from_be_bytes(buf[4 + len..total].try_into().unwrap());
    if wire::crc32(&buf[4..4 + len]) != crc {
        return ParseOutcome::Corrupt("record crc mismatch".into());
    }
    ParseOutcome::Record(total)
}

fn f64_at(p: &[u8], at: usize) -> f64 {
    f64::from_bits(u64::from_be_bytes(p[at..at + 8].try_into().unwrap()))
}

/// Decodes a record whose framing has been checked by [`frame_len`].
pub(crate) fn decode(buf: &[u8]) -> Result<StoredRecord, String> {
    let p = &buf[4..4 + PAYLOAD_LEN];
    let reading = wire::decode_frame(&p[..FRAME_LEN], &storage_key()).map_err(|e| e.to_string())?;
    let ingest_offset = u64::from_be_bytes(p[70..78].try_into().unwrap());
    let derived = DerivedDepths {
        distance_cm: f64_at(p, 78),
        garbage_level_cm: f64_at(p, 86),
        anomalous: p[94] != 0,
    };
    let state = match p[95] {
        0 => WarningState::Normal,
        1 => WarningState::Warning,
        x => return Err(format!("bad state byte {x}")),
    };
    let causes = Causes::from_bits(p[96]).ok_or_else(|| format!("bad causes byte {}", p[96]))?;
    Ok(StoredRecord {
        reading,
        derived,
        evaluation: AlertEvaluation {
            state,
            causes,
            garbage_level_cm: derived.garbage_level_cm,
        },
        ingest_offset,
        spec: ArchivedSpec {
            pipe_height_cm: f64_at(p, 97),
            set_limit_flow_lpm: f64_at(p, 105),
            fill_threshold_cm: f64_at(p, 113),
            gas_threshold_ppm: f64_at(p, 121),
            sonic_speed_mps: f64_at(p, 129),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use wlds_core::model::{evaluate_warning, GeoPoint, NodeId};

    fn sample() -> StoredRecord {
        let spec = PipeSpec {
            node_id: NodeId::from_bytes([3; 16]).unwrap(),
            pipe_height_cm: 100.0,
            set_limit_flow_lpm: 10.0,
            fill_threshold_cm: 50.0,
            gas_threshold_ppm: 300.0,
            location: GeoPoint::new(23.8, 90.4).unwrap(),
        };
        let reading = TelemetryReading {
            node_id: spec.node_id,
            seq: 9,
            timestamp_ms: 123_456,
            flow_lpm: 2.5,
            echo_time_us: 1200.0,
            gas_ppm: 310.2,
            position: spec.location,
        };
        let evaluation = evaluate_warning(&reading, &spec, 343.0).unwrap();
        StoredRecord {
            derived: wlds_core::model::derive_depths(&reading, &spec, 343.0).unwrap(),
            reading,
            evaluation,
            ingest_offset: 77,
            spec: ArchivedSpec::new(&spec, 343.0),
        }
    }

    #[test]
    fn encode_decode_is_exact() {
        let rec = sample();
        let bytes = encode(&rec);
        assert_eq!(bytes.len(), RECORD_LEN);
        assert_eq!(frame_len(&bytes), ParseOutcome::Record(RECORD_LEN));
        assert_eq!(decode(&bytes).unwrap(), rec);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = encode(&sample());
        for cut in 0..bytes.len() {
            assert_eq!(frame_len(&bytes[..cut]), ParseOutcome::Torn, "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[50] ^= 4;
        assert!(matches!(frame_len(&bad), ParseOutcome::Corrupt(_)));
        let mut bad = bytes;
        bad[1] = 9;
        assert!(matches!(frame_len(&bad), ParseOutcome::Corrupt(_)));
    }
}
