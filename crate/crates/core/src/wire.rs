//! Fixed 70-byte authenticated telemetry frame.
//!
//! ```text
//! off len field
//!   0   2 magic            0x57 0x4C ("WL")
//!   2   1 version          0x01
//!   3   1 flags            bit 0 = test frame, bits 1..7 reserved (0)
//!   4  16 node_id          UUID bytes
//!  20   4 seq              u32
//!  24   8 timestamp_ms     u64
//!  32   4 flow_mlpm        u32, flow_lpm * 1000 rounded half-up
//!  36   4 echo_time_us     u32, rounded half-up
//!  40   2 gas_ppm_x10      u16, gas_ppm * 10 rounded half-up
//!  42   4 lat_e7           i32, degrees * 1e7 rounded half away from zero
//!  46   4 lon_e7           i32
//!  50   4 crc32            CRC-32/ISO-HDLC of bytes 0..50
//!  54  16 auth_tag         HMAC-SHA256(key, bytes 0..54), first 16 bytes
//! ```
//!
//! All integers are big-endian. Decoding checks length, magic, version, CRC,
//! tag and then field values, reporting the first failure.

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::model::{GeoPoint, NodeId, TelemetryReading};

pub const FRAME_LEN: usize = 70;
pub const MAGIC: [u8; 2] = [0x57, 0x4C];
pub const VERSION: u8 = 0x01;
pub const FLAG_TEST: u8 = 0x01;
pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;

const CRC_OFFSET: usize = 50;
const TAG_OFFSET: usize = 54;

/// Largest flow that fits the 32-bit milliliter field.
pub const MAX_FLOW_LPM: f64 = u32::MAX as f64 / 1000.0;
/// Largest gas reading that fits the 16-bit decippm field.
pub const MAX_GAS_PPM: f64 = u16::MAX as f64 / 10.0;

type HmacSha256 = Hmac<Sha256>;

/// 32-byte shared secret used to authenticate frames.
#[derive(Clone, PartialEq, Eq)]
pub struct AuthKey([u8; KEY_LEN]);

impl AuthKey {
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, KeyLengthError> {
        let arr: [u8; KEY_LEN] = bytes.try_into().map_err(|_| KeyLengthError(bytes.len()))?;
        Ok(Self(arr))
    }

    pub fn from_hex(s: &str) -> Result<Self, KeyParseError> {
        let s = s.trim();
        if s.len() != KEY_LEN * 2 {
            return Err(KeyParseError(format!(
                "expected {} hex digits, got {}",
                KEY_LEN * 2,
                s.len()
            )));
        }
        let mut out = [0u8; KEY_LEN];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let pair =
                std::str::from_utf8(chunk).map_err(|_| KeyParseError("non-ascii key".into()))?;
            out[i] = u8::from_str_radix(pair, 16)
                .map_err(|_| KeyParseError(format!("bad hex digit pair {pair:?}")))?;
        }
        Ok(Self(out))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for AuthKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AuthKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("authentication key must be {KEY_LEN} bytes, got {0}")]
pub struct KeyLengthError(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid key: {0}")]
pub struct KeyParseError(String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("{field} out of range: {detail}")]
    Range { field: &'static str, detail: String },
}

/// Why a byte string was not accepted as a frame.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame length {0}, expected {FRAME_LEN}")]
    BadLength(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("crc mismatch")]
    BadCrc,
    #[error("authentication tag mismatch")]
    BadAuth,
    #[error("bad field {field}: {detail}")]
    BadField { field: &'static str, detail: String },
}

impl DecodeError {
    pub fn kind(&self) -> &'static str {
        match self {
            DecodeError::BadLength(_) => "BadLength",
            DecodeError::BadMagic(_) => "BadMagic",
            DecodeError::BadVersion(_) => "BadVersion",
            DecodeError::BadCrc => "BadCrc",
            DecodeError::BadAuth => "BadAuth",
            DecodeError::BadField { .. } => "BadField",
        }
    }
}

/// CRC-32/ISO-HDLC (reflected 0x04C11DB7, init and final xor 0xFFFFFFFF).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Full HMAC-SHA256 for any key length.
pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// First 16 bytes of HMAC-SHA256 under a 32-byte key.
pub fn auth_tag(bytes: &[u8], key: &[u8]) -> Result<[u8; TAG_LEN], KeyLengthError> {
    if key.len() != KEY_LEN {
        return Err(KeyLengthError(key.len()));
    }
    let full = hmac_sha256(key, bytes);
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&full[..TAG_LEN]);
    Ok(tag)
}

fn verify_tag(bytes: &[u8], key: &AuthKey, tag: &[u8]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    mac.update(bytes);
    mac.verify_truncated_left(tag).is_ok()
}

/// Fixed-point wire fields of one frame, before authentication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    pub flags: u8,
    pub node_id: NodeId,
    pub seq: u32,
    pub timestamp_ms: u64,
    pub flow_mlpm: u32,
    pub echo_time_us: u32,
    pub gas_ppm_x10: u16,
    pub lat_e7: i32,
    pub lon_e7: i32,
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

fn unsigned_field(
    field: &'static str,
    value: f64,
    scale: f64,
    max: u64,
) -> Result<u64, EncodeError> {
    if !value.is_finite() || value < 0.0 {
        return Err(EncodeError::Range {
            field,
            detail: format!("{value} is negative or not finite"),
        });
    }
    let q = round_half_up(value * scale);
    if q > max as f64 {
        return Err(EncodeError::Range {
            field,
            detail: format!("{q} overflows {} bits", 64 - max.leading_zeros()),
        });
    }
    Ok(q as u64)
}

fn degrees_e7(deg: f64) -> i32 {
    // |deg| <= 180, so |deg * 1e7| <= 1.8e9 < i32::MAX.
    (deg * 1e7).round() as i32
}

impl Frame {
    pub fn from_reading(reading: &TelemetryReading, flags: u8) -> Result<Self, EncodeError> {
        let flow_mlpm =
            unsigned_field("flow_mlpm", reading.flow_lpm, 1000.0, u32::MAX as u64)? as u32;
        let echo_time_us =
            unsigned_field("echo_time_us", reading.echo_time_us, 1.0, u32::MAX as u64)? as u32;
        let gas_ppm_x10 =
            unsigned_field("gas_ppm_x10", reading.gas_ppm, 10.0, u16::MAX as u64)? as u16;
        Ok(Frame {
            flags,
            node_id: reading.node_id,
            seq: reading.seq,
            timestamp_ms: reading.timestamp_ms,
            flow_mlpm,
            echo_time_us,
            gas_ppm_x10,
            lat_e7: degrees_e7(reading.position.lat_deg()),
            lon_e7: degrees_e7(reading.position.lon_deg()),
        })
    }

    pub fn is_test(&self) -> bool {
        self.flags & FLAG_TEST != 0
    }

    pub fn to_reading(&self) -> Result<TelemetryReading, DecodeError> {
        let position =
            GeoPoint::new(self.lat_e7 as f64 / 1e7, self.lon_e7 as f64 / 1e7).map_err(|e| {
                DecodeError::BadField {
                    field: "position",
                    detail: e.to_string(),
                }
            })?;
        Ok(TelemetryReading {
            node_id: self.node_id,
            seq: self.seq,
            timestamp_ms: self.timestamp_ms,
            flow_lpm: self.flow_mlpm as f64 / 1000.0,
            echo_time_us: self.echo_time_us as f64,
            gas_ppm: self.gas_ppm_x10 as f64 / 10.0,
            position,
        })
    }

    /// The 50 bytes covered by the CRC, before the trailer.
    fn body(&self) -> [u8; CRC_OFFSET] {
        let mut b = [0u8; CRC_OFFSET];
        b[0..2].copy_from_slice(&MAGIC);
        b[2] = VERSION;
        b[3] = self.flags;
        b[4..20].copy_from_slice(self.node_id.as_bytes());
        b[20..24].copy_from_slice(&self.seq.to_be_bytes());
        b[24..32].copy_from_slice(&self.timestamp_ms.to_be_bytes());
        b[32..36].copy_from_slice(&self.flow_mlpm.to_be_bytes());
        b[36..40].copy_from_slice(&self.echo_time_us.to_be_bytes());
        b[40..42].copy_from_slice(&self.gas_ppm_x10.to_be_bytes());
        b[42..46].copy_from_slice(&self.lat_e7.to_be_bytes());
        b[46..50].copy_from_slice(&self.lon_e7.to_be_bytes());
        b
    }

    pub fn encode(&self, key: &AuthKey) -> [u8; FRAME_LEN] {
        let mut out = [0u8; FRAME_LEN];
        out[..CRC_OFFSET].copy_from_slice(&self.body());
        let crc = crc32(&out[..CRC_OFFSET]);
        out[CRC_OFFSET..TAG_OFFSET].copy_from_slice(&crc.to_be_bytes());
        let tag = auth_tag(&out[..TAG_OFFSET], key.as_bytes()).expect("AuthKey is always 32 bytes");
        out[TAG_OFFSET..].copy_from_slice(&tag);
        out
    }

    pub fn decode(bytes: &[u8], key: &AuthKey) -> Result<Self, DecodeError> {
        if bytes.len() != FRAME_LEN {
            return Err(DecodeError::BadLength(bytes.len()));
        }
        if bytes[0..2] != MAGIC {
            return Err(DecodeError::BadMagic([bytes[0], bytes[1]]));
        }
        if bytes[2] != VERSION {
            return Err(DecodeError::BadVersion(bytes[2]));
        }
        let stored_crc = u32::from_be_bytes(bytes[CRC_OFFSET..TAG_OFFSET].try_into().unwrap());
        if crc32(&bytes[..CRC_OFFSET]) != stored_crc {
            return Err(DecodeError::BadCrc);
        }
        if !verify_tag(&bytes[..TAG_OFFSET], key, &bytes[TAG_OFFSET..]) {
            return Err(DecodeError::BadAuth);
        }
        Self::parse_fields(bytes)
    }

    fn parse_fields(b: &[u8]) -> Result<Self, DecodeError> {
        let flags = b[3];
        if flags & !FLAG_TEST != 0 {
            return Err(DecodeError::BadField {
                field: "flags",
                detail: format!("reserved bits set in {flags:#04x}"),
            });
        }
        let node_id = NodeId::from_bytes(b[4..20].try_into().unwrap()).map_err(|e| {
            DecodeError::BadField {
                field: "node_id",
                detail: e.to_string(),
            }
        })?;
        let lat_e7 = i32::from_be_bytes(b[42..46].try_into().unwrap());
        let lon_e7 = i32::from_be_bytes(b[46..50].try_into().unwrap());
        if !(-900_000_000..=900_000_000).contains(&lat_e7) {
            return Err(DecodeError::BadField {
                field: "lat_e7",
                detail: format!("{lat_e7} outside ±90°"),
            });
        }
        if !(-1_800_000_000..=1_800_000_000).contains(&lon_e7) {
            return Err(DecodeError::BadField {
                field: "lon_e7",
                detail: format!("{lon_e7} outside ±180°"),
            });
        }
        Ok(Frame {
            flags,
            node_id,
            seq: u32::from_be_bytes(b[20..24].try_into().unwrap()),
            timestamp_ms: u64::from_be_bytes(b[24..32].try_into().unwrap()),
            flow_mlpm: u32::from_be_bytes(b[32..36].try_into().unwrap()),
            echo_time_us: u32::from_be_bytes(b[36..40].try_into().unwrap()),
            gas_ppm_x10: u16::from_be_bytes(b[40..42].try_into().unwrap()),
            lat_e7,
            lon_e7,
        })
    }
}

/// Reads the node id straight from the header without verifying anything;
/// used to pick a per-node key before authentication.
pub fn peek_node_id(bytes: &[u8]) -> Option<NodeId> {
    let raw: [u8; 16] = bytes.get(4..20)?.try_into().ok()?;
    NodeId::from_bytes(raw).ok()
}

pub fn encode_frame(
    reading: &TelemetryReading,
    key: &AuthKey,
) -> Result<[u8; FRAME_LEN], EncodeError> {
    Ok(Frame::from_reading(reading, 0)?.encode(key))
}

pub fn decode_frame(bytes: &[u8], key: &AuthKey) -> Result<TelemetryReading, DecodeError> {
    Frame::decode(bytes, key)?.to_reading()
}

/// Rounds a reading to wire precision, exactly as a frame round trip would.
pub fn quantize(reading: &TelemetryReading) -> Result<TelemetryReading, EncodeError> {
    Ok(Frame::from_reading(reading, 0)?
        .to_reading()
        .expect("encoded positions are always in range"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::reading;

    fn key() -> AuthKey {
        AuthKey::new(std::array::from_fn(|i| i as u8))
    }

    #[test]
    fn frame_is_seventy_bytes() {
        let f = encode_frame(&reading(12.5, 40.0, 120.0), &key()).unwrap();
        assert_eq!(f.len(), FRAME_LEN);
        assert_eq!(&f[..3], &[0x57, 0x4C, 0x01]);
    }

    #[test]
    fn gas_overflow_names_field() {
        let r = reading(1.0, 40.0, 7000.0);
        let err = encode_frame(&r, &key()).unwrap_err();
        assert_eq!(
            err.to_string(),
            "gas_ppm_x10 out of range: 70000 overflows 16 bits"
        );
        let r = reading(MAX_FLOW_LPM + 1.0, 40.0, 1.0);
        assert!(matches!(
            encode_frame(&r, &key()),
            Err(EncodeError::Range {
                field: "flow_mlpm",
                ..
            })
        ));
    }

    #[test]
    fn quantization_rounds_half_up() {
        let mut r = reading(1.0005, 40.0, 0.05);
        r.echo_time_us = 2.5;
        let f = Frame::from_reading(&r, 0).unwrap();
        assert_eq!(f.flow_mlpm, 1001);
        assert_eq!(f.gas_ppm_x10, 1);
        assert_eq!(f.echo_time_us, 3);
    }

    #[test]
    fn decode_rejection_reasons() {
        let k = key();
        let good = encode_frame(&reading(12.5, 40.0, 120.0), &k).unwrap();
        assert_eq!(
            decode_frame(&good[..69], &k),
            Err(DecodeError::BadLength(69))
        );

        let mut bad = good;
        bad[0] = 0;
        assert!(matches!(
            decode_frame(&bad, &k),
            Err(DecodeError::BadMagic(_))
        ));

        let mut bad = good;
        bad[2] = 2;
        assert_eq!(decode_frame(&bad, &k), Err(DecodeError::BadVersion(2)));

        let mut bad = good;
        bad[30] ^= 0x10;
        assert_eq!(decode_frame(&bad, &k), Err(DecodeError::BadCrc));

        let other = AuthKey::new([9; 32]);
        assert_eq!(decode_frame(&good, &other), Err(DecodeError::BadAuth));
    }

    #[test]
    fn crc_and_mac_failure_reports_crc() {
        let k = key();
        let mut bad = encode_frame(&reading(12.5, 40.0, 120.0), &k).unwrap();
        bad[25] ^= 1;
        bad[60] ^= 1;
        assert_eq!(decode_frame(&bad, &k), Err(DecodeError::BadCrc));
    }

    #[test]
    fn authenticated_garbage_is_bad_field() {
        let k = key();
        let mut f = Frame::from_reading(&reading(1.0, 40.0, 1.0), 0).unwrap();
        f.flags = 0x80;
        assert!(matches!(
            Frame::decode(&f.encode(&k), &k),
            Err(DecodeError::BadField { field: "flags", .. })
        ));
        let mut f = Frame::from_reading(&reading(1.0, 40.0, 1.0), 0).unwrap();
        f.lat_e7 = 900_000_001;
        assert!(matches!(
            Frame::decode(&f.encode(&k), &k),
            Err(DecodeError::BadField {
                field: "lat_e7",
                ..
            })
        ));
    }

    #[test]
    fn test_flag_round_trips() {
        let k = key();
        let f = Frame::from_reading(&reading(1.0, 40.0, 1.0), FLAG_TEST).unwrap();
        assert!(Frame::decode(&f.encode(&k), &k).unwrap().is_test());
    }

    #[test]
    fn auth_tag_requires_32_byte_key() {
        assert_eq!(auth_tag(b"x", &[0u8; 20]), Err(KeyLengthError(20)));
        let a = auth_tag(b"data", &[1u8; 32]).unwrap();
        assert_eq!(a, auth_tag(b"data", &[1u8; 32]).unwrap());
        assert_ne!(a, auth_tag(b"data", &[2u8; 32]).unwrap());
    }

    #[test]
    fn key_hex_parsing() {
        let hex: String = (0..32).map(|i| format!("{i:02x}")).collect();
        assert_eq!(AuthKey::from_hex(&hex).unwrap(), key());
        assert!(AuthKey::from_hex("abcd").is_err());
        assert!(AuthKey::from_hex(&"zz".repeat(32)).is_err());
    }
}
