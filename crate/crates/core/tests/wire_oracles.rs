//! Wire codec checked against independent reference routes: a bitwise CRC,
//! HMAC assembled by hand from SHA-256, published test vectors and frames
//! produced by a separate implementation.

use std::path::PathBuf;

use proptest::prelude::*;
use sha2::{Digest, Sha256};
use wlds_core::wire::{self, auth_tag, crc32, hmac_sha256, AuthKey, DecodeError, Frame, FRAME_LEN};
use wlds_core::{GeoPoint, NodeId, TelemetryReading};

/// Bit-at-a-time reflected CRC-32, no tables.
fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// HMAC per its definition: H((K ^ opad) || H((K ^ ipad) || m)).
fn hmac_by_hand(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let inner = Sha256::new()
        .chain_update(k.map(|b| b ^ 0x36))
        .chain_update(msg)
        .finalize();
    Sha256::new()
        .chain_update(k.map(|b| b ^ 0x5c))
        .chain_update(inner)
        .finalize()
        .into()
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/frames")
}

fn golden_key() -> AuthKey {
    AuthKey::from_hex(&std::fs::read_to_string(fixtures().join("golden-key.hex")).unwrap()).unwrap()
}

#[test]
fn crc_check_values() {
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32_bitwise(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32(b""), 0);
    assert_eq!(crc32_bitwise(b""), 0);
}

#[test]
fn hmac_rfc4231_case_1() {
    let key = [0x0b; 20];
    let expected = "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7";
    let ours = hmac_sha256(&key, b"Hi There");
    assert_eq!(hex(&ours), expected);
    assert_eq!(hex(&hmac_by_hand(&key, b"Hi There")), expected);
}

#[test]
fn hmac_rfc4231_case_2() {
    let expected = "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843";
    assert_eq!(
        hex(&hmac_sha256(b"Jefe", b"what do ya want for nothing?")),
        expected
    );
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Lays the frame out field by field from the JSON fixture.
fn manual_layout(doc: &serde_json::Value, flags: u8, key: &AuthKey) -> Vec<u8> {
    let node: NodeId = doc["node_id"].as_str().unwrap().parse().unwrap();
    let mut b = vec![0x57, 0x4C, 0x01, flags];
    b.extend_from_slice(node.as_bytes());
    b.extend_from_slice(&(doc["seq"].as_u64().unwrap() as u32).to_be_bytes());
    b.extend_from_slice(&doc["timestamp_ms"].as_u64().unwrap().to_be_bytes());
    b.extend_from_slice(
        &((doc["flow_lpm"].as_f64().unwrap() * 1000.0).round() as u32).to_be_bytes(),
    );
    b.extend_from_slice(&(doc["echo_time_us"].as_f64().unwrap().round() as u32).to_be_bytes());
    b.extend_from_slice(&((doc["gas_ppm"].as_f64().unwrap() * 10.0).round() as u16).to_be_bytes());
    let pos = &doc["position"];
    b.extend_from_slice(&((pos["lat_deg"].as_f64().unwrap() * 1e7).round() as i32).to_be_bytes());
    b.extend_from_slice(&((pos["lon_deg"].as_f64().unwrap() * 1e7).round() as i32).to_be_bytes());
    assert_eq!(b.len(), 50);
    let crc = crc32_bitwise(&b);
    b.extend_from_slice(&crc.to_be_bytes());
    let tag = hmac_by_hand(key.as_bytes(), &b);
    b.extend_from_slice(&tag[..16]);
    b
}

#[test]
fn golden_frames_decode_bit_exactly() {
    let key = golden_key();
    for (i, flags) in [(1, 0u8), (2, 1u8)] {
        let bin = std::fs::read(fixtures().join(format!("golden-{i}.bin"))).unwrap();
        let hex_text = std::fs::read_to_string(fixtures().join(format!("golden-{i}.hex"))).unwrap();
        assert_eq!(hex(&bin), hex_text.trim());
        let doc: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(fixtures().join(format!("golden-{i}.json"))).unwrap(),
        )
        .unwrap();
        let expected: TelemetryReading = serde_json::from_value(doc.clone()).unwrap();

        let frame = Frame::decode(&bin, &key).unwrap();
        assert_eq!(frame.flags, flags);
        assert_eq!(frame.to_reading().unwrap(), expected, "golden-{i}");
        assert_eq!(
            Frame::from_reading(&expected, flags)
                .unwrap()
                .encode(&key)
                .to_vec(),
            bin
        );
        assert_eq!(manual_layout(&doc, flags, &key), bin);
    }
}

fn arb_reading() -> impl Strategy<Value = TelemetryReading> {
    (
        any::<[u8; 16]>(),
        any::<u32>(),
        any::<u64>(),
        0.0f64..=wire::MAX_FLOW_LPM - 0.001,
        0.0f64..4.0e9,
        0.0f64..=wire::MAX_GAS_PPM - 0.1,
        -90.0f64..=90.0,
        -180.0f64..=180.0,
    )
        .prop_filter_map("nil node", |(id, seq, ts, flow, echo, gas, lat, lon)| {
            Some(TelemetryReading {
                node_id: NodeId::from_bytes(id).ok()?,
                seq,
                timestamp_ms: ts,
                flow_lpm: flow,
                echo_time_us: echo,
                gas_ppm: gas,
                position: GeoPoint::new(lat, lon).ok()?,
            })
        })
}

proptest! {
    #[test]
    fn crc_matches_bitwise_reference(data in proptest::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(crc32(&data), crc32_bitwise(&data));
    }

    #[test]
    fn crc_sees_every_single_bit_flip(data in proptest::collection::vec(any::<u8>(), 1..100), bit in any::<usize>()) {
        let mut flipped = data.clone();
        let bit = bit % (data.len() * 8);
        flipped[bit / 8] ^= 1 << (bit % 8);
        prop_assert_ne!(crc32(&data), crc32(&flipped));
    }

    #[test]
    fn tag_matches_hand_hmac(data in proptest::collection::vec(any::<u8>(), 0..200), key in any::<[u8; 32]>()) {
        let tag = auth_tag(&data, &key).unwrap();
        prop_assert_eq!(&tag[..], &hmac_by_hand(&key, &data)[..16]);
    }

    #[test]
    fn distinct_keys_give_distinct_tags(data in proptest::collection::vec(any::<u8>(), 0..64), a in any::<[u8; 32]>(), b in any::<[u8; 32]>()) {
        prop_assume!(a != b);
        prop_assert_ne!(auth_tag(&data, &a).unwrap(), auth_tag(&data, &b).unwrap());
    }

    #[test]
    fn round_trip_within_quantization(r in arb_reading(), key in any::<[u8; 32]>()) {
        let key = AuthKey::new(key);
        let bytes = wire::encode_frame(&r, &key).unwrap();
        prop_assert_eq!(bytes.len(), FRAME_LEN);
        let back = wire::decode_frame(&bytes, &key).unwrap();
        prop_assert_eq!(back.node_id, r.node_id);
        prop_assert_eq!(back.seq, r.seq);
        prop_assert_eq!(back.timestamp_ms, r.timestamp_ms);
        prop_assert!((back.flow_lpm - r.flow_lpm).abs() <= 0.0005 + 1e-9);
        prop_assert!((back.echo_time_us - r.echo_time_us).abs() <= 0.5 + 1e-9);
        prop_assert!((back.gas_ppm - r.gas_ppm).abs() <= 0.05 + 1e-9);
        prop_assert!((back.position.lat_deg() - r.position.lat_deg()).abs() <= 0.5e-7 + 1e-12);
        prop_assert!((back.position.lon_deg() - r.position.lon_deg()).abs() <= 0.5e-7 + 1e-12);
        // Re-encoding a decoded frame is exact.
        prop_assert_eq!(wire::encode_frame(&back, &key).unwrap(), bytes);
    }

    #[test]
    fn any_single_byte_mutation_is_rejected(r in arb_reading(), pos in 0usize..FRAME_LEN, delta in 1u8..=255) {
        let key = AuthKey::new([0x42; 32]);
        let mut bytes = wire::encode_frame(&r, &key).unwrap();
        bytes[pos] = bytes[pos].wrapping_add(delta);
        let err = wire::decode_frame(&bytes, &key).unwrap_err();
        prop_assert!(matches!(err, DecodeError::BadMagic(_) | DecodeError::BadVersion(_) | DecodeError::BadCrc | DecodeError::BadAuth));
    }
}
