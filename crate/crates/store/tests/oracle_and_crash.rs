use std::fs::{self, OpenOptions};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wlds_core::model::{evaluate_warning, GeoPoint, NodeId, PipeSpec, TelemetryReading};
use wlds_store::{Durability, QueryRange, Store, StoreConfig, StoredRecord};

fn spec(n: u8) -> PipeSpec {
    PipeSpec {
        node_id: NodeId::from_bytes([n; 16]).unwrap(),
        pipe_height_cm: 100.0,
        set_limit_flow_lpm: 10.0,
        fill_threshold_cm: 50.0,
        gas_threshold_ppm: 300.0,
        location: GeoPoint::new(23.8, 90.4).unwrap(),
    }
}

fn random_reading(rng: &mut ChaCha8Rng, s: &PipeSpec, seq: u32) -> TelemetryReading {
    TelemetryReading {
        node_id: s.node_id,
        seq,
        timestamp_ms: rng.gen_range(0..5_000),
        flow_lpm: rng.gen_range(0.0..30.0),
        echo_time_us: rng.gen_range(0.0..7000.0),
        gas_ppm: rng.gen_range(0.0..600.0),
        position: s.location,
    }
}

fn flush_cfg(dir: &std::path::Path) -> StoreConfig {
    let mut c = StoreConfig::new(dir);
    c.durability = Durability::Flush;
    c.segment_max_bytes = 64 * 1024;
    c
}

/// Naive reference: every appended record in a Vec, queried by linear scan.
fn oracle_range(all: &[StoredRecord], q: &QueryRange) -> Vec<StoredRecord> {
    let mut v: Vec<_> = all
        .iter()
        .filter(|r| {
            r.reading.node_id == q.node_id
                && r.reading.timestamp_ms >= q.from_ms
                && r.reading.timestamp_ms < q.to_ms
        })
        .cloned()
        .collect();
    v.sort_by_key(|r| (r.reading.timestamp_ms, r.ingest_offset));
    v
}

#[test]
fn random_workload_matches_linear_scan() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::open(flush_cfg(tmp.path())).unwrap();
    let specs = [spec(1), spec(2), spec(3)];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut all = Vec::new();
    for i in 0..1000u32 {
        let s = &specs[rng.gen_range(0..specs.len())];
        let rec = store
            .append(&random_reading(&mut rng, s, i), s, 343.0)
            .unwrap();
        all.push(rec);
    }
    for _ in 0..100 {
        let s = &specs[rng.gen_range(0..specs.len())];
        let a = rng.gen_range(0..5_100);
        let b = rng.gen_range(0..5_100);
        let Ok(q) = QueryRange::new(s.node_id, a.min(b), a.max(b)) else {
            continue;
        };
        assert_eq!(store.range(&q).unwrap(), oracle_range(&all, &q));
    }
    for s in &specs {
        let expected = all
            .iter()
            .rfind(|r| r.reading.node_id == s.node_id)
            .cloned();
        assert_eq!(store.latest(&s.node_id), expected);
    }
}

#[test]
fn stored_evaluation_survives_threshold_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::open(flush_cfg(tmp.path())).unwrap();
    let mut s = spec(9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..200u32 {
        if i % 50 == 0 {
            s.fill_threshold_cm = rng.gen_range(10.0..90.0);
            s.set_limit_flow_lpm = rng.gen_range(1.0..20.0);
        }
        store
            .append(&random_reading(&mut rng, &s, i), &s, 343.0)
            .unwrap();
    }
    for rec in store.replay(&s.node_id).unwrap() {
        let archived = rec.spec.to_pipe_spec(&rec.reading);
        let again = evaluate_warning(&rec.reading, &archived, rec.spec.sonic_speed_mps).unwrap();
        assert_eq!(again, rec.evaluation);
    }
}

/// Truncating the active segment at any byte leaves exactly the records that
/// were completely written before the cut.
#[test]
fn truncation_at_every_byte_recovers_whole_records() {
    let tmp = tempfile::tempdir().unwrap();
    let s = spec(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut appended = Vec::new();
    let mut ends = Vec::new();
    let seg = tmp
        .path()
        .join(s.node_id.to_string())
        .join("0000000001.seg");
    {
        let store = Store::open(flush_cfg(tmp.path())).unwrap();
        for i in 0..6u32 {
            appended.push(
                store
                    .append(&random_reading(&mut rng, &s, i), &s, 343.0)
                    .unwrap(),
            );
            ends.push(fs::metadata(&seg).unwrap().len());
        }
    }
    let full = fs::read(&seg).unwrap();
    for cut in 0..=full.len() as u64 {
        fs::write(&seg, &full[..cut as usize]).unwrap();
        let store = Store::open(flush_cfg(tmp.path())).unwrap();
        let survivors = ends.iter().filter(|e| **e <= cut).count();
        assert_eq!(
            store.replay(&s.node_id).unwrap(),
            appended[..survivors].to_vec(),
            "cut at {cut}"
        );
        // The repaired file ends on a record boundary and accepts appends.
        let len = fs::metadata(&seg).unwrap().len();
        assert_eq!(
            len,
            if survivors == 0 {
                0
            } else {
                ends[survivors - 1]
            }
        );
        let next = store
            .append(&random_reading(&mut rng, &s, 99), &s, 343.0)
            .unwrap();
        assert_eq!(next.ingest_offset, survivors as u64);
    }
}

#[test]
fn garbage_tail_is_discarded() {
    let tmp = tempfile::tempdir().unwrap();
    let s = spec(6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    {
        let store = Store::open(flush_cfg(tmp.path())).unwrap();
        for i in 0..3u32 {
            store
                .append(&random_reading(&mut rng, &s, i), &s, 343.0)
                .unwrap();
        }
    }
    let seg = tmp
        .path()
        .join(s.node_id.to_string())
        .join("0000000001.seg");
    let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
    std::io::Write::write_all(&mut f, &[0xFF; 200]).unwrap();
    drop(f);
    let store = Store::open(flush_cfg(tmp.path())).unwrap();
    assert_eq!(store.count(&s.node_id), 3);
}

#[test]
fn concurrent_readers_see_whole_records() {
    let tmp = tempfile::tempdir().unwrap();
    let store = std::sync::Arc::new(Store::open(flush_cfg(tmp.path())).unwrap());
    let s = spec(8);
    let writer = {
        let store = store.clone();
        let s = s.clone();
        std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for i in 0..2000u32 {
                store
                    .append(&random_reading(&mut rng, &s, i), &s, 343.0)
                    .unwrap();
            }
        })
    };
    let q = QueryRange::new(s.node_id, 0, u64::MAX).unwrap();
    let mut last = 0;
    while !writer.is_finished() {
        let n = store.range(&q).unwrap().len();
        assert!(n >= last);
        last = n;
    }
    writer.join().unwrap();
    assert_eq!(store.range(&q).unwrap().len(), 2000);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

    /// Offsets are dense per node, ranges are sorted and inside their
    /// bounds, and a reopened store returns the same records.
    #[test]
    fn offsets_dense_and_ranges_sorted(
        picks in proptest::collection::vec((0u8..3, 0u64..2_000), 1..200),
        bounds in proptest::collection::vec((0u64..2_100, 0u64..2_100), 1..10),
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let specs = [spec(1), spec(2), spec(3)];
        let store = Store::open(flush_cfg(tmp.path())).unwrap();
        let mut counts = [0u64; 3];
        for (i, (n, ts)) in picks.iter().enumerate() {
            let s = &specs[*n as usize];
            let mut r = random_reading(&mut ChaCha8Rng::seed_from_u64(i as u64), s, i as u32);
            r.timestamp_ms = *ts;
            let rec = store.append(&r, s, 343.0).unwrap();
            proptest::prop_assert_eq!(rec.ingest_offset, counts[*n as usize]);
            counts[*n as usize] += 1;
        }
        drop(store);
        let store = Store::open(flush_cfg(tmp.path())).unwrap();
        for (k, s) in specs.iter().enumerate() {
            proptest::prop_assert_eq!(store.count(&s.node_id) as u64, counts[k]);
            for (a, b) in &bounds {
                let Ok(q) = QueryRange::new(s.node_id, *a.min(b), *a.max(b)) else { continue };
                let got = store.range(&q).unwrap();
                proptest::prop_assert!(got.iter().all(|r| q.from_ms <= r.reading.timestamp_ms && r.reading.timestamp_ms < q.to_ms));
                proptest::prop_assert!(got.windows(2).all(|w| (w[0].reading.timestamp_ms, w[0].ingest_offset) < (w[1].reading.timestamp_ms, w[1].ingest_offset)));
            }
        }
    }
}
