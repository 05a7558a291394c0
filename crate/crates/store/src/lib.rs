//! Durable append-only telemetry store.
//!
//! Layout under the data directory:
//!
//! ```text
//! <data_dir>/
//!   <node uuid>/
//!     0000000001.seg
//!     0000000002.seg     <- active segment (highest number)
//! ```
//!
//! Each segment is a sequence of fixed-size records (see [`record`]). On open
//! every segment is scanned; a torn or corrupt tail is truncated away so the
//! store exposes exactly the records whose append returned. The per-node
//! (timestamp, offset) index lives in memory and is rebuilt by that scan.
//!
//! Per-sensor tables are projections of [`StoredRecord`], see [`SensorTable`].

pub mod record;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wlds_core::model::{
    derive_depths, evaluate_depths, ModelError, NodeId, PipeSpec, TelemetryReading,
};
use wlds_core::wire::{self, EncodeError};

use record::ParseOutcome;
pub use record::{ArchivedSpec, StoredRecord, RECORD_LEN};

pub const DEFAULT_SEGMENT_BYTES: u64 = 8 * 1024 * 1024;
pub const DEFAULT_RETENTION_MS: u64 = 30 * 24 * 3600 * 1000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("reading not storable: {0}")]
    Encode(#[from] EncodeError),
    #[error("reading rejected: {0}")]
    Model(#[from] ModelError),
    #[error("inverted range: from_ms {from_ms} >= to_ms {to_ms}")]
    InvertedRange { from_ms: u64, to_ms: u64 },
    #[error("corrupt record in {path} at byte {pos}: {detail}")]
    Corrupt {
        path: PathBuf,
        pos: u64,
        detail: String,
    },
    #[error("store was opened read-only")]
    ReadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// fsync every append.
    Fsync,
    /// Hand every append to the OS; survives a process kill, not power loss.
    Flush,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub dir: PathBuf,
    pub segment_max_bytes: u64,
    pub retention_ms: u64,
    pub durability: Durability,
}

impl StoreConfig {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            segment_max_bytes: DEFAULT_SEGMENT_BYTES,
            retention_ms: DEFAULT_RETENTION_MS,
            durability: Durability::Fsync,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryRange {
    pub node_id: NodeId,
    pub from_ms: u64,
    pub to_ms: u64,
}

impl QueryRange {
    pub fn new(node_id: NodeId, from_ms: u64, to_ms: u64) -> Result<Self, StoreError> {
        if from_ms >= to_ms {
            return Err(StoreError::InvertedRange { from_ms, to_ms });
        }
        Ok(Self {
            node_id,
            from_ms,
            to_ms,
        })
    }
}

/// Logical per-sensor views over stored records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorTable {
    Flow,
    Depth,
    Gas,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSample {
    pub timestamp_ms: u64,
    pub ingest_offset: u64,
    pub value: f64,
}

impl SensorTable {
    pub fn project(self, rec: &StoredRecord) -> SensorSample {
        let value = match self {
            SensorTable::Flow => rec.reading.flow_lpm,
            SensorTable::Depth => rec.derived.garbage_level_cm,
            SensorTable::Gas => rec.reading.gas_ppm,
        };
        SensorSample {
            timestamp_ms: rec.reading.timestamp_ms,
            ingest_offset: rec.ingest_offset,
            value,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    timestamp_ms: u64,
    ingest_offset: u64,
    segment: u64,
    pos: u64,
}

#[derive(Debug)]
struct Segment {
    id: u64,
    path: PathBuf,
    file: File,
    len: u64,
    max_ts: u64,
}

#[derive(Debug)]
struct Partition {
    dir: PathBuf,
    segments: Vec<Segment>,
    /// Sorted by (timestamp_ms, ingest_offset).
    index: Vec<IndexEntry>,
    next_offset: u64,
    last: Option<StoredRecord>,
}

fn segment_name(id: u64) -> String {
    format!("{id:010}.seg")
}

impl Partition {
    fn open(dir: PathBuf, read_only: bool) -> Result<Self, StoreError> {
        let mut ids: Vec<u64> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".seg")?.parse().ok())
            .collect();
        ids.sort_unstable();
        let mut p = Partition {
            dir,
            segments: Vec::new(),
            index: Vec::new(),
            next_offset: 0,
            last: None,
        };
        for id in ids {
            p.load_segment(id, read_only)?;
        }
        p.index.sort_by_key(|e| (e.timestamp_ms, e.ingest_offset));
        Ok(p)
    }

    fn load_segment(&mut self, id: u64, read_only: bool) -> Result<(), StoreError> {
        let path = self.dir.join(segment_name(id));
        let buf = fs::read(&path)?;
        let mut pos = 0usize;
        let mut max_ts = 0;
        while pos < buf.len() {
            match record::frame_len(&buf[pos..]) {
                ParseOutcome::Record(n) => {
                    let rec = record::decode(&buf[pos..pos + n]).map_err(|detail| {
                        StoreError::Corrupt {
                            path: path.clone(),
                            pos: pos as u64,
                            detail,
                        }
                    })?;
                    max_ts = max_ts.max(rec.reading.timestamp_ms);
                    self.index.push(IndexEntry {
                        timestamp_ms: rec.reading.timestamp_ms,
                        ingest_offset: rec.ingest_offset,
                        segment: id,
                        pos: pos as u64,
                    });
                    self.next_offset = self.next_offset.max(rec.ingest_offset + 1);
                    self.last = Some(rec);
                    pos += n;
                }
                outcome => {
                    tracing::warn!(path = %path.display(), pos, dropped = buf.len() - pos, ?outcome, "discarding torn segment tail");
                    break;
                }
            }
        }
        let file = if read_only {
            File::open(&path)?
        } else {
            let f = OpenOptions::new().read(true).append(true).open(&path)?;
            if pos < buf.len() {
                f.set_len(pos as u64)?;
                f.sync_all()?;
            }
            f
        };
        self.segments.push(Segment {
            id,
            path,
            file,
            len: pos as u64,
            max_ts,
        });
        Ok(())
    }

    fn segment(&self, id: u64) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    fn append(
        &mut self,
        mut rec: StoredRecord,
        cfg: &StoreConfig,
    ) -> Result<StoredRecord, StoreError> {
        rec.ingest_offset = self.next_offset;
        let bytes = record::encode(&rec);
        let needs_new = match self.segments.last() {
            None => true,
            Some(s) => s.len > 0 && s.len + bytes.len() as u64 > cfg.segment_max_bytes,
        };
        if needs_new {
            let id = self.segments.last().map_or(1, |s| s.id + 1);
            let path = self.dir.join(segment_name(id));
            let file = OpenOptions::new()
                .read(true)
                .create(true)
                .append(true)
                .open(&path)?;
            if cfg.durability == Durability::Fsync {
                File::open(&self.dir)?.sync_all()?;
            }
            self.segments.push(Segment {
                id,
                path,
                file,
                len: 0,
                max_ts: 0,
            });
        }
        let seg = self.segments.last_mut().expect("active segment exists");
        let pos = seg.len;
        if let Err(e) = seg.file.write_all(&bytes) {
            // Drop whatever part of the record made it out.
            let _ = seg.file.set_len(pos);
            return Err(e.into());
        }
        if cfg.durability == Durability::Fsync {
            seg.file.sync_data()?;
        }
        seg.len += bytes.len() as u64;
        seg.max_ts = seg.max_ts.max(rec.reading.timestamp_ms);

        let entry = IndexEntry {
            timestamp_ms: rec.reading.timestamp_ms,
            ingest_offset: rec.ingest_offset,
            segment: seg.id,
            pos,
        };
        let at = self.index.partition_point(|e| {
            (e.timestamp_ms, e.ingest_offset) <= (entry.timestamp_ms, entry.ingest_offset)
        });
        self.index.insert(at, entry);
        self.next_offset += 1;
        self.last = Some(rec.clone());
        Ok(rec)
    }
}

/// Handles needed to read records without holding the partition lock.
struct ReadPlan {
    entries: Vec<IndexEntry>,
    files: HashMap<u64, (PathBuf, File)>,
}

impl ReadPlan {
    fn read(self) -> Result<Vec<StoredRecord>, StoreError> {
        let mut buf = vec![0u8; RECORD_LEN];
        self.entries
            .iter()
            .map(|e| {
                let (path, file) = &self.files[&e.segment];
                file.read_exact_at(&mut buf, e.pos)?;
                let corrupt = |detail: String| StoreError::Corrupt {
                    path: path.clone(),
                    pos: e.pos,
                    detail,
                };
                match record::frame_len(&buf) {
                    ParseOutcome::Record(_) => record::decode(&buf).map_err(corrupt),
                    other => Err(corrupt(format!("{other:?}"))),
                }
            })
            .collect()
    }
}

pub struct Store {
    cfg: StoreConfig,
    read_only: bool,
    partitions: RwLock<HashMap<NodeId, Arc<Mutex<Partition>>>>,
}

impl Store {
    /// Opens (creating if needed) a store, repairing torn segment tails.
    pub fn open(cfg: StoreConfig) -> Result<Self, StoreError> {
        fs::create_dir_all(&cfg.dir)?;
        Self::open_inner(cfg, false)
    }

    /// Opens an existing store for queries only; never modifies files.
    pub fn open_read_only(cfg: StoreConfig) -> Result<Self, StoreError> {
        Self::open_inner(cfg, true)
    }

    fn open_inner(cfg: StoreConfig, read_only: bool) -> Result<Self, StoreError> {
        let mut partitions = HashMap::new();
        for entry in fs::read_dir(&cfg.dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let Some(node) = entry
                .file_name()
                .to_str()
                .and_then(|n| n.parse::<NodeId>().ok())
            else {
                continue;
            };
            let p = Partition::open(entry.path(), read_only)?;
            partitions.insert(node, Arc::new(Mutex::new(p)));
        }
        Ok(Store {
            cfg,
            read_only,
            partitions: RwLock::new(partitions),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.dir
    }

    fn partition(&self, node: &NodeId) -> Option<Arc<Mutex<Partition>>> {
        self.partitions
            .read()
            .expect("partition map poisoned")
            .get(node)
            .cloned()
    }

    fn partition_or_create(&self, node: NodeId) -> Result<Arc<Mutex<Partition>>, StoreError> {
        if let Some(p) = self.partition(&node) {
            return Ok(p);
        }
        let mut map = self.partitions.write().expect("partition map poisoned");
        if let Some(p) = map.get(&node) {
            return Ok(Arc::clone(p));
        }
        let dir = self.cfg.dir.join(node.to_string());
        fs::create_dir_all(&dir)?;
        let p = Arc::new(Mutex::new(Partition::open(dir, false)?));
        map.insert(node, Arc::clone(&p));
        Ok(p)
    }

    /// Quantizes `reading` to wire precision, evaluates it against `spec` and
    /// persists the result. The record is durable when this returns.
    pub fn append(
        &self,
        reading: &TelemetryReading,
        spec: &PipeSpec,
        sonic_speed_mps: f64,
    ) -> Result<StoredRecord, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        if reading.node_id != spec.node_id {
            return Err(ModelError::NodeMismatch {
                reading: reading.node_id,
                spec: spec.node_id,
            }
            .into());
        }
        let reading = wire::quantize(reading)?;
        let derived = derive_depths(&reading, spec, sonic_speed_mps)?;
        let evaluation = evaluate_depths(&reading, spec, &derived);
        let rec = StoredRecord {
            reading,
            derived,
            evaluation,
            ingest_offset: 0,
            spec: ArchivedSpec::new(spec, sonic_speed_mps),
        };
        let part = self.partition_or_create(rec.reading.node_id)?;
        let mut guard = part.lock().expect("partition poisoned");
        guard.append(rec, &self.cfg)
    }

    pub fn latest(&self, node: &NodeId) -> Option<StoredRecord> {
        let part = self.partition(node)?;
        let guard = part.lock().expect("partition poisoned");
        guard.last.clone()
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        let mut v: Vec<_> = self
            .partitions
            .read()
            .expect("partition map poisoned")
            .keys()
            .copied()
            .collect();
        v.sort();
        v
    }

    pub fn count(&self, node: &NodeId) -> usize {
        self.partition(node)
            .map(|p| p.lock().expect("partition poisoned").index.len())
            .unwrap_or(0)
    }

    pub fn total_count(&self) -> usize {
        self.nodes().iter().map(|n| self.count(n)).sum()
    }

    fn plan(
        &self,
        node: &NodeId,
        pick: impl FnOnce(&[IndexEntry]) -> Vec<IndexEntry>,
    ) -> Result<ReadPlan, StoreError> {
        let Some(part) = self.partition(node) else {
            return Ok(ReadPlan {
                entries: Vec::new(),
                files: HashMap::new(),
            });
        };
        let guard = part.lock().expect("partition poisoned");
        let entries = pick(&guard.index);
        let mut files = HashMap::new();
        for e in &entries {
            if let std::collections::hash_map::Entry::Vacant(slot) = files.entry(e.segment) {
                let seg = guard
                    .segment(e.segment)
                    .expect("index points at a live segment");
                slot.insert((seg.path.clone(), seg.file.try_clone()?));
            }
        }
        Ok(ReadPlan { entries, files })
    }

    /// Records with `from_ms <= timestamp_ms < to_ms`, ordered by
    /// (timestamp_ms, ingest_offset).
    pub fn range(&self, q: &QueryRange) -> Result<Vec<StoredRecord>, StoreError> {
        if q.from_ms >= q.to_ms {
            return Err(StoreError::InvertedRange {
                from_ms: q.from_ms,
                to_ms: q.to_ms,
            });
        }
        self.plan(&q.node_id, |index| {
            let lo = index.partition_point(|e| e.timestamp_ms < q.from_ms);
            let hi = index.partition_point(|e| e.timestamp_ms < q.to_ms);
            index[lo..hi].to_vec()
        })?
        .read()
    }

    pub fn table(
        &self,
        q: &QueryRange,
        table: SensorTable,
    ) -> Result<Vec<SensorSample>, StoreError> {
        Ok(self.range(q)?.iter().map(|r| table.project(r)).collect())
    }

    /// Every record of a node in ingest order.
    pub fn replay(&self, node: &NodeId) -> Result<Vec<StoredRecord>, StoreError> {
        self.plan(node, |index| {
            let mut v = index.to_vec();
            v.sort_by_key(|e| e.ingest_offset);
            v
        })?
        .read()
    }

    /// Writes a node's records as JSON lines in ingest order.
    pub fn dump_jsonl<W: Write>(&self, node: &NodeId, mut out: W) -> Result<usize, StoreError> {
        let records = self.replay(node)?;
        for r in &records {
            serde_json::to_writer(&mut out, r).map_err(io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(records.len())
    }

    /// Deletes whole non-active segments whose newest record is older than
    /// the retention horizon. Returns the number of segments removed.
    pub fn enforce_retention(&self, now_ms: u64) -> Result<usize, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        let horizon = now_ms.saturating_sub(self.cfg.retention_ms);
        let parts: Vec<_> = self
            .partitions
            .read()
            .expect("partition map poisoned")
            .values()
            .cloned()
            .collect();
        let mut removed = 0;
        for part in parts {
            let mut guard = part.lock().expect("partition poisoned");
            let active = guard.segments.last().map(|s| s.id);
            let expired: Vec<u64> = guard
                .segments
                .iter()
                .filter(|s| Some(s.id) != active && s.max_ts < horizon)
                .map(|s| s.id)
                .collect();
            for id in expired {
                let seg = guard.segment(id).expect("listed above");
                fs::remove_file(&seg.path)?;
                guard.segments.retain(|s| s.id != id);
                guard.index.retain(|e| e.segment != id);
                removed += 1;
            }
        }
        Ok(removed)
    }
}
