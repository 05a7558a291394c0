//! In-process state shared by the ingest listener and the HTTP gateway.
//!
//! Each configured node has a slot holding its current spec, its debounce
//! state and the last accepted seq. Committing a reading happens entirely
//! under that slot's lock: admit, append, feed the alert machine, publish
//! events, queue dispatch. That serializes everything per node while
//! different nodes proceed in parallel.
//!
//! Files kept next to the store in the data directory:
//! * `alerts.journal.jsonl`: acks and dispatch outcomes, one JSON per line.
//! * `thresholds.json`: thresholds changed through the API, by node.
//!
//! Alert transitions themselves are not journaled; they are rebuilt on
//! startup by replaying the stored evaluations through the debounce machine.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::Notify;
use wlds_core::alert::{
    Ack, AlertInput, AlertTransition, DebounceConfig, Direction, NodeAlertState,
};
use wlds_core::geo::OfficeRegistry;
use wlds_core::model::{
    validate_pipe_spec, AlertEvaluation, GeoPoint, NodeId, PipeSpec, TelemetryReading, Violation,
};
use wlds_core::wire::AuthKey;
use wlds_store::{Durability, QueryRange, Store, StoreError, StoredRecord};

use crate::config::ResolvedConfig;
use crate::dispatch::{DispatchResult, Dispatcher};
use crate::events::EventBus;
use crate::ingest::{admit, AdmissionResult, SessionState};

pub const JOURNAL_FILE: &str = "alerts.journal.jsonl";
pub const THRESHOLDS_FILE: &str = "thresholds.json";

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    BadFile { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertState {
    Normal,
    Raised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapColor {
    #[serde(rename = "GREEN")]
    Green,
    #[serde(rename = "RED")]
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecSummary {
    pub pipe_height_cm: f64,
    pub set_limit_flow_lpm: f64,
    pub fill_threshold_cm: f64,
    pub gas_threshold_ppm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatestValues {
    pub seq: u32,
    pub timestamp_ms: u64,
    pub ingest_offset: u64,
    pub flow_lpm: f64,
    pub echo_time_us: f64,
    pub distance_cm: f64,
    pub garbage_level_cm: f64,
    pub anomalous: bool,
    pub gas_ppm: f64,
    pub evaluation: AlertEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub node_id: NodeId,
    pub spec: SpecSummary,
    pub latest: Option<LatestValues>,
    pub alert_state: AlertState,
    pub active_alert_id: Option<String>,
    pub color: MapColor,
    pub position: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchOutcome {
    pub office_id: String,
    pub result: DispatchResult,
}

/// One alert from Raised to (possibly) Cleared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub alert_id: String,
    pub node_id: NodeId,
    pub active: bool,
    pub raised: AlertTransition,
    pub cleared: Option<AlertTransition>,
    pub dispatch: Option<DispatchOutcome>,
    pub ack: Option<Ack>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdUpdate {
    pub set_limit_flow_lpm: Option<f64>,
    pub fill_threshold_cm: Option<f64>,
    pub gas_threshold_ppm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Thresholds {
    set_limit_flow_lpm: f64,
    fill_threshold_cm: f64,
    gas_threshold_ppm: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("unknown node")]
    UnknownNode,
    #[error("invalid thresholds: {}", .0.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join(", "))]
    Invalid(Vec<Violation>),
    #[error("cannot persist thresholds: {0}")]
    Persist(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum AckError {
    #[error("unknown alert")]
    NotFound,
    #[error("alert already acknowledged by {}", .0.operator_id)]
    AlreadyAcked(Ack),
    #[error("alert already cleared")]
    Cleared,
    #[error("operator_id must not be empty")]
    EmptyOperator,
    #[error("cannot persist ack: {0}")]
    Persist(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum JournalEntry {
    Ack {
        alert_id: String,
        operator_id: String,
        at_ms: u64,
    },
    Dispatch {
        alert_id: String,
        office_id: String,
        result: DispatchResult,
    },
}

struct NodeSlot {
    spec: PipeSpec,
    alert: NodeAlertState,
    last_seq: Option<u32>,
}

#[derive(Default)]
struct AlertBook {
    records: Vec<AlertRecord>,
    by_id: HashMap<String, usize>,
    transitions: Vec<AlertTransition>,
}

impl AlertBook {
    fn apply(&mut self, t: &AlertTransition) {
        self.transitions.push(t.clone());
        match t.direction {
            Direction::Raised => {
                self.by_id.insert(t.alert_id.clone(), self.records.len());
                self.records.push(AlertRecord {
                    alert_id: t.alert_id.clone(),
                    node_id: t.node_id,
                    active: true,
                    raised: t.clone(),
                    cleared: None,
                    dispatch: None,
                    ack: None,
                });
            }
            Direction::Cleared => {
                if let Some(&i) = self.by_id.get(&t.alert_id) {
                    let r = &mut self.records[i];
                    r.active = false;
                    r.cleared = Some(t.clone());
                }
            }
        }
    }

    fn get_mut(&mut self, alert_id: &str) -> Option<&mut AlertRecord> {
        let i = *self.by_id.get(alert_id)?;
        Some(&mut self.records[i])
    }
}

struct Journal {
    path: PathBuf,
    file: File,
    durability: Durability,
}

impl Journal {
    fn append(&mut self, entry: &JournalEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.durability == Durability::Fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServiceSettings {
    pub debounce: DebounceConfig,
    pub staleness_window_ms: u64,
    pub sonic_speed_mps: f64,
    pub max_consecutive_invalid: u32,
    pub data_dir: PathBuf,
    pub durability: Durability,
}

pub struct Service {
    settings: ServiceSettings,
    store: Store,
    registry: OfficeRegistry,
    fleet_key: AuthKey,
    node_keys: HashMap<NodeId, AuthKey>,
    nodes: BTreeMap<NodeId, Mutex<NodeSlot>>,
    book: Mutex<AlertBook>,
    journal: Mutex<Journal>,
    thresholds: Mutex<BTreeMap<NodeId, Thresholds>>,
    bus: EventBus,
    dispatcher: Dispatcher,
    sessions: Mutex<HashMap<NodeId, (u64, Arc<Notify>)>>,
    next_session: AtomicU64,
    clock: Box<dyn Fn() -> u64 + Send + Sync>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_thresholds(path: &Path) -> Result<BTreeMap<NodeId, Thresholds>, ServiceError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| ServiceError::BadFile {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn load_journal(path: &Path) -> Result<Vec<JournalEntry>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            // A crash mid-write can leave a partial last line.
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "skipping unreadable journal line")
            }
        }
    }
    Ok(out)
}

impl Service {
    /// Opens the store, restores thresholds, rebuilds alert state from the
    /// stored evaluations and re-queues undelivered active alerts. Must be
    /// called inside a tokio runtime (dispatch workers are spawned).
    pub fn start(cfg: ResolvedConfig) -> Result<Arc<Self>, ServiceError> {
        Self::start_with_clock(cfg, Box::new(now_ms))
    }

    pub fn start_with_clock(
        cfg: ResolvedConfig,
        clock: Box<dyn Fn() -> u64 + Send + Sync>,
    ) -> Result<Arc<Self>, ServiceError> {
        let raw = &cfg.raw;
        let settings = ServiceSettings {
            debounce: raw.debounce,
            staleness_window_ms: raw.staleness_window_ms,
            sonic_speed_mps: raw.sonic_speed_mps,
            max_consecutive_invalid: raw.max_consecutive_invalid.max(1),
            data_dir: raw.data_dir.clone(),
            durability: raw.durability,
        };
        let store = Store::open(raw.store_config())?;

        let thresholds_path = settings.data_dir.join(THRESHOLDS_FILE);
        let mut thresholds = load_thresholds(&thresholds_path)?;
        let mut nodes = BTreeMap::new();
        for spec in &cfg.nodes {
            let mut spec = spec.clone();
            if let Some(t) = thresholds.get(&spec.node_id) {
                let mut edited = spec.clone();
                edited.set_limit_flow_lpm = t.set_limit_flow_lpm;
                edited.fill_threshold_cm = t.fill_threshold_cm;
                edited.gas_threshold_ppm = t.gas_threshold_ppm;
                if validate_pipe_spec(&edited).is_empty() {
                    spec = edited;
                } else {
                    tracing::warn!(node = %spec.node_id, "stored thresholds no longer valid for configured pipe; ignoring");
                }
            }
            nodes.insert(
                spec.node_id,
                Mutex::new(NodeSlot {
                    spec,
                    alert: NodeAlertState::default(),
                    last_seq: None,
                }),
            );
        }
        thresholds.retain(|n, _| nodes.contains_key(n));

        // Rebuild alert state per node, then merge per-node transition lists
        // by time into one log.
        let mut per_node: Vec<std::collections::VecDeque<AlertTransition>> = Vec::new();
        for node in store.nodes() {
            let Some(slot) = nodes.get_mut(&node) else {
                tracing::warn!(%node, "store holds data for a node that is not configured");
                continue;
            };
            let slot = slot.get_mut().expect("fresh mutex");
            let mut list = std::collections::VecDeque::new();
            for rec in store.replay(&node)? {
                slot.last_seq = Some(
                    slot.last_seq
                        .map_or(rec.reading.seq, |s| s.max(rec.reading.seq)),
                );
                if let Some(mut t) = slot.alert.process(&alert_input(&rec), &settings.debounce) {
                    if t.direction == Direction::Raised {
                        t.dispatched_to = Some(cfg.offices.nearest(t.position).office_id.clone());
                    }
                    list.push_back(t);
                }
            }
            per_node.push(list);
        }
        let mut book = AlertBook::default();
        loop {
            let next = per_node
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.front().map(|t| (t.at_ms, i)))
                .min();
            let Some((_, i)) = next else { break };
            let t = per_node[i].pop_front().expect("front exists");
            book.apply(&t);
        }

        let journal_path = settings.data_dir.join(JOURNAL_FILE);
        for entry in load_journal(&journal_path)? {
            match entry {
                JournalEntry::Ack {
                    alert_id,
                    operator_id,
                    at_ms,
                } => {
                    if let Some(r) = book.get_mut(&alert_id) {
                        r.ack = Some(Ack { operator_id, at_ms });
                    }
                }
                JournalEntry::Dispatch {
                    alert_id,
                    office_id,
                    result,
                } => {
                    if let Some(r) = book.get_mut(&alert_id) {
                        r.dispatch = Some(DispatchOutcome { office_id, result });
                    }
                }
            }
        }
        let journal_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(io_err(&journal_path))?;

        let pending: Vec<AlertTransition> = book
            .records
            .iter()
            .filter(|r| r.active && r.dispatch.is_none())
            .map(|r| r.raised.clone())
            .collect();

        let service = Arc::new_cyclic(|weak: &std::sync::Weak<Service>| {
            let weak = weak.clone();
            let dispatcher = Dispatcher::spawn(
                raw.dispatch.clone(),
                Arc::new(move |alert_id: &str, office_id: &str, result| {
                    if let Some(s) = weak.upgrade() {
                        s.record_dispatch(alert_id, office_id, result);
                    }
                }),
            );
            Service {
                bus: EventBus::new(raw.event_buffer, raw.subscriber_buffer),
                store,
                registry: cfg.offices.clone(),
                fleet_key: cfg.key.clone(),
                node_keys: cfg.node_keys.clone(),
                nodes,
                book: Mutex::new(book),
                journal: Mutex::new(Journal {
                    path: journal_path,
                    file: journal_file,
                    durability: settings.durability,
                }),
                thresholds: Mutex::new(thresholds),
                dispatcher,
                sessions: Mutex::new(HashMap::new()),
                next_session: AtomicU64::new(1),
                clock,
                settings,
            }
        });
        for t in pending {
            let office = service.registry.nearest(t.position).clone();
            tracing::info!(alert_id = %t.alert_id, "re-queueing undelivered alert");
            service.dispatcher.enqueue(&t, office);
        }
        Ok(service)
    }

    pub fn settings(&self) -> &ServiceSettings {
        &self.settings
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    pub fn registry(&self) -> &OfficeRegistry {
        &self.registry
    }

    pub fn fleet_key(&self) -> &AuthKey {
        &self.fleet_key
    }

    pub fn key_for(&self, node: &NodeId) -> &AuthKey {
        self.node_keys.get(node).unwrap_or(&self.fleet_key)
    }

    pub fn max_consecutive_invalid(&self) -> u32 {
        self.settings.max_consecutive_invalid
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn pending_dispatches(&self) -> usize {
        self.dispatcher.pending()
    }

    /// Admits and, if accepted, durably stores one decoded reading. An `Err`
    /// means the store failed and the reading must not be acknowledged.
    pub fn commit(
        &self,
        reading: &TelemetryReading,
        session: &mut SessionState,
    ) -> Result<AdmissionResult, StoreError> {
        let Some(slot) = self.nodes.get(&reading.node_id) else {
            return Ok(AdmissionResult::Invalid("unknown node".into()));
        };
        let mut slot = slot.lock().expect("node slot poisoned");
        // Seq history is per node, not per connection, so a replayed
        // transcript on a new connection is still recognised.
        if session.node_id.is_none_or(|n| n == reading.node_id) {
            session.last_seq = session.last_seq.max(slot.last_seq);
        }
        let result = admit(
            reading,
            session,
            (self.clock)(),
            self.settings.staleness_window_ms,
        );
        if result != AdmissionResult::Accept {
            return Ok(result);
        }
        let rec = self
            .store
            .append(reading, &slot.spec, self.settings.sonic_speed_mps)?;
        slot.last_seq = Some(rec.reading.seq);
        if let Some(mut t) = slot
            .alert
            .process(&alert_input(&rec), &self.settings.debounce)
        {
            let office = (t.direction == Direction::Raised)
                .then(|| self.registry.nearest(t.position).clone());
            t.dispatched_to = office.as_ref().map(|o| o.office_id.clone());
            self.book.lock().expect("alert book poisoned").apply(&t);
            self.bus.publish(
                "alert",
                serde_json::to_value(&t).expect("transition serializes"),
            );
            if let Some(office) = office {
                self.dispatcher.enqueue(&t, office);
            }
        }
        let snap = self.snapshot_locked(&slot, Some(&rec));
        self.bus.publish(
            "snapshot",
            serde_json::to_value(&snap).expect("snapshot serializes"),
        );
        Ok(AdmissionResult::Accept)
    }

    /// Marks `node` as owned by a new session and closes any older one.
    pub fn register_session(&self, node: NodeId) -> (u64, Arc<Notify>) {
        let id = self.next_session.fetch_add(1, Ordering::Relaxed);
        let notify = Arc::new(Notify::new());
        let old = self
            .sessions
            .lock()
            .expect("session table poisoned")
            .insert(node, (id, Arc::clone(&notify)));
        if let Some((_, old)) = old {
            old.notify_one();
        }
        (id, notify)
    }

    pub fn unregister_session(&self, node: NodeId, id: u64) {
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        if sessions.get(&node).is_some_and(|(cur, _)| *cur == id) {
            sessions.remove(&node);
        }
    }

    fn snapshot_locked(&self, slot: &NodeSlot, latest: Option<&StoredRecord>) -> NodeSnapshot {
        let latest = latest
            .cloned()
            .or_else(|| self.store.latest(&slot.spec.node_id));
        let raised = slot.alert.is_raised();
        NodeSnapshot {
            node_id: slot.spec.node_id,
            spec: SpecSummary {
                pipe_height_cm: slot.spec.pipe_height_cm,
                set_limit_flow_lpm: slot.spec.set_limit_flow_lpm,
                fill_threshold_cm: slot.spec.fill_threshold_cm,
                gas_threshold_ppm: slot.spec.gas_threshold_ppm,
            },
            position: latest
                .as_ref()
                .map_or(slot.spec.location, |r| r.reading.position),
            latest: latest.map(|r| LatestValues {
                seq: r.reading.seq,
                timestamp_ms: r.reading.timestamp_ms,
                ingest_offset: r.ingest_offset,
                flow_lpm: r.reading.flow_lpm,
                echo_time_us: r.reading.echo_time_us,
                distance_cm: r.derived.distance_cm,
                garbage_level_cm: r.derived.garbage_level_cm,
                anomalous: r.derived.anomalous,
                gas_ppm: r.reading.gas_ppm,
                evaluation: r.evaluation,
            }),
            alert_state: if raised {
                AlertState::Raised
            } else {
                AlertState::Normal
            },
            active_alert_id: slot.alert.active_alert().map(str::to_string),
            color: if raised {
                MapColor::Red
            } else {
                MapColor::Green
            },
        }
    }

    pub fn snapshot(&self, node: &NodeId) -> Option<NodeSnapshot> {
        let slot = self.nodes.get(node)?.lock().expect("node slot poisoned");
        Some(self.snapshot_locked(&slot, None))
    }

    pub fn snapshots(&self) -> Vec<NodeSnapshot> {
        self.nodes
            .values()
            .map(|s| self.snapshot_locked(&s.lock().expect("node slot poisoned"), None))
            .collect()
    }

    pub fn is_raised(&self, node: &NodeId) -> Option<bool> {
        Some(
            self.nodes
                .get(node)?
                .lock()
                .expect("node slot poisoned")
                .alert
                .is_raised(),
        )
    }

    /// GeoJSON FeatureCollection with one Point per node.
    pub fn map_document(&self) -> serde_json::Value {
        let features: Vec<_> = self
            .snapshots()
            .into_iter()
            .map(|s| {
                json!({
                    "type": "Feature",
                    "geometry": {
                        "type": "Point",
                        "coordinates": [s.position.lon_deg(), s.position.lat_deg()],
                    },
                    "properties": {
                        "node_id": s.node_id,
                        "state": s.color,
                        "garbage_level_cm": s.latest.as_ref().map(|l| l.garbage_level_cm),
                    },
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn history(
        &self,
        node: &NodeId,
        from_ms: u64,
        to_ms: u64,
    ) -> Result<Option<Vec<StoredRecord>>, StoreError> {
        if !self.nodes.contains_key(node) {
            return Ok(None);
        }
        Ok(Some(
            self.store.range(&QueryRange::new(*node, from_ms, to_ms)?)?,
        ))
    }

    /// All alerts, or only active (`Some(true)`) or only ended
    /// (`Some(false)`) ones, oldest first.
    pub fn alerts(&self, active: Option<bool>) -> Vec<AlertRecord> {
        let book = self.book.lock().expect("alert book poisoned");
        book.records
            .iter()
            .filter(|r| active.is_none_or(|a| r.active == a))
            .cloned()
            .collect()
    }

    pub fn alert(&self, alert_id: &str) -> Option<AlertRecord> {
        let mut book = self.book.lock().expect("alert book poisoned");
        book.get_mut(alert_id).map(|r| r.clone())
    }

    /// Every transition in commit order.
    pub fn transitions(&self) -> Vec<AlertTransition> {
        self.book
            .lock()
            .expect("alert book poisoned")
            .transitions
            .clone()
    }

    pub fn acknowledge(&self, alert_id: &str, operator_id: &str) -> Result<AlertRecord, AckError> {
        if operator_id.trim().is_empty() {
            return Err(AckError::EmptyOperator);
        }
        let mut book = self.book.lock().expect("alert book poisoned");
        let rec = book.get_mut(alert_id).ok_or(AckError::NotFound)?;
        if let Some(a) = &rec.ack {
            return Err(AckError::AlreadyAcked(a.clone()));
        }
        if !rec.active {
            return Err(AckError::Cleared);
        }
        let ack = Ack {
            operator_id: operator_id.to_string(),
            at_ms: (self.clock)(),
        };
        self.journal
            .lock()
            .expect("journal poisoned")
            .append(&JournalEntry::Ack {
                alert_id: alert_id.to_string(),
                operator_id: ack.operator_id.clone(),
                at_ms: ack.at_ms,
            })
            .map_err(|e| AckError::Persist(e.to_string()))?;
        rec.ack = Some(ack);
        let out = rec.clone();
        self.bus
            .publish("ack", serde_json::to_value(&out).expect("alert serializes"));
        Ok(out)
    }

    fn record_dispatch(&self, alert_id: &str, office_id: &str, result: DispatchResult) {
        let mut book = self.book.lock().expect("alert book poisoned");
        let entry = JournalEntry::Dispatch {
            alert_id: alert_id.to_string(),
            office_id: office_id.to_string(),
            result,
        };
        let mut journal = self.journal.lock().expect("journal poisoned");
        if let Err(e) = journal.append(&entry) {
            tracing::error!(path = %journal.path.display(), error = %e, "cannot journal dispatch outcome");
        }
        drop(journal);
        if let Some(r) = book.get_mut(alert_id) {
            r.dispatch = Some(DispatchOutcome {
                office_id: office_id.to_string(),
                result,
            });
            let out = r.clone();
            self.bus.publish(
                "dispatch",
                serde_json::to_value(&out).expect("alert serializes"),
            );
        }
    }

    /// Changes thresholds for readings committed after this call returns.
    pub fn update_thresholds(
        &self,
        node: &NodeId,
        update: &ThresholdUpdate,
    ) -> Result<NodeSnapshot, ThresholdError> {
        let slot = self.nodes.get(node).ok_or(ThresholdError::UnknownNode)?;
        let mut slot = slot.lock().expect("node slot poisoned");
        let mut spec = slot.spec.clone();
        if let Some(v) = update.set_limit_flow_lpm {
            spec.set_limit_flow_lpm = v;
        }
        if let Some(v) = update.fill_threshold_cm {
            spec.fill_threshold_cm = v;
        }
        if let Some(v) = update.gas_threshold_ppm {
            spec.gas_threshold_ppm = v;
        }
        let violations = validate_pipe_spec(&spec);
        if !violations.is_empty() {
            return Err(ThresholdError::Invalid(violations));
        }
        {
            let mut all = self.thresholds.lock().expect("threshold table poisoned");
            let mut next = all.clone();
            next.insert(
                *node,
                Thresholds {
                    set_limit_flow_lpm: spec.set_limit_flow_lpm,
                    fill_threshold_cm: spec.fill_threshold_cm,
                    gas_threshold_ppm: spec.gas_threshold_ppm,
                },
            );
            self.write_thresholds(&next)
                .map_err(|e| ThresholdError::Persist(e.to_string()))?;
            *all = next;
        }
        slot.spec = spec;
        let snap = self.snapshot_locked(&slot, None);
        self.bus.publish(
            "snapshot",
            serde_json::to_value(&snap).expect("snapshot serializes"),
        );
        Ok(snap)
    }

    fn write_thresholds(&self, table: &BTreeMap<NodeId, Thresholds>) -> std::io::Result<()> {
        let path = self.settings.data_dir.join(THRESHOLDS_FILE);
        let tmp = path.with_extension("json.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(table).map_err(std::io::Error::other)?)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        if let Ok(dir) = File::open(&self.settings.data_dir) {
            let _ = dir.sync_all();
        }
        Ok(())
    }
}

fn alert_input(rec: &StoredRecord) -> AlertInput {
    AlertInput {
        node_id: rec.reading.node_id,
        ingest_offset: rec.ingest_offset,
        at_ms: rec.reading.timestamp_ms,
        position: rec.reading.position,
        evaluation: rec.evaluation,
    }
}
