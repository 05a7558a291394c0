//! Deterministic drainage sensor fleet.
//!
//! Each node keeps a noise-free internal truth (flow, fill height, gas) that
//! scripted events push around. Every tick the fleet emits one reading per
//! node: flow and gas carry bounded uniform noise of ±5% of the node's
//! baseline, and the echo time is synthesized from the true fill height so
//! that the server side recovers it exactly.
//!
//! Event dynamics:
//!
//! * `ClogOnset` drives flow exponentially toward 0.2 × setlimit and fill
//!   linearly toward 0.9 × PH over the event duration, scaled by magnitude
//!   (capped at 1). The pipe stays clogged afterwards.
//! * `ClogClear` returns a clogged pipe to baseline: fill drains
//!   exponentially, flow recovers linearly. It does nothing on a clear pipe.
//! * `RainSurge` multiplies flow by `1 + magnitude` and raises fill by
//!   `min(magnitude, 1) / 4` of the remaining headroom while active.
//! * `GasSpike` adds `magnitude` ppm while active.
//!
//! Ticks are numbered from 1; an event with `start_tick = s` and
//! `duration_ticks = d` is active on ticks `s..s + d`.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::model::{
    distance_to_echo, validate_pipe_spec, GeoPoint, NodeId, PipeSpec, TelemetryReading,
    DEFAULT_SONIC_SPEED_MPS,
};

const NOISE_FRACTION: f64 = 0.05;
const BASELINE_FLOW: f64 = 1.5;
const BASELINE_FILL: f64 = 0.2;
const BASELINE_GAS: f64 = 0.3;
const CLOGGED_FLOW: f64 = 0.2;
const CLOGGED_FILL: f64 = 0.9;
/// Exponential ramps cover this many time constants over the event duration.
const RAMP_RATE: f64 = 5.0;

fn default_tick_interval() -> u64 {
    1000
}

fn default_time_acceleration() -> f64 {
    1.0
}

fn default_sonic_speed() -> f64 {
    DEFAULT_SONIC_SPEED_MPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub nodes: Vec<PipeSpec>,
    #[serde(default = "default_tick_interval")]
    pub tick_interval_ms: u64,
    #[serde(default = "default_time_acceleration")]
    pub time_acceleration: f64,
    /// Timestamp of tick 0. Wall clock at build time when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_ms: Option<u64>,
    #[serde(default = "default_sonic_speed")]
    pub sonic_speed_mps: f64,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    RainSurge,
    ClogOnset,
    ClogClear,
    GasSpike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub kind: EventKind,
    /// Zero-based index into `ScenarioConfig::nodes`.
    pub node: usize,
    pub start_tick: u64,
    pub duration_ticks: u64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("unknown node {node} (fleet has {count} nodes)")]
    UnknownNode { node: usize, count: usize },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
}

impl ScenarioEvent {
    fn problems(&self, node_count: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.node >= node_count {
            out.push(format!(
                "event targets node {} but fleet has {node_count} nodes",
                self.node
            ));
        }
        if self.duration_ticks < 1 {
            out.push("event duration must be >= 1".to_string());
        }
        if !self.magnitude.is_finite() || self.magnitude <= 0.0 {
            out.push("event magnitude must be > 0".to_string());
        }
        out
    }

    fn active_at(&self, tick: u64) -> bool {
        tick >= self.start_tick && tick - self.start_tick < self.duration_ticks
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let mut v = Vec::new();
        if self.nodes.is_empty() {
            v.push("node count ≥ 1".to_string());
        }
        if self.tick_interval_ms < 1 {
            v.push("tick_interval_ms ≥ 1".to_string());
        }
        if !self.time_acceleration.is_finite() || self.time_acceleration < 1.0 {
            v.push("time_acceleration ≥ 1".to_string());
        }
        if !self.sonic_speed_mps.is_finite() || self.sonic_speed_mps <= 0.0 {
            v.push("sonic_speed_mps > 0".to_string());
        }
        for (i, spec) in self.nodes.iter().enumerate() {
            v.extend(
                validate_pipe_spec(spec)
                    .into_iter()
                    .map(|x| format!("node {i}: {x}")),
            );
        }
        let mut ids: Vec<_> = self.nodes.iter().map(|s| s.node_id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            v.push("node ids must be unique".to_string());
        }
        for (i, e) in self.events.iter().enumerate() {
            v.extend(
                e.problems(self.nodes.len())
                    .into_iter()
                    .map(|x| format!("event {i}: {x}")),
            );
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(v))
        }
    }

    /// A grid of identical pipes around central Dhaka with deterministic ids.
    pub fn demo(seed: u64, node_count: usize) -> Self {
        let nodes = (0..node_count)
            .map(|i| {
                let row = (i / 5) as f64;
                let col = (i % 5) as f64;
                PipeSpec {
                    node_id: demo_node_id(seed, i),
                    pipe_height_cm: 100.0,
                    set_limit_flow_lpm: 10.0,
                    fill_threshold_cm: 50.0,
                    gas_threshold_ppm: 300.0,
                    location: GeoPoint::new(23.70 + 0.03 * row, 90.35 + 0.03 * col)
                        .expect("grid stays near Dhaka"),
                }
            })
            .collect();
        ScenarioConfig {
            seed,
            nodes,
            tick_interval_ms: default_tick_interval(),
            time_acceleration: 1.0,
            start_ms: None,
            sonic_speed_mps: DEFAULT_SONIC_SPEED_MPS,
            events: Vec::new(),
        }
    }
}

pub fn demo_node_id(seed: u64, index: usize) -> NodeId {
    NodeId::new(Uuid::from_u64_pair(seed, index as u64 + 1)).expect("low half is never zero")
}

/// Observable truth of one simulated node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub node_id: NodeId,
    pub flow_lpm: f64,
    pub fill_cm: f64,
    pub gas_ppm: f64,
    pub position: GeoPoint,
    pub seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RampKind {
    Clogging,
    Clearing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ramp {
    kind: RampKind,
    start_tick: u64,
    duration: u64,
    from_flow: f64,
    from_fill: f64,
    to_flow: f64,
    to_fill: f64,
}

impl Ramp {
    /// Structural (flow, fill) at `tick`, and whether the ramp is finished.
    fn at(&self, tick: u64) -> (f64, f64, bool) {
        let k = (tick - self.start_tick + 1).min(self.duration);
        let linear = k as f64 / self.duration as f64;
        let exp = (1.0 - (-RAMP_RATE * linear).exp()) / (1.0 - (-RAMP_RATE).exp());
        let (flow_w, fill_w) = match self.kind {
            RampKind::Clogging => (exp, linear),
            RampKind::Clearing => (linear, exp),
        };
        let done = k == self.duration;
        let flow = if done {
            self.to_flow
        } else {
            self.from_flow + (self.to_flow - self.from_flow) * flow_w
        };
        let fill = if done {
            self.to_fill
        } else {
            self.from_fill + (self.to_fill - self.from_fill) * fill_w
        };
        (flow, fill, done)
    }
}

#[derive(Debug, Clone)]
struct SimNode {
    spec: PipeSpec,
    base_flow: f64,
    base_fill: f64,
    base_gas: f64,
    flow: f64,
    fill: f64,
    clogged: bool,
    ramp: Option<Ramp>,
    state: NodeState,
}

impl SimNode {
    fn new(spec: PipeSpec) -> Self {
        let base_flow = BASELINE_FLOW * spec.set_limit_flow_lpm;
        let base_fill = BASELINE_FILL * spec.pipe_height_cm;
        let base_gas = BASELINE_GAS * spec.gas_threshold_ppm;
        let state = NodeState {
            node_id: spec.node_id,
            flow_lpm: base_flow,
            fill_cm: base_fill,
            gas_ppm: base_gas,
            position: spec.location,
            seq: 0,
        };
        SimNode {
            base_flow,
            base_fill,
            base_gas,
            flow: base_flow,
            fill: base_fill,
            clogged: false,
            ramp: None,
            state,
            spec,
        }
    }

    fn start(&mut self, event: &ScenarioEvent, tick: u64) {
        let (to_flow, to_fill, kind) = match event.kind {
            EventKind::ClogOnset => {
                let m = event.magnitude.min(1.0);
                let target_flow = CLOGGED_FLOW * self.spec.set_limit_flow_lpm;
                let target_fill = CLOGGED_FILL * self.spec.pipe_height_cm;
                self.clogged = true;
                (
                    self.flow - m * (self.flow - target_flow).max(0.0),
                    self.fill + m * (target_fill - self.fill).max(0.0),
                    RampKind::Clogging,
                )
            }
            EventKind::ClogClear if self.clogged => {
                self.clogged = false;
                (self.base_flow, self.base_fill, RampKind::Clearing)
            }
            _ => return,
        };
        self.ramp = Some(Ramp {
            kind,
            start_tick: tick,
            duration: event.duration_ticks,
            from_flow: self.flow,
            from_fill: self.fill,
            to_flow,
            to_fill,
        });
    }

    fn advance(&mut self, tick: u64, overlays: &[&ScenarioEvent]) {
        if let Some(ramp) = self.ramp {
            let (flow, fill, done) = ramp.at(tick);
            self.flow = flow;
            self.fill = fill;
            if done {
                self.ramp = None;
            }
        }
        let ph = self.spec.pipe_height_cm;
        let mut flow = self.flow;
        let mut fill = self.fill;
        let mut gas = self.base_gas;
        for e in overlays {
            match e.kind {
                EventKind::RainSurge => {
                    flow *= 1.0 + e.magnitude;
                    fill += (ph - fill) * e.magnitude.min(1.0) / 4.0;
                }
                EventKind::GasSpike => gas += e.magnitude,
                EventKind::ClogOnset | EventKind::ClogClear => {}
            }
        }
        self.state.flow_lpm = flow.max(0.0);
        self.state.fill_cm = fill.clamp(0.0, ph);
        self.state.gas_ppm = gas.max(0.0);
    }
}

/// Clone-able handle for scheduling events from another thread. Queued
/// events are applied at the next tick boundary.
#[derive(Debug, Clone)]
pub struct EventInjector {
    node_count: usize,
    queue: Arc<Mutex<Vec<ScenarioEvent>>>,
}

impl EventInjector {
    pub fn inject(&self, event: ScenarioEvent) -> Result<(), SimError> {
        if event.node >= self.node_count {
            return Err(SimError::UnknownNode {
                node: event.node,
                count: self.node_count,
            });
        }
        if let Some(p) = event.problems(self.node_count).into_iter().next() {
            return Err(SimError::InvalidEvent(p));
        }
        self.queue
            .lock()
            .expect("injector queue poisoned")
            .push(event);
        Ok(())
    }
}

pub struct Fleet {
    nodes: Vec<SimNode>,
    events: Vec<ScenarioEvent>,
    injected: Arc<Mutex<Vec<ScenarioEvent>>>,
    rng: ChaCha8Rng,
    tick: u64,
    start_ms: u64,
    tick_interval_ms: u64,
    time_acceleration: f64,
    sonic_speed_mps: f64,
}

/// Receives readings from [`Fleet::run`].
pub trait ReadingSink {
    type Error: std::fmt::Display;

    fn accept(&mut self, reading: &TelemetryReading) -> Result<(), Self::Error>;
}

impl ReadingSink for Vec<TelemetryReading> {
    type Error = std::convert::Infallible;

    fn accept(&mut self, reading: &TelemetryReading) -> Result<(), Self::Error> {
        self.push(reading.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Run as fast as possible.
    Disabled,
    /// Sleep so ticks are `tick_interval_ms / time_acceleration` apart.
    RealTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub ticks_executed: u64,
    pub readings_emitted: u64,
    pub final_states: Vec<NodeState>,
}

#[derive(Debug, Error)]
#[error("sink failed after {} readings: {message}", stats.readings_emitted)]
pub struct RunAborted {
    pub stats: RunStats,
    pub message: String,
}

impl Fleet {
    pub fn build(config: &ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let start_ms = config.start_ms.unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        });
        Ok(Fleet {
            nodes: config.nodes.iter().cloned().map(SimNode::new).collect(),
            events: config.events.clone(),
            injected: Arc::new(Mutex::new(Vec::new())),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            tick: 0,
            start_ms,
            tick_interval_ms: config.tick_interval_ms,
            time_acceleration: config.time_acceleration,
            sonic_speed_mps: config.sonic_speed_mps,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn specs(&self) -> impl Iterator<Item = &PipeSpec> {
        self.nodes.iter().map(|n| &n.spec)
    }

    pub fn states(&self) -> Vec<NodeState> {
        self.nodes.iter().map(|n| n.state.clone()).collect()
    }

    /// Ticks completed so far.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn set_time_acceleration(&mut self, accel: f64) {
        self.time_acceleration = accel.max(1.0);
    }

    pub fn injector(&self) -> EventInjector {
        EventInjector {
            node_count: self.nodes.len(),
            queue: Arc::clone(&self.injected),
        }
    }

    /// Schedules `event` no earlier than the next tick.
    pub fn inject_event(&self, event: ScenarioEvent) -> Result<(), SimError> {
        self.injector().inject(event)
    }

    /// Advances one tick and returns one reading per node, in node order.
    pub fn step(&mut self) -> Vec<TelemetryReading> {
        self.tick += 1;
        let tick = self.tick;
        let pending: Vec<_> =
            std::mem::take(&mut *self.injected.lock().expect("injector queue poisoned"));
        self.events.extend(pending.into_iter().map(|mut e| {
            e.start_tick = e.start_tick.max(tick);
            e
        }));

        let timestamp_ms = self.start_ms + tick * self.tick_interval_ms;
        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            for e in self
                .events
                .iter()
                .filter(|e| e.node == idx && e.start_tick == tick)
            {
                node.start(e, tick);
            }
            let overlays: Vec<&ScenarioEvent> = self
                .events
                .iter()
                .filter(|e| e.node == idx && e.active_at(tick))
                .collect();
            node.advance(tick, &overlays);

            let flow_noise = self.rng.gen_range(-NOISE_FRACTION..=NOISE_FRACTION) * node.base_flow;
            let gas_noise = self.rng.gen_range(-NOISE_FRACTION..=NOISE_FRACTION) * node.base_gas;
            node.state.seq += 1;
            let s = &node.state;
            out.push(TelemetryReading {
                node_id: s.node_id,
                seq: s.seq,
                timestamp_ms,
                flow_lpm: (s.flow_lpm + flow_noise).max(0.0),
                echo_time_us: distance_to_echo(
                    node.spec.pipe_height_cm - s.fill_cm,
                    self.sonic_speed_mps,
                ),
                gas_ppm: (s.gas_ppm + gas_noise).max(0.0),
                position: s.position,
            });
        }
        out
    }

    /// Steps `n_ticks` times, handing every reading to `sink` in order.
    pub fn run<S: ReadingSink>(
        &mut self,
        n_ticks: u64,
        sink: &mut S,
        pacing: Pacing,
    ) -> Result<RunStats, RunAborted> {
        let period =
            Duration::from_secs_f64(self.tick_interval_ms as f64 / 1000.0 / self.time_acceleration);
        let began = Instant::now();
        let mut readings_emitted = 0u64;
        for i in 0..n_ticks {
            if pacing == Pacing::RealTime && i > 0 {
                let deadline = began + period.mul_f64(i as f64);
                if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
            }
            for r in self.step() {
                if let Err(e) = sink.accept(&r) {
                    return Err(RunAborted {
                        stats: RunStats {
                            ticks_executed: i,
                            readings_emitted,
                            final_states: self.states(),
                        },
                        message: e.to_string(),
                    });
                }
                readings_emitted += 1;
            }
        }
        Ok(RunStats {
            ticks_executed: n_ticks,
            readings_emitted,
            final_states: self.states(),
        })
    }
}
