//! Debounced two-state alert machine.
//!
//! ```text
//!            raise_after consecutive Warning
//!   Normal ──────────────────────────────────► Raised
//!     ▲                                          │
//!     └──────────────────────────────────────────┘
//!            clear_after consecutive Normal
//! ```
//!
//! A streak counter resets whenever an evaluation disagrees with the streak.
//! With both thresholds at 1 an alert is raised on the first warning.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::OfficeRegistry;
use crate::model::{AlertEvaluation, Causes, GeoPoint, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebounceConfig {
    pub raise_after: u32,
    pub clear_after: u32,
}

impl Default for DebounceConfig {
    fn default() -> Self {
        Self {
            raise_after: 3,
            clear_after: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("debounce counts must be >= 1 (raise_after={raise_after}, clear_after={clear_after})")]
pub struct DebounceError {
    pub raise_after: u32,
    pub clear_after: u32,
}

impl DebounceConfig {
    pub fn new(raise_after: u32, clear_after: u32) -> Result<Self, DebounceError> {
        let c = Self {
            raise_after,
            clear_after,
        };
        c.validate()?;
        Ok(c)
    }

    /// Alert on the first warning and clear on the first normal reading.
    pub fn immediate() -> Self {
        Self {
            raise_after: 1,
            clear_after: 1,
        }
    }

    pub fn validate(&self) -> Result<(), DebounceError> {
        if self.raise_after == 0 || self.clear_after == 0 {
            return Err(DebounceError {
                raise_after: self.raise_after,
                clear_after: self.clear_after,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Raised,
    Cleared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub operator_id: String,
    pub at_ms: u64,
}

/// A Normal/Raised state change for one node.
///
/// A Cleared transition carries the `alert_id` of the alert it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertTransition {
    pub alert_id: String,
    pub node_id: NodeId,
    pub direction: Direction,
    pub causes: Causes,
    pub garbage_level_cm: f64,
    pub at_ms: u64,
    pub position: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispatched_to: Option<String>,
    #[serde(default)]
    pub ack: Option<Ack>,
}

/// What the alert machine needs to know about one committed reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlertInput {
    pub node_id: NodeId,
    pub ingest_offset: u64,
    pub at_ms: u64,
    pub position: GeoPoint,
    pub evaluation: AlertEvaluation,
}

pub fn alert_id(node_id: NodeId, ingest_offset: u64) -> String {
    format!("{node_id}-{ingest_offset}")
}

/// Per-node debounce state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAlertState {
    active: Option<String>,
    streak: u32,
}

impl NodeAlertState {
    pub fn is_raised(&self) -> bool {
        self.active.is_some()
    }

    pub fn active_alert(&self) -> Option<&str> {
        self.active.as_deref()
    }

    /// Feeds one evaluation. Inputs for a node must arrive in ingest order.
    pub fn process(
        &mut self,
        input: &AlertInput,
        debounce: &DebounceConfig,
    ) -> Option<AlertTransition> {
        let warning = input.evaluation.is_warning();
        // The streak counts evaluations that argue for leaving the current state.
        let (arguing, needed) = match self.active {
            None => (warning, debounce.raise_after),
            Some(_) => (!warning, debounce.clear_after),
        };
        if !arguing {
            self.streak = 0;
            return None;
        }
        self.streak += 1;
        if self.streak < needed {
            return None;
        }
        self.streak = 0;
        let (alert_id, direction) = match self.active.take() {
            None => {
                let id = alert_id(input.node_id, input.ingest_offset);
                self.active = Some(id.clone());
                (id, Direction::Raised)
            }
            Some(id) => (id, Direction::Cleared),
        };
        Some(AlertTransition {
            alert_id,
            node_id: input.node_id,
            direction,
            causes: input.evaluation.causes,
            garbage_level_cm: input.evaluation.garbage_level_cm,
            at_ms: input.at_ms,
            position: input.position,
            dispatched_to: None,
            ack: None,
        })
    }
}

/// Alert state for a whole fleet, with Raised transitions routed to the
/// nearest office.
#[derive(Debug, Clone)]
pub struct AlertEngine {
    debounce: DebounceConfig,
    registry: OfficeRegistry,
    nodes: HashMap<NodeId, NodeAlertState>,
}

impl AlertEngine {
    pub fn new(debounce: DebounceConfig, registry: OfficeRegistry) -> Self {
        Self {
            debounce,
            registry,
            nodes: HashMap::new(),
        }
    }

    pub fn registry(&self) -> &OfficeRegistry {
        &self.registry
    }

    pub fn debounce(&self) -> DebounceConfig {
        self.debounce
    }

    pub fn state(&self, node: &NodeId) -> Option<&NodeAlertState> {
        self.nodes.get(node)
    }

    pub fn is_raised(&self, node: &NodeId) -> bool {
        self.nodes.get(node).is_some_and(NodeAlertState::is_raised)
    }

    pub fn process(&mut self, input: &AlertInput) -> Option<AlertTransition> {
        let state = self.nodes.entry(input.node_id).or_default();
        let mut t = state.process(input, &self.debounce)?;
        if t.direction == Direction::Raised {
            t.dispatched_to = Some(self.registry.nearest(input.position).office_id.clone());
        }
        Some(t)
    }
}
