//! Core of the drainage water-logging detection system.
//!
//! * [`model`]: domain types, the echo/clog-level formulas and the warning rule.
//! * [`wire`]: the 70-byte authenticated telemetry frame.
//! * [`sim`]: deterministic sensor fleet used for demos and tests.
//! * [`geo`]: maintenance office registry and nearest-office lookup.
//! * [`alert`]: debounced Normal/Raised alert state machine.

pub mod alert;
pub mod geo;
pub mod model;
pub mod sim;
pub mod wire;

pub use alert::{AlertEngine, AlertInput, AlertTransition, DebounceConfig, Direction};
pub use geo::{haversine_km, nearest_office, MaintenanceOffice, OfficeRegistry};
pub use model::{
    clog_level, echo_to_distance, evaluate_warning, validate_pipe_spec, AlertEvaluation, Cause,
    Causes, DerivedDepths, GeoPoint, NodeId, PipeSpec, TelemetryReading, WarningState,
    DEFAULT_SONIC_SPEED_MPS,
};
pub use wire::{decode_frame, encode_frame, AuthKey, DecodeError, FRAME_LEN};
