//! Server configuration file.
//!
//! One JSON document; see `config/wlds.example.json` and `docs/CONFIG.md`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wlds_core::alert::DebounceConfig;
use wlds_core::geo::{OfficeRegistry, RegistryError};
use wlds_core::model::{validate_pipe_spec, NodeId, PipeSpec, DEFAULT_SONIC_SPEED_MPS};
use wlds_core::sim::ScenarioConfig;
use wlds_core::wire::AuthKey;
use wlds_store::{Durability, StoreConfig, DEFAULT_SEGMENT_BYTES};

use crate::dispatch::DispatchConfig;

pub const ENV_LISTEN_ADDR: &str = "WLDS_LISTEN_ADDR";
pub const ENV_HTTP_ADDR: &str = "WLDS_HTTP_ADDR";
pub const ENV_KEY: &str = "WLDS_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("office registry {path}: {source}")]
    Offices {
        path: PathBuf,
        source: RegistryError,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_listen() -> String {
    "0.0.0.0:7701".into()
}
fn default_http() -> String {
    "0.0.0.0:7702".into()
}
fn default_staleness() -> u64 {
    300_000
}
fn default_sonic() -> f64 {
    DEFAULT_SONIC_SPEED_MPS
}
fn default_durability() -> Durability {
    Durability::Fsync
}
fn default_segment_bytes() -> u64 {
    DEFAULT_SEGMENT_BYTES
}
fn default_retention_days() -> u64 {
    30
}
fn default_event_buffer() -> usize {
    10_000
}
fn default_subscriber_buffer() -> usize {
    4096
}
fn default_max_invalid() -> u32 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    #[serde(default = "default_http")]
    pub http_addr: String,
    /// Fleet-wide 32-byte frame key, hex. Falls back to `WLDS_KEY`.
    #[serde(default)]
    pub key_hex: Option<String>,
    /// Optional per-node keys, hex, keyed by node UUID.
    #[serde(default)]
    pub node_keys: HashMap<NodeId, String>,
    #[serde(default)]
    pub debounce: DebounceConfig,
    #[serde(default = "default_staleness")]
    pub staleness_window_ms: u64,
    pub data_dir: PathBuf,
    pub offices_path: PathBuf,
    #[serde(default)]
    pub nodes: Vec<PipeSpec>,
    /// Also register every node of this scenario file.
    #[serde(default)]
    pub scenario_path: Option<PathBuf>,
    #[serde(default = "default_sonic")]
    pub sonic_speed_mps: f64,
    #[serde(default = "default_durability")]
    pub durability: Durability,
    #[serde(default = "default_segment_bytes")]
    pub segment_max_bytes: u64,
    #[serde(default = "default_retention_days")]
    pub retention_days: u64,
    #[serde(default)]
    pub dispatch: DispatchConfig,
    #[serde(default = "default_event_buffer")]
    pub event_buffer: usize,
    #[serde(default = "default_subscriber_buffer")]
    pub subscriber_buffer: usize,
    #[serde(default = "default_max_invalid")]
    pub max_consecutive_invalid: u32,
}

/// Everything the server needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: ServerConfig,
    pub key: AuthKey,
    pub node_keys: HashMap<NodeId, AuthKey>,
    pub nodes: Vec<PipeSpec>,
    pub offices: OfficeRegistry,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ServerConfig {
    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory. Environment overrides are applied.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let mut cfg: ServerConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = relative_to(base, &cfg.data_dir);
        cfg.offices_path = relative_to(base, &cfg.offices_path);
        cfg.scenario_path = cfg.scenario_path.map(|p| relative_to(base, &p));
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENV_LISTEN_ADDR) {
            self.listen_addr = v;
        }
        if let Ok(v) = std::env::var(ENV_HTTP_ADDR) {
            self.http_addr = v;
        }
        if self.key_hex.is_none() {
            self.key_hex = std::env::var(ENV_KEY).ok();
        }
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            dir: self.data_dir.clone(),
            segment_max_bytes: self.segment_max_bytes,
            retention_ms: self.retention_days * 24 * 3600 * 1000,
            durability: self.durability,
        }
    }

    pub fn resolve(self) -> Result<ResolvedConfig, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        let key_hex = self
            .key_hex
            .as_deref()
            .ok_or_else(|| invalid(format!("no frame key: set key_hex or {ENV_KEY}")))?;
        let key = AuthKey::from_hex(key_hex).map_err(|e| invalid(e.to_string()))?;
        let node_keys = self
            .node_keys
            .iter()
            .map(|(n, k)| {
                Ok((
                    *n,
                    AuthKey::from_hex(k).map_err(|e| invalid(format!("key for {n}: {e}")))?,
                ))
            })
            .collect::<Result<_, ConfigError>>()?;
        self.debounce
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if !self.sonic_speed_mps.is_finite() || self.sonic_speed_mps <= 0.0 {
            return Err(invalid("sonic_speed_mps must be > 0".into()));
        }

        let mut nodes = self.nodes.clone();
        if let Some(p) = &self.scenario_path {
            let sc: ScenarioConfig =
                serde_json::from_str(&read(p)?).map_err(|source| ConfigError::Parse {
                    path: p.clone(),
                    source,
                })?;
            nodes.extend(sc.nodes);
        }
        if nodes.is_empty() {
            return Err(invalid("no nodes configured".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &nodes {
            if !seen.insert(n.node_id) {
                return Err(invalid(format!("node {} configured twice", n.node_id)));
            }
            let v = validate_pipe_spec(n);
            if !v.is_empty() {
                let msgs: Vec<_> = v.iter().map(|x| x.message.clone()).collect();
                return Err(invalid(format!("node {}: {}", n.node_id, msgs.join(", "))));
            }
        }

        let offices = OfficeRegistry::from_json(&read(&self.offices_path)?).map_err(|source| {
            ConfigError::Offices {
                path: self.offices_path.clone(),
                source,
            }
        })?;
        Ok(ResolvedConfig {
            raw: self,
            key,
            node_keys,
            nodes,
            offices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(
            tmp.path().join("offices.json"),
            r#"[{"office_id":"a","name":"A","lat_deg":23.8,"lon_deg":90.4,"webhook_url":"http://127.0.0.1:1/a"}]"#,
        )
        .unwrap();
        let mut sc = ScenarioConfig::demo(1, 2);
        sc.start_ms = Some(0);
        std::fs::write(
            tmp.path().join("scenario.json"),
            serde_json::to_string(&sc).unwrap(),
        )
        .unwrap();
        std::fs::write(
            tmp.path().join("wlds.json"),
            format!(
                r#"{{"key_hex":"{}","data_dir":"data","offices_path":"offices.json","scenario_path":"scenario.json"}}"#,
                "ab".repeat(32)
            ),
        )
        .unwrap();
        let cfg = ServerConfig::load(&tmp.path().join("wlds.json")).unwrap();
        assert_eq!(cfg.staleness_window_ms, 300_000);
        assert_eq!(cfg.debounce, DebounceConfig::default());
        assert_eq!(cfg.data_dir, tmp.path().join("data"));
        let r = cfg.resolve().unwrap();
        assert_eq!(r.nodes.len(), 2);
        assert_eq!(r.offices.offices().len(), 1);
    }

    #[test]
    fn unknown_fields_and_bad_keys_rejected() {
        assert!(serde_json::from_str::<ServerConfig>(
            r#"{"data_dir":"d","offices_path":"o","bogus":1}"#
        )
        .is_err());
        let cfg: ServerConfig =
            serde_json::from_str(r#"{"data_dir":"d","offices_path":"o","key_hex":"zz"}"#).unwrap();
        assert!(matches!(cfg.resolve(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn committed_examples_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config");
        let cfg = ServerConfig::load(&dir.join("wlds.example.json")).unwrap();
        let sc: ScenarioConfig = serde_json::from_str(
            &std::fs::read_to_string(cfg.scenario_path.as_ref().unwrap()).unwrap(),
        )
        .unwrap();
        sc.validate().unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.nodes.len(), 10);
        assert_eq!(r.offices.offices().len(), 4);
    }
}
