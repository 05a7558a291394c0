//! Helpers for tests and local demos: a recording webhook receiver and a
//! loopback server config.

use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use wlds_core::geo::MaintenanceOffice;
use wlds_core::model::PipeSpec;

use crate::config::ServerConfig;
use crate::dispatch::{AlertDocument, DispatchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WebhookMode {
    AlwaysOk,
    AlwaysFail,
    /// 500 for the first `n` calls (across all offices), then 200.
    FailFirst(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub office_id: String,
    pub document: AlertDocument,
    pub status: u16,
}

struct RecorderState {
    mode: WebhookMode,
    calls: AtomicU32,
    deliveries: Mutex<Vec<Delivery>>,
}

/// HTTP server accepting alert POSTs at `/hook/{office_id}`.
#[derive(Clone)]
pub struct WebhookRecorder {
    pub base_url: String,
    state: Arc<RecorderState>,
}

async fn hook(
    State(st): State<Arc<RecorderState>>,
    UrlPath(office_id): UrlPath<String>,
    Json(document): Json<AlertDocument>,
) -> StatusCode {
    let n = st.calls.fetch_add(1, Ordering::SeqCst);
    let status = match st.mode {
        WebhookMode::AlwaysOk => StatusCode::OK,
        WebhookMode::AlwaysFail => StatusCode::INTERNAL_SERVER_ERROR,
        WebhookMode::FailFirst(k) if n < k => StatusCode::INTERNAL_SERVER_ERROR,
        WebhookMode::FailFirst(_) => StatusCode::OK,
    };
    st.deliveries
        .lock()
        .expect("recorder poisoned")
        .push(Delivery {
            office_id,
            document,
            status: status.as_u16(),
        });
    status
}

impl WebhookRecorder {
    pub async fn spawn(mode: WebhookMode) -> std::io::Result<Self> {
        let state = Arc::new(RecorderState {
            mode,
            calls: AtomicU32::new(0),
            deliveries: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/hook/{office_id}", post(hook))
            .with_state(Arc::clone(&state));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self {
            base_url: format!("http://{addr}/hook"),
            state,
        })
    }

    pub fn url_for(&self, office_id: &str) -> String {
        format!("{}/{office_id}", self.base_url)
    }

    pub fn deliveries(&self) -> Vec<Delivery> {
        self.state
            .deliveries
            .lock()
            .expect("recorder poisoned")
            .clone()
    }

    pub fn calls(&self) -> u32 {
        self.state.calls.load(Ordering::SeqCst)
    }
}

/// Writes `offices.json` and returns a config listening on ephemeral
/// loopback ports with fast dispatch retries.
pub fn loopback_config(
    dir: &Path,
    key_hex: &str,
    nodes: Vec<PipeSpec>,
    offices: &[MaintenanceOffice],
) -> std::io::Result<ServerConfig> {
    let offices_path = dir.join("offices.json");
    std::fs::write(
        &offices_path,
        serde_json::to_vec_pretty(offices).map_err(std::io::Error::other)?,
    )?;
    let mut cfg: ServerConfig = serde_json::from_value(serde_json::json!({
        "listen_addr": "127.0.0.1:0",
        "http_addr": "127.0.0.1:0",
        "key_hex": key_hex,
        "data_dir": dir.join("data"),
        "offices_path": offices_path,
    }))
    .map_err(std::io::Error::other)?;
    cfg.nodes = nodes;
    cfg.dispatch = DispatchConfig {
        backoff_base_ms: 10,
        request_timeout_ms: 1000,
        ..DispatchConfig::default()
    };
    Ok(cfg)
}
