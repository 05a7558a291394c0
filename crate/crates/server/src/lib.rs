//! Ingest server, alerting pipeline and operator gateway.
//!
//! [`start`] binds the TCP ingest listener and the HTTP gateway over one
//! shared [`service::Service`].

pub mod client;
pub mod config;
pub mod dispatch;
pub mod events;
pub mod gateway;
pub mod ingest;
pub mod service;
pub mod testkit;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

pub use config::{ResolvedConfig, ServerConfig};
pub use service::Service;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Service(#[from] service::ServiceError),
}

pub struct ServerHandle {
    pub ingest_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub service: Arc<Service>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Stops accepting, closes sessions and waits for the listeners.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }

    /// Runs until the listeners stop on their own.
    pub async fn wait(self) {
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

const RETENTION_CHECK: Duration = Duration::from_secs(3600);

async fn bind(addr: &str) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::Bind {
            addr: addr.to_string(),
            source,
        })
}

/// Opens the data directory and starts serving.
pub async fn start(cfg: ResolvedConfig) -> Result<ServerHandle, ServerError> {
    let ingest = bind(&cfg.raw.listen_addr).await?;
    let http = bind(&cfg.raw.http_addr).await?;
    let service = Service::start(cfg)?;
    let ingest_addr = ingest.local_addr().expect("bound socket has an address");
    let http_addr = http.local_addr().expect("bound socket has an address");
    let (shutdown, rx) = watch::channel(false);

    let mut tasks = Vec::new();
    tasks.push(tokio::spawn(ingest::serve(
        ingest,
        Arc::clone(&service),
        rx.clone(),
    )));

    let app = gateway::router(Arc::clone(&service));
    let mut http_rx = rx.clone();
    tasks.push(tokio::spawn(async move {
        let stop = async move {
            let _ = http_rx.wait_for(|v| *v).await;
        };
        if let Err(e) = axum::serve(http, app).with_graceful_shutdown(stop).await {
            tracing::error!(error = %e, "http server failed");
        }
    }));

    let svc = Arc::clone(&service);
    let mut retention_rx = rx;
    tasks.push(tokio::spawn(async move {
        loop {
            let s = Arc::clone(&svc);
            match tokio::task::spawn_blocking(move || {
                s.store().enforce_retention(service::now_ms())
            })
            .await
            {
                Ok(Ok(n)) if n > 0 => {
                    tracing::info!(segments = n, "retention removed old segments")
                }
                Ok(Err(e)) => tracing::warn!(error = %e, "retention pass failed"),
                _ => {}
            }
            tokio::select! {
                _ = tokio::time::sleep(RETENTION_CHECK) => {}
                _ = retention_rx.wait_for(|v| *v) => return,
            }
        }
    }));

    tracing::info!(%ingest_addr, %http_addr, "serving");
    Ok(ServerHandle {
        ingest_addr,
        http_addr,
        service,
        shutdown,
        tasks,
    })
}
