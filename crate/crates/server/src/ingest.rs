//! Node sessions over TCP.
//!
//! Each record on the stream is `[u16 length, big-endian][frame]`; the
//! server answers every record with one ack byte (see [`ack_code`]). An
//! accepted reading is durable in the store and has been fed to the alert
//! machine before its ack is written.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{watch, Notify};
use wlds_core::model::{NodeId, TelemetryReading};
use wlds_core::wire;

use crate::service::Service;

/// Length prefixes of 0 or above this close the session.
pub const MAX_RECORD_LEN: usize = 1024;

pub const ACK_ACCEPT: u8 = 0x00;
pub const ACK_DUPLICATE: u8 = 0x01;
pub const ACK_STALE: u8 = 0x02;
pub const ACK_INVALID: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdmissionResult {
    Accept,
    Duplicate,
    Stale,
    Invalid(String),
}

pub fn ack_code(result: &AdmissionResult) -> u8 {
    match result {
        AdmissionResult::Accept => ACK_ACCEPT,
        AdmissionResult::Duplicate => ACK_DUPLICATE,
        AdmissionResult::Stale => ACK_STALE,
        AdmissionResult::Invalid(_) => ACK_INVALID,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SessionCounters {
    pub accepted: u64,
    pub duplicate: u64,
    pub stale: u64,
    pub invalid: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionState {
    pub node_id: Option<NodeId>,
    pub last_seq: Option<u32>,
    pub last_timestamp_ms: Option<u64>,
    pub counters: SessionCounters,
}

impl SessionState {
    pub fn record(&mut self, result: &AdmissionResult) {
        let c = &mut self.counters;
        match result {
            AdmissionResult::Accept => c.accepted += 1,
            AdmissionResult::Duplicate => c.duplicate += 1,
            AdmissionResult::Stale => c.stale += 1,
            AdmissionResult::Invalid(_) => c.invalid += 1,
        }
    }
}

/// Decides what to do with a decoded reading. Updates `session` on Accept.
pub fn admit(
    reading: &TelemetryReading,
    session: &mut SessionState,
    now_ms: u64,
    staleness_window_ms: u64,
) -> AdmissionResult {
    match session.node_id {
        Some(n) if n != reading.node_id => {
            return AdmissionResult::Invalid("node identity change".into())
        }
        Some(_) => {}
        None => session.node_id = Some(reading.node_id),
    }
    if session.last_seq.is_some_and(|last| reading.seq <= last) {
        return AdmissionResult::Duplicate;
    }
    if reading.timestamp_ms < now_ms.saturating_sub(staleness_window_ms) {
        return AdmissionResult::Stale;
    }
    session.last_seq = Some(reading.seq);
    session.last_timestamp_ms = Some(reading.timestamp_ms);
    AdmissionResult::Accept
}

/// Why a session ended; logged on close.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    PeerClosed,
    TransportError,
    MalformedLength,
    TooManyInvalid,
    Superseded,
    StorageError,
    Shutdown,
}

/// The JSON line logged when a session closes.
#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub event: &'static str,
    pub peer: String,
    pub node_id: Option<NodeId>,
    pub reason: CloseReason,
    pub duration_ms: u64,
    #[serde(flatten)]
    pub counters: SessionCounters,
    pub last_seq: Option<u32>,
}

pub(crate) async fn serve(
    listener: TcpListener,
    service: Arc<Service>,
    mut shutdown: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let service = Arc::clone(&service);
                    let shutdown = shutdown.clone();
                    tokio::spawn(async move {
                        let summary = handle_session(stream, peer, service, shutdown).await;
                        tracing::info!(target: "wlds::session", "{}", serde_json::to_string(&summary).unwrap_or_default());
                    });
                }
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                }
            },
            _ = shutdown.changed() => return,
        }
    }
}

/// Reads one length-prefixed record. `Ok(None)` on clean EOF before a prefix.
async fn read_record<R: AsyncReadExt + Unpin>(r: &mut R) -> Result<Option<Vec<u8>>, CloseReason> {
    let mut len = [0u8; 2];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(_) => return Err(CloseReason::TransportError),
    }
    let len = u16::from_be_bytes(len) as usize;
    if len == 0 || len > MAX_RECORD_LEN {
        return Err(CloseReason::MalformedLength);
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)
        .await
        .map_err(|_| CloseReason::TransportError)?;
    Ok(Some(buf))
}

pub async fn handle_session(
    stream: TcpStream,
    peer: SocketAddr,
    service: Arc<Service>,
    mut shutdown: watch::Receiver<bool>,
) -> SessionSummary {
    let started = Instant::now();
    let _ = stream.set_nodelay(true);
    let (rd, mut wr) = stream.into_split();
    let mut rd = BufReader::new(rd);
    let mut session = SessionState::default();
    let mut consecutive_invalid = 0u32;
    let mut registration: Option<(u64, Arc<Notify>)> = None;
    let never = Arc::new(Notify::new());

    let reason = loop {
        let evict = registration.as_ref().map_or(&never, |(_, n)| n).clone();
        let record = tokio::select! {
            r = read_record(&mut rd) => r,
            _ = evict.notified() => break CloseReason::Superseded,
            _ = shutdown.changed() => break CloseReason::Shutdown,
        };
        let bytes = match record {
            Ok(Some(b)) => b,
            Ok(None) => break CloseReason::PeerClosed,
            Err(reason) => break reason,
        };

        let key = wire::peek_node_id(&bytes).map_or(service.fleet_key(), |n| service.key_for(&n));
        let result = match wire::decode_frame(&bytes, key) {
            Err(e) => AdmissionResult::Invalid(e.kind().to_string()),
            Ok(reading) => {
                let svc = Arc::clone(&service);
                let mut s = session.clone();
                let committed = tokio::task::spawn_blocking(move || {
                    let r = svc.commit(&reading, &mut s);
                    (r, s)
                })
                .await;
                match committed {
                    Ok((Ok(result), s)) => {
                        session = s;
                        result
                    }
                    Ok((Err(e), _)) => {
                        tracing::error!(error = %e, "append failed; closing session without ack");
                        break CloseReason::StorageError;
                    }
                    Err(e) => {
                        tracing::error!(error = %e, "commit task failed");
                        break CloseReason::StorageError;
                    }
                }
            }
        };
        session.record(&result);

        if registration.is_none() {
            if let Some(node) = session.node_id {
                registration = Some(service.register_session(node));
            }
        }

        if matches!(result, AdmissionResult::Invalid(_)) {
            consecutive_invalid += 1;
        } else {
            consecutive_invalid = 0;
        }
        if wr.write_all(&[ack_code(&result)]).await.is_err() {
            break CloseReason::TransportError;
        }
        if consecutive_invalid >= service.max_consecutive_invalid() {
            break CloseReason::TooManyInvalid;
        }
    };
    let _ = wr.shutdown().await;
    if let (Some(node), Some((id, _))) = (session.node_id, &registration) {
        service.unregister_session(node, *id);
    }
    SessionSummary {
        event: "session_closed",
        peer: peer.to_string(),
        node_id: session.node_id,
        reason,
        duration_ms: started.elapsed().as_millis() as u64,
        counters: session.counters,
        last_seq: session.last_seq,
    }
}
