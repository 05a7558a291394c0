//! Blocking node-side client for the ingest protocol.
//!
//! Keeps one connection per node. A record whose ack does not arrive is
//! resent on a fresh connection until `retry_window` runs out; the server
//! answers a resend it already committed with Duplicate, so nothing is
//! stored twice.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use wlds_core::model::{NodeId, TelemetryReading};
use wlds_core::sim::ReadingSink;
use wlds_core::wire::{self, AuthKey, EncodeError, FRAME_LEN};

use crate::ingest::{ACK_ACCEPT, ACK_DUPLICATE, ACK_INVALID, ACK_STALE};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {target}: {source}")]
    Connect {
        target: String,
        source: std::io::Error,
    },
    #[error("connection to {target} failed: {source}")]
    Io {
        target: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("unexpected ack byte 0x{0:02x}")]
    BadAck(u8),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub target: String,
    pub key: AuthKey,
    pub node_keys: HashMap<NodeId, AuthKey>,
    pub retry_window: Duration,
    pub io_timeout: Duration,
    /// Keep a list of every reading acked Accept or Duplicate.
    pub record_acked: bool,
}

impl ClientConfig {
    pub fn new(target: impl Into<String>, key: AuthKey) -> Self {
        Self {
            target: target.into(),
            key,
            node_keys: HashMap::new(),
            retry_window: Duration::from_secs(2),
            io_timeout: Duration::from_secs(10),
            record_acked: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AckCounts {
    pub accepted: u64,
    pub duplicate: u64,
    pub stale: u64,
    pub invalid: u64,
    pub reconnects: u64,
}

pub struct TcpSink {
    cfg: ClientConfig,
    conns: HashMap<NodeId, TcpStream>,
    counts: AckCounts,
    acked: Vec<TelemetryReading>,
}

impl TcpSink {
    pub fn new(cfg: ClientConfig) -> Self {
        Self {
            cfg,
            conns: HashMap::new(),
            counts: AckCounts::default(),
            acked: Vec::new(),
        }
    }

    pub fn counts(&self) -> AckCounts {
        self.counts
    }

    pub fn acked(&self) -> &[TelemetryReading] {
        &self.acked
    }

    fn connect(&self) -> Result<TcpStream, ClientError> {
        let err = |source| ClientError::Connect {
            target: self.cfg.target.clone(),
            source,
        };
        let addrs: Vec<_> = self.cfg.target.to_socket_addrs().map_err(err)?.collect();
        let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, "no address");
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.cfg.io_timeout) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    s.set_read_timeout(Some(self.cfg.io_timeout)).map_err(err)?;
                    s.set_write_timeout(Some(self.cfg.io_timeout))
                        .map_err(err)?;
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(err(last))
    }

    fn exchange(stream: &mut TcpStream, record: &[u8]) -> std::io::Result<u8> {
        stream.write_all(record)?;
        let mut ack = [0u8; 1];
        stream.read_exact(&mut ack)?;
        Ok(ack[0])
    }

    /// Sends one already-encoded frame and returns the ack byte.
    pub fn send_frame(&mut self, node: NodeId, frame: &[u8]) -> Result<u8, ClientError> {
        let mut record = Vec::with_capacity(2 + frame.len());
        record.extend_from_slice(&(frame.len() as u16).to_be_bytes());
        record.extend_from_slice(frame);
        let started = Instant::now();
        loop {
            let attempt = match self.conns.get_mut(&node) {
                Some(s) => Self::exchange(s, &record).map_err(|source| ClientError::Io {
                    target: self.cfg.target.clone(),
                    source,
                }),
                None => self.connect().and_then(|mut s| {
                    let r = Self::exchange(&mut s, &record).map_err(|source| ClientError::Io {
                        target: self.cfg.target.clone(),
                        source,
                    });
                    self.conns.insert(node, s);
                    r
                }),
            };
            match attempt {
                Ok(ack) => return Ok(ack),
                Err(e) => {
                    self.conns.remove(&node);
                    if started.elapsed() >= self.cfg.retry_window {
                        return Err(e);
                    }
                    self.counts.reconnects += 1;
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    }

    pub fn send(&mut self, reading: &TelemetryReading) -> Result<u8, ClientError> {
        let key = self
            .cfg
            .node_keys
            .get(&reading.node_id)
            .unwrap_or(&self.cfg.key);
        let frame: [u8; FRAME_LEN] = wire::encode_frame(reading, key)?;
        let ack = self.send_frame(reading.node_id, &frame)?;
        match ack {
            ACK_ACCEPT => self.counts.accepted += 1,
            ACK_DUPLICATE => self.counts.duplicate += 1,
            ACK_STALE => self.counts.stale += 1,
            ACK_INVALID => self.counts.invalid += 1,
            other => return Err(ClientError::BadAck(other)),
        }
        if self.cfg.record_acked && matches!(ack, ACK_ACCEPT | ACK_DUPLICATE) {
            self.acked.push(reading.clone());
        }
        Ok(ack)
    }
}

impl ReadingSink for TcpSink {
    type Error = ClientError;

    fn accept(&mut self, reading: &TelemetryReading) -> Result<(), ClientError> {
        self.send(reading).map(|_| ())
    }
}
