//! TCP ingestion service.
//!
//! Publishers send framed [`WireMessage`]s and get one reply frame per message:
//! `$ack` with a JSON [`Ack`] once the point is stored (or rejected). A frame on
//! topic `$SYS/stats` is answered with the current [`IngestStats`] as JSON.
//! Each connection is served by its own thread; store appends are serialized
//! by the store, and publishers block on their ack, which bounds in-flight work.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::store::{AppendOutcome, TimeSeriesStore};
use super::wire::{read_frame, write_frame, WireMessage};
use super::{augment, parse_sensor_message, DeviceRegistry};

pub const ACK_TOPIC: &str = "$ack";
pub const STATS_TOPIC: &str = "$SYS/stats";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad reply from service: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AckStatus {
    Accepted,
    Duplicate,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub status: AckStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: u64,
    pub duplicates: u64,
    pub rejected: u64,
    pub unregistered: u64,
    pub rejected_by_kind: BTreeMap<String, u64>,
    pub last_timestamp_ns: BTreeMap<String, i64>,
}

impl IngestStats {
    pub fn total(&self) -> u64 {
        self.accepted + self.duplicates + self.rejected
    }

    /// Share of received messages that were rejected.
    pub fn malformed_rate(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.rejected as f64 / n as f64,
        }
    }

    fn reject(&mut self, kind: &str) {
        self.rejected += 1;
        *self.rejected_by_kind.entry(kind.to_string()).or_default() += 1;
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_connections: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_connections: 256,
        }
    }
}

struct Shared {
    registry: DeviceRegistry,
    store: Arc<TimeSeriesStore>,
    stats: Mutex<IngestStats>,
    shutdown: AtomicBool,
    connections: AtomicUsize,
    streams: Mutex<Vec<TcpStream>>,
    config: ServiceConfig,
}

impl Shared {
    fn stats(&self) -> std::sync::MutexGuard<'_, IngestStats> {
        self.stats.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn handle(&self, msg: &WireMessage) -> Ack {
        let rejected = |kind: &str, error: String| Ack {
            status: AckStatus::Rejected,
            kind: Some(kind.to_string()),
            error: Some(error),
        };
        let m = match parse_sensor_message(msg) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("rejected message on `{}`: {e}", msg.topic);
                self.stats().reject(e.kind());
                return rejected(e.kind(), e.to_string());
            }
        };
        let aug = augment(&m, &self.registry);
        match self.store.append(aug.point) {
            Ok(outcome) => {
                let mut stats = self.stats();
                if aug.unregistered {
                    stats.unregistered += 1;
                }
                let last = stats
                    .last_timestamp_ns
                    .entry(m.device_id.clone())
                    .or_insert(m.timestamp_ns);
                *last = (*last).max(m.timestamp_ns);
                let status = match outcome {
                    AppendOutcome::Appended => {
                        stats.accepted += 1;
                        AckStatus::Accepted
                    }
                    AppendOutcome::Duplicate => {
                        stats.duplicates += 1;
                        AckStatus::Duplicate
                    }
                };
                Ack {
                    status,
                    kind: None,
                    error: None,
                }
            }
            Err(e) => {
                let kind = match e {
                    super::StoreError::OutOfOrder { .. } => "out_of_order",
                    _ => "store",
                };
                log::warn!("store rejected point from `{}`: {e}", m.device_id);
                self.stats().reject(kind);
                rejected(kind, e.to_string())
            }
        }
    }

    fn serve_connection(&self, stream: TcpStream) -> io::Result<()> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        loop {
            let msg = match read_frame(&mut reader) {
                Ok(Some(m)) => m,
                Ok(None) => return Ok(()),
                Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                    // Framing is lost; count it and drop the connection.
                    log::warn!("dropping connection after bad frame: {e}");
                    self.stats().reject("frame");
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            let reply = if msg.topic == STATS_TOPIC {
                let stats = self.stats().clone();
                WireMessage::new(STATS_TOPIC, serde_json::to_vec(&stats).expect("stats"))
            } else {
                let ack = self.handle(&msg);
                WireMessage::new(ACK_TOPIC, serde_json::to_vec(&ack).expect("ack"))
            };
            write_frame(&mut writer, &reply)?;
        }
    }
}

/// A running service; dropping it without [`ServiceHandle::shutdown`] leaves
/// the listener thread running.
pub struct ServiceHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> IngestStats {
        self.shared.stats().clone()
    }

    pub fn store(&self) -> &Arc<TimeSeriesStore> {
        &self.shared.store
    }

    /// Blocks until the listener stops (after [`ServiceHandle::shutdown`] from
    /// another handle clone or process signal).
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for s in self
            .shared
            .streams
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .drain(..)
        {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Starts the ingestion service on `bind` (use port 0 for an ephemeral port).
pub fn serve(
    bind: impl ToSocketAddrs + std::fmt::Display,
    registry: DeviceRegistry,
    store: Arc<TimeSeriesStore>,
    config: ServiceConfig,
) -> Result<ServiceHandle, ServiceError> {
    let listener = TcpListener::bind(&bind).map_err(|source| ServiceError::Bind {
        addr: bind.to_string(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        registry,
        store,
        stats: Mutex::new(IngestStats::default()),
        shutdown: AtomicBool::new(false),
        connections: AtomicUsize::new(0),
        streams: Mutex::new(Vec::new()),
        config,
    });
    let acceptor_shared = Arc::clone(&shared);
    let acceptor = std::thread::Builder::new()
        .name("ingest-accept".into())
        .spawn(move || accept_loop(listener, acceptor_shared))?;
    log::info!("ingestion service listening on {addr}");
    Ok(ServiceHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if shared.connections.load(Ordering::SeqCst) >= shared.config.max_connections {
            log::warn!("connection limit reached, refusing {:?}", stream.peer_addr());
            let _ = stream.shutdown(Shutdown::Both);
            continue;
        }
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            let mut streams = shared.streams.lock().unwrap_or_else(|e| e.into_inner());
            streams.retain(|s| s.peer_addr().is_ok());
            streams.push(clone);
        }
        shared.connections.fetch_add(1, Ordering::SeqCst);
        let conn_shared = Arc::clone(&shared);
        let spawned = std::thread::Builder::new()
            .name("ingest-conn".into())
            .spawn(move || {
                if let Err(e) = conn_shared.serve_connection(stream) {
                    log::debug!("connection closed: {e}");
                }
                conn_shared.connections.fetch_sub(1, Ordering::SeqCst);
            });
        if let Err(e) = spawned {
            log::warn!("cannot spawn connection thread: {e}");
            shared.connections.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

/// Blocking client: one request, one reply.
pub struct Publisher {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Publisher {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ServiceError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn request(&mut self, msg: &WireMessage) -> Result<WireMessage, ServiceError> {
        write_frame(&mut self.writer, msg)?;
        read_frame(&mut self.reader)?
            .ok_or_else(|| ServiceError::Protocol("connection closed before reply".into()))
    }

    pub fn publish(&mut self, msg: &WireMessage) -> Result<Ack, ServiceError> {
        let reply = self.request(msg)?;
        if reply.topic != ACK_TOPIC {
            return Err(ServiceError::Protocol(format!(
                "expected {ACK_TOPIC}, got {}",
                reply.topic
            )));
        }
        serde_json::from_slice(&reply.payload).map_err(|e| ServiceError::Protocol(e.to_string()))
    }

    pub fn stats(&mut self) -> Result<IngestStats, ServiceError> {
        let reply = self.request(&WireMessage::new(STATS_TOPIC, Vec::new()))?;
        serde_json::from_slice(&reply.payload).map_err(|e| ServiceError::Protocol(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::store::Durability;
    use crate::telemetry::{DeviceInfo, Phase, TagFilter};

    fn start() -> (tempfile::TempDir, ServiceHandle) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(TimeSeriesStore::open(dir.path(), Durability::Flush).unwrap());
        let mut reg = DeviceRegistry::default();
        reg.insert(
            "plug1",
            DeviceInfo {
                phase: Phase::L1,
                location: "lab".into(),
                vendor: "Nous A1T".into(),
                bus: "741".into(),
            },
        );
        let h = serve("127.0.0.1:0", reg, store, ServiceConfig::default()).unwrap();
        (dir, h)
    }

    #[test]
    fn valid_message_is_stored() {
        let (_dir, h) = start();
        let mut p = Publisher::connect(h.local_addr()).unwrap();
        let ack = p
            .publish(&WireMessage::new(
                "tele/plug1/SENSOR",
                r#"{"Time":"2023-01-01T12:00:00","ENERGY":{"Voltage":230.1}}"#,
            ))
            .unwrap();
        assert_eq!(ack.status, AckStatus::Accepted);
        let stats = p.stats().unwrap();
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.last_timestamp_ns["plug1"], 1_672_574_400_000_000_000);
        let pts = h
            .store()
            .query(&TagFilter::device("plug1"), 0, i64::MAX)
            .unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].tags.vendor, "Nous A1T");
        h.shutdown();
    }

    #[test]
    fn malformed_message_is_counted_and_service_survives() {
        let (_dir, h) = start();
        let mut p = Publisher::connect(h.local_addr()).unwrap();
        let ack = p
            .publish(&WireMessage::new("tele/plug1/SENSOR", "{broken"))
            .unwrap();
        assert_eq!(ack.status, AckStatus::Rejected);
        assert_eq!(ack.kind.as_deref(), Some("json"));
        let stats = p.stats().unwrap();
        assert_eq!(stats.rejected, 1);
        assert_eq!(stats.rejected_by_kind["json"], 1);

        // Garbage framing drops only that connection.
        use std::io::Write;
        let mut raw = TcpStream::connect(h.local_addr()).unwrap();
        raw.write_all(&[0xff, 0xff, 0xff, 0xff]).unwrap();
        drop(raw);

        let mut p2 = Publisher::connect(h.local_addr()).unwrap();
        let ack = p2
            .publish(&WireMessage::new(
                "tele/plug1/SENSOR",
                r#"{"Time":"2023-01-01T12:00:10","ENERGY":{"Voltage":230.0}}"#,
            ))
            .unwrap();
        assert_eq!(ack.status, AckStatus::Accepted);
        h.shutdown();
    }

    #[test]
    fn bind_failure_is_reported() {
        let (_dir, h) = start();
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(TimeSeriesStore::open(dir.path(), Durability::Flush).unwrap());
        let err = serve(
            h.local_addr(),
            DeviceRegistry::default(),
            store,
            ServiceConfig::default(),
        );
        assert!(matches!(err, Err(ServiceError::Bind { .. })));
        h.shutdown();
    }
}
