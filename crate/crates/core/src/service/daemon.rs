//! UDP daemon around the sans-IO node, the loopback external source and a
//! one-shot client.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use thiserror::Error;

use super::config::{ConfigError, NodeConfig};
use crate::external::ExternalServer;
use crate::host::{Backend, EnclaveHost, RealHost, RealHostConfig, SimHost, SimHostConfig};
use crate::node::{ActionKind, Dest, Node, NodeEvent, TerminationReason};
use crate::sim::{event_rows, CSV_HEADER};
use crate::time::TrustedTimestamp;
use crate::wire::{self, KeyRing, Payload, ReplayWindow, Sealer, WireError};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_BOOTSTRAP_FAILED: i32 = 10;
pub const EXIT_RATE_VIOLATION: i32 = 11;
pub const EXIT_UNAVAILABLE: i32 = 12;

/// How often the node is polled when no datagram arrives.
const POLL_INTERVAL: Duration = Duration::from_micros(200);

/// Socket read timeouts overshoot by milliseconds on a busy host, which
/// skews held rounds and trips the watchdog. The loops poll a nonblocking
/// socket and sleep in short naps instead.
fn nap(next: Option<Instant>) {
    let d = next.map_or(POLL_INTERVAL, |at| {
        at.saturating_duration_since(Instant::now())
            .min(POLL_INTERVAL)
    });
    if !d.is_zero() {
        std::thread::sleep(d);
    }
}

fn try_recv(socket: &UdpSocket, buf: &mut [u8]) -> Option<(usize, SocketAddr)> {
    match socket.recv_from(buf) {
        Ok(v) => Some(v),
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => None,
        Err(e) => {
            debug!("recv: {e}");
            None
        }
    }
}

fn bind(addr: SocketAddr) -> Result<UdpSocket, DaemonError> {
    let socket = UdpSocket::bind(addr).map_err(io(format!("bind {addr}")))?;
    socket.set_nonblocking(true).map_err(io("socket"))?;
    Ok(socket)
}

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("keys: {0}")]
    Keys(WireError),
    #[error("{what}: {source}")]
    Io {
        what: String,
        source: std::io::Error,
    },
}

fn io(what: impl Into<String>) -> impl FnOnce(std::io::Error) -> DaemonError {
    let what = what.into();
    move |source| DaemonError::Io { what, source }
}

/// Distinct exit status per termination, so an orchestrator knows whether
/// to restart and recalibrate.
pub fn exit_code(reason: TerminationReason) -> i32 {
    match reason {
        TerminationReason::BootstrapFailed => EXIT_BOOTSTRAP_FAILED,
        TerminationReason::RateViolation | TerminationReason::FrequencyViolation => {
            EXIT_RATE_VIOLATION
        }
        TerminationReason::ClockExhausted => EXIT_UNAVAILABLE,
    }
}

fn unix_nanos() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64)
}

struct Driver<H> {
    node: Node<H>,
    socket: UdpSocket,
    peers: HashMap<u32, SocketAddr>,
    external: SocketAddr,
    /// Where each wire client was last heard from.
    clients: HashMap<u32, SocketAddr>,
    timers: BinaryHeap<Reverse<(Instant, u64)>>,
    trace: Option<BufWriter<File>>,
    /// Simulated hosts run on wall time since this instant.
    sim_epoch: Option<Instant>,
    exit: Option<i32>,
}

impl<H: EnclaveHost> Driver<H> {
    fn flush_actions(&mut self) -> Result<(), DaemonError> {
        for action in self.node.take_actions() {
            match action.kind {
                ActionKind::Send { to, bytes } => {
                    let addr = match to {
                        Dest::Peer(id) => self.peers.get(&id).copied(),
                        Dest::External => Some(self.external),
                        Dest::Client(id) => self.clients.get(&id).copied(),
                    };
                    match addr {
                        Some(a) => {
                            if let Err(e) = self.socket.send_to(&bytes, a) {
                                debug!("send to {a}: {e}");
                            }
                        }
                        None => debug!("no address for {to:?}"),
                    }
                }
                ActionKind::SetTimer { token, after_nanos } => {
                    let at = Instant::now() + Duration::from_nanos(after_nanos);
                    self.timers.push(Reverse((at, token)));
                }
                ActionKind::Respond { .. } => {}
                ActionKind::Log(event) => self.log(action.at, event)?,
            }
        }
        Ok(())
    }

    fn log(&mut self, at: u64, event: NodeEvent) -> Result<(), DaemonError> {
        let id = self.node.id();
        match &event {
            NodeEvent::Calibrated(r) => info!(
                "node {id}: calibrated, drift {:.6}, {} ops/ms",
                r.drift.as_f64(),
                r.ops_per_ms
            ),
            NodeEvent::Seeded(ts) => info!("node {id}: serving from {}", ts.nanos),
            NodeEvent::Terminated(reason) => {
                warn!("node {id}: terminated ({})", reason.name());
                self.exit = Some(exit_code(*reason));
            }
            NodeEvent::CalibrationFailed => warn!("node {id}: calibration failed"),
            other => debug!("node {id}: {other:?}"),
        }
        if let Some(w) = self.trace.as_mut() {
            for row in event_rows(at, id, &event, unix_nanos()) {
                writeln!(w, "{}", row.to_csv_line()).map_err(io("trace"))?;
            }
        }
        Ok(())
    }

    fn sync_host(&mut self)
    where
        H: SyncClock,
    {
        if let Some(start) = self.sim_epoch {
            self.node
                .host_mut()
                .advance_wall(start.elapsed().as_nanos() as u64);
        }
    }

    fn run(&mut self, shutdown: &AtomicBool) -> Result<i32, DaemonError>
    where
        H: SyncClock,
    {
        let mut buf = [0u8; 1500];
        self.sync_host();
        self.node.start();
        self.flush_actions()?;
        while !shutdown.load(Ordering::Relaxed) {
            if let Some(code) = self.exit {
                return Ok(code);
            }
            while let Some((n, from)) = try_recv(&self.socket, &mut buf) {
                self.sync_host();
                if let Ok(h) = wire::peek_header(&buf[..n]) {
                    if !self.peers.contains_key(&h.sender_id)
                        && h.sender_id != wire::EXTERNAL_SENDER_ID
                    {
                        self.clients.insert(h.sender_id, from);
                    }
                }
                self.node.on_datagram(&buf[..n]);
                self.flush_actions()?;
            }
            self.sync_host();
            let now = Instant::now();
            while let Some(&Reverse((at, token))) = self.timers.peek() {
                if at > now {
                    break;
                }
                self.timers.pop();
                self.node.on_timer(token);
            }
            self.node.poll();
            self.flush_actions()?;
            nap(self.timers.peek().map(|Reverse((at, _))| *at));
        }
        info!("node {}: shutting down", self.node.id());
        Ok(EXIT_CLEAN)
    }
}

/// Lets the driver move a simulated host along with wall time; real hosts
/// need nothing.
pub trait SyncClock {
    fn advance_wall(&mut self, _nanos: u64) {}
}

impl SyncClock for RealHost {}

impl SyncClock for SimHost {
    fn advance_wall(&mut self, nanos: u64) {
        self.advance_to(nanos);
    }
}

/// Runs a node until it terminates or `shutdown` is set. Returns the
/// process exit status.
pub fn run_node(cfg: &NodeConfig, shutdown: &AtomicBool) -> Result<i32, DaemonError> {
    let keys = KeyRing::load(&cfg.key_file).map_err(DaemonError::Keys)?;
    let socket = bind(cfg.listen)?;
    info!("node {} listening on {}", cfg.node_id, cfg.listen);
    let trace = match &cfg.trace {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io(p.display().to_string()))?);
            writeln!(w, "{CSV_HEADER}").map_err(io("trace"))?;
            Some(w)
        }
        None => None,
    };
    let params = cfg.node_params();
    let peers: HashMap<u32, SocketAddr> = cfg.peers.iter().map(|(k, v)| (*k, *v)).collect();
    let code = match cfg.backend {
        Backend::Real => {
            let host = RealHost::new(RealHostConfig {
                watchdog_gap: Duration::from_millis(cfg.watchdog_gap_ms),
                ..RealHostConfig::default()
            });
            let mut d = Driver {
                node: Node::new(params, host, keys),
                socket,
                peers,
                external: cfg.external,
                clients: HashMap::new(),
                timers: BinaryHeap::new(),
                trace,
                sim_epoch: None,
                exit: None,
            };
            let code = d.run(shutdown);
            finish_trace(d.trace.take())?;
            code?
        }
        Backend::Simulated => {
            let host = SimHost::new(SimHostConfig::default(), cfg.node_id as u64);
            let mut d = Driver {
                node: Node::new(params, host, keys),
                socket,
                peers,
                external: cfg.external,
                clients: HashMap::new(),
                timers: BinaryHeap::new(),
                trace,
                sim_epoch: Some(Instant::now()),
                exit: None,
            };
            let code = d.run(shutdown);
            finish_trace(d.trace.take())?;
            code?
        }
    };
    Ok(code)
}

fn finish_trace(trace: Option<BufWriter<File>>) -> Result<(), DaemonError> {
    if let Some(mut w) = trace {
        w.flush().map_err(io("trace"))?;
    }
    Ok(())
}

/// Loopback external time source answering with the system clock.
pub fn run_external(
    listen: SocketAddr,
    keys: KeyRing,
    radius_nanos: u64,
    shutdown: &AtomicBool,
) -> Result<(), DaemonError> {
    let socket = bind(listen)?;
    info!("external source listening on {listen}");
    let mut server = ExternalServer::new(keys, radius_nanos);
    let mut senders: HashMap<u32, SocketAddr> = HashMap::new();
    let mut held: BinaryHeap<Reverse<(Instant, u32, Vec<u8>)>> = BinaryHeap::new();
    let mut buf = [0u8; 1500];
    while !shutdown.load(Ordering::Relaxed) {
        while let Some((n, from)) = try_recv(&socket, &mut buf) {
            let arrived = Instant::now();
            if let Ok(h) = wire::peek_header(&buf[..n]) {
                senders.insert(h.sender_id, from);
            }
            match server.handle(&buf[..n], unix_nanos()) {
                Ok(Some(reply)) => {
                    let at = arrived + Duration::from_nanos(reply.send_after_nanos);
                    held.push(Reverse((at, reply.to, reply.bytes)));
                }
                Ok(None) => {}
                Err(e) => debug!("external: dropped datagram from {from}: {e}"),
            }
        }
        let now = Instant::now();
        while held.peek().is_some_and(|Reverse((at, _, _))| *at <= now) {
            let Reverse((_, to, bytes)) = held.pop().expect("peeked");
            if let Some(addr) = senders.get(&to) {
                let _ = socket.send_to(&bytes, addr);
            }
        }
        nap(held.peek().map(|Reverse((at, _, _))| *at));
    }
    Ok(())
}

/// One client request to a node.
pub fn query(
    server: SocketAddr,
    client_id: u32,
    keys: &KeyRing,
    timeout: Duration,
) -> Result<TrustedTimestamp, String> {
    let socket = UdpSocket::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let key = keys
        .get(client_id)
        .ok_or_else(|| format!("no key for client {client_id}"))?;
    // Sequence numbers only need to grow across runs of the same client.
    let mut sealer = Sealer::new(client_id, unix_nanos());
    let (nonce, bytes) = sealer
        .seal(Payload::TsRequest, key)
        .map_err(|e| e.to_string())?;
    socket.send_to(&bytes, server).map_err(|e| e.to_string())?;
    let deadline = Instant::now() + timeout;
    let mut window = ReplayWindow::default();
    let mut buf = [0u8; 1500];
    loop {
        let left = deadline
            .checked_duration_since(Instant::now())
            .ok_or("timed out")?;
        socket
            .set_read_timeout(Some(left.max(Duration::from_micros(100))))
            .map_err(|e| e.to_string())?;
        let (n, _) = socket.recv_from(&mut buf).map_err(|_| "timed out")?;
        let Ok(h) = wire::peek_header(&buf[..n]) else {
            continue;
        };
        let Some(k) = keys.get(h.sender_id) else {
            continue;
        };
        let Ok(msg) = wire::decode(&buf[..n], k, &mut window) else {
            continue;
        };
        match msg.payload {
            Payload::TsReply {
                echo,
                nanos,
                epsilon_nanos,
            } if echo == nonce => {
                return Ok(TrustedTimestamp::new(
                    nanos,
                    crate::time::Provenance::Peer(h.sender_id),
                    epsilon_nanos,
                ))
            }
            Payload::FailureReply { echo, reason } if echo == nonce => {
                return Err(format!("node refused: {reason:?}"))
            }
            _ => {}
        }
    }
}
