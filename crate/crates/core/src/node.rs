//! The node state machine.
//!
//! A [`Node`] owns its host and reacts to inputs (datagrams, timer
//! expiries, client requests, refresher polls) by pushing [`Action`]s for
//! the driver to carry out. It performs no IO itself, so the simulator and
//! the UDP daemon run exactly the same logic.
//!
//! Error accounting. A locally served value is `anchor + corrected elapsed`
//! with `ε = ε_anchor + residual(elapsed)`, where the residual covers the
//! largest counter-rate error the guard lets through. Adopting a remote
//! value `R` read over a round trip `rtt` after `Δ` outside the enclave
//! gives `ε = Δ + rtt + residual(rtt) + ε_R`. A self-untaint keeps
//! `last + unit` and reports the larger of the two bounds that apply.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::calibration::{
    CalibrationParams, CalibrationResult, CalibrationStep, Calibrator, RoundKind, RoundOutcome,
    RoundRejection,
};
use crate::guard::{run_guard, GuardConfig, GuardVerdict, VerdictKind};
use crate::host::{EnclaveHost, HostCounterReading};
use crate::time::{
    apply_drift, compute_error_bound, NodeId, OffEnclaveInterval, Provenance, ResolutionUnit,
    RttEstimate, TrustedTimestamp,
};
use crate::wire::{
    self, FailureReason, KeyRing, LinkKey, MsgType, Payload, ReplayWindow, Sealer, WireError,
    WireMessage, WireNonce, DEFAULT_REPLAY_WINDOW, EXTERNAL_SENDER_ID,
};

/// Protocol parameters of one node.
#[derive(Debug, Clone)]
pub struct NodeParams {
    pub id: NodeId,
    /// Peer ids in round-robin order; must not contain `id`.
    pub peers: Vec<NodeId>,
    pub resolution: ResolutionUnit,
    pub calibration: CalibrationParams,
    pub guard: GuardConfig,
    /// Peer RTT assumed before any exchange has been measured.
    pub initial_peer_rtt_nanos: u64,
    pub peer_timeout_floor_nanos: u64,
    pub external_timeout_nanos: u64,
    /// Wait before re-querying peers when a lower-id peer is also
    /// untainting.
    pub defer_backoff_nanos: u64,
    pub max_deferrals: u32,
    pub bootstrap_retries: u32,
    /// Time spent building and committing a peer reply.
    pub reply_commit_nanos: u64,
    /// Adopt a peer reply at `R + rtt/2` instead of `R`. Without this every
    /// peer adoption loses one one-way latency and the cluster falls
    /// steadily behind real time.
    pub compensate_latency: bool,
    /// Seed attempts aborted by an exit before bootstrap gives up.
    pub max_seed_aborts: u32,
    /// How long to keep waiting for peers that are still calibrating
    /// before falling back to the external source.
    pub max_bootstrap_wait_nanos: u64,
}

impl NodeParams {
    pub fn new(id: NodeId, peers: Vec<NodeId>) -> Self {
        Self {
            id,
            peers,
            resolution: ResolutionUnit::NANOSECOND,
            calibration: CalibrationParams::default(),
            guard: GuardConfig::default(),
            initial_peer_rtt_nanos: 140_000,
            peer_timeout_floor_nanos: 25_000_000,
            external_timeout_nanos: 1_000_000_000,
            defer_backoff_nanos: 10_000_000,
            max_deferrals: 50,
            bootstrap_retries: 3,
            reply_commit_nanos: 2_000,
            compensate_latency: true,
            max_seed_aborts: 1_000,
            max_bootstrap_wait_nanos: 30_000_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ServeError {
    #[error("no peer or external source could untaint the clock")]
    Unavailable,
    #[error("node is still bootstrapping")]
    NotReady,
    #[error("node has terminated")]
    Terminated,
}

/// Why a node stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    RateViolation,
    FrequencyViolation,
    BootstrapFailed,
    ClockExhausted,
}

impl TerminationReason {
    pub fn name(self) -> &'static str {
        match self {
            TerminationReason::RateViolation => "rate_violation",
            TerminationReason::FrequencyViolation => "frequency_violation",
            TerminationReason::BootstrapFailed => "bootstrap_failed",
            TerminationReason::ClockExhausted => "clock_exhausted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UntaintKind {
    SelfUntaint,
    PeerAdopt,
    ExternalAdopt,
}

impl UntaintKind {
    pub fn name(self) -> &'static str {
        match self {
            UntaintKind::SelfUntaint => "self_untaint",
            UntaintKind::PeerAdopt => "peer_adopt",
            UntaintKind::ExternalAdopt => "external_adopt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UntaintOutcome {
    pub kind: UntaintKind,
    pub adopted: TrustedTimestamp,
}

/// Who is waiting for a client response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ticket {
    /// In-process caller, identified by the driver.
    Local(u64),
    /// Wire client; the reply echoes its request nonce.
    Wire { sender: u32, echo: WireNonce },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dest {
    Peer(NodeId),
    External,
    Client(u32),
}

/// Everything worth recording about a node's behaviour.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    CalibrationRound {
        kind: RoundKind,
        rejection: Option<RoundRejection>,
    },
    Calibrated(CalibrationResult),
    CalibrationFailed,
    /// Initial absolute time obtained from the external source.
    Seeded(TrustedTimestamp),
    /// The cache stopped being trusted; `last_nanos` is its frozen value.
    Tainted {
        last_nanos: u64,
    },
    PeerQuery(NodeId),
    PeerFailure(NodeId),
    PeerTimeout(NodeId),
    /// A lower-id peer is untainting too; retry peers after a backoff.
    Deferred,
    ExternalQuery,
    ExternalTimeout,
    /// An exit happened while a remote read was in flight.
    UntaintAborted,
    Untainted {
        outcome: UntaintOutcome,
        rtt_nanos: u64,
        delta_nanos: u64,
    },
    Guard(GuardVerdict),
    /// Answered a peer with the cached value.
    PeerReplied(NodeId),
    /// An exit hit between reading the cache and sending a peer reply.
    ReplySuppressed(NodeId),
    FailureReplied(NodeId),
    Served(TrustedTimestamp),
    ServeFailed(ServeError),
    Dropped(WireError),
    Terminated(TerminationReason),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind {
    Send {
        to: Dest,
        bytes: Vec<u8>,
    },
    Respond {
        ticket: u64,
        result: Result<TrustedTimestamp, ServeError>,
    },
    SetTimer {
        token: u64,
        after_nanos: u64,
    },
    Log(NodeEvent),
}

/// Output of the node, stamped with the host's trace clock when emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub at: u64,
    pub kind: ActionKind,
}

/// The cached timestamp and its taint state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockCache {
    pub last: TrustedTimestamp,
    pub tainted: bool,
    pub last_raw: HostCounterReading,
}

/// Round-robin cursor over the peer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRing {
    peers: Vec<NodeId>,
    cursor: usize,
}

impl PeerRing {
    pub fn new(peers: Vec<NodeId>) -> Self {
        Self { peers, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.peers.contains(&id)
    }

    /// Returns the peer under the cursor and moves past it.
    pub fn advance(&mut self) -> Option<NodeId> {
        let id = *self.peers.get(self.cursor)?;
        self.cursor = (self.cursor + 1) % self.peers.len();
        Some(id)
    }
}

/// Counter position the current time base was taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Anchor {
    ticks: u64,
    epoch_id: u64,
    nanos: u64,
    eps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pending {
    nonce: WireNonce,
    to: Dest,
    sent: HostCounterReading,
    exits: u64,
    token: u64,
}

#[derive(Debug, Clone)]
struct Cycle {
    tried: usize,
    /// A lower-id peer failed this pass; it is the one to go external.
    lower_failed: bool,
    /// A peer is still bootstrapping and will be able to answer later.
    bootstrap_wait: bool,
    deferrals: u32,
    bootstrap_deferrals: u32,
    pending: Option<Pending>,
    backoff_token: Option<u64>,
}

impl Cycle {
    fn new() -> Self {
        Self {
            tried: 0,
            lower_failed: false,
            bootstrap_wait: false,
            deferrals: 0,
            bootstrap_deferrals: 0,
            pending: None,
            backoff_token: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Phase {
    Idle,
    Calibrating {
        cal: Box<Calibrator>,
        timer: Option<(u64, WireNonce)>,
        fresh_timer: Option<u64>,
    },
    /// Calibrated; the untaint cycle fetches a first timestamp.
    Seeding {
        external_timeouts: u32,
        aborts: u32,
    },
    Serving,
    Terminated(TerminationReason),
}

/// Coarse lifecycle state, for drivers and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Idle,
    Calibrating,
    Seeding,
    Serving,
    Untainting,
    Terminated(TerminationReason),
}

/// Residual drift allowance, in parts per million of elapsed time, for a
/// guard threshold `th`: a counter off by `th` relative to real time is
/// off by `th / (1 - th)` relative to its own reading, plus a 0.2% margin
/// for calibration and instruction-count jitter.
fn residual_ppm(threshold: f64) -> u64 {
    let th = threshold.clamp(0.0, 0.5);
    (th / (1.0 - th) * 1e6).ceil() as u64 + 2_000
}

fn residual(elapsed: u64, ppm: u64) -> u64 {
    let r = (elapsed as u128 * ppm as u128).div_ceil(1_000_000) + 1;
    r.min(u64::MAX as u128) as u64
}

pub struct Node<H> {
    params: NodeParams,
    host: H,
    keys: KeyRing,
    sealer: Sealer,
    windows: HashMap<u32, ReplayWindow>,
    ring: PeerRing,
    phase: Phase,
    calib: Option<CalibrationResult>,
    anchor: Option<Anchor>,
    cache: Option<ClockCache>,
    last_served: Option<TrustedTimestamp>,
    last_guard_nanos: u64,
    cycle: Option<Cycle>,
    queue: VecDeque<Ticket>,
    peer_rtt_ewma: u64,
    residual_ppm: u64,
    next_token: u64,
    bootstrap_failures: u32,
    actions: Vec<Action>,
}

impl<H: EnclaveHost> Node<H> {
    pub fn new(params: NodeParams, host: H, keys: KeyRing) -> Self {
        let ring = PeerRing::new(params.peers.clone());
        let residual_ppm = residual_ppm(params.guard.rate_threshold);
        let peer_rtt_ewma = params.initial_peer_rtt_nanos;
        Self {
            sealer: Sealer::new(params.id, 0),
            params,
            host,
            keys,
            windows: HashMap::new(),
            ring,
            phase: Phase::Idle,
            calib: None,
            anchor: None,
            cache: None,
            last_served: None,
            last_guard_nanos: 0,
            cycle: None,
            queue: VecDeque::new(),
            peer_rtt_ewma,
            residual_ppm,
            next_token: 1,
            bootstrap_failures: 0,
            actions: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.params.id
    }

    pub fn params(&self) -> &NodeParams {
        &self.params
    }

    pub fn host(&self) -> &H {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut H {
        &mut self.host
    }

    pub fn cache(&self) -> Option<ClockCache> {
        self.cache
    }

    pub fn calibration(&self) -> Option<&CalibrationResult> {
        self.calib.as_ref()
    }

    pub fn status(&self) -> NodeStatus {
        match &self.phase {
            Phase::Idle => NodeStatus::Idle,
            Phase::Calibrating { .. } => NodeStatus::Calibrating,
            Phase::Seeding { .. } => NodeStatus::Seeding,
            Phase::Serving if self.cycle.is_some() => NodeStatus::Untainting,
            Phase::Serving => NodeStatus::Serving,
            Phase::Terminated(r) => NodeStatus::Terminated(*r),
        }
    }

    /// Drains the actions produced since the last call.
    pub fn take_actions(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }

    fn emit(&mut self, kind: ActionKind) {
        let at = self.host.trace_clock();
        self.actions.push(Action { at, kind });
    }

    fn log(&mut self, event: NodeEvent) {
        self.emit(ActionKind::Log(event));
    }

    fn timer(&mut self, after_nanos: u64) -> u64 {
        let token = self.next_token;
        self.next_token += 1;
        self.emit(ActionKind::SetTimer { token, after_nanos });
        token
    }

    fn key_for(&self, id: u32) -> Option<LinkKey> {
        self.keys.get(id).cloned()
    }

    fn send(&mut self, to: Dest, payload: Payload) -> Option<WireNonce> {
        let id = match to {
            Dest::Peer(id) | Dest::Client(id) => id,
            Dest::External => EXTERNAL_SENDER_ID,
        };
        let key = self.key_for(id)?;
        match self.sealer.seal(payload, &key) {
            Ok((nonce, bytes)) => {
                self.emit(ActionKind::Send { to, bytes });
                Some(nonce)
            }
            Err(e) => {
                self.log(NodeEvent::Dropped(e));
                None
            }
        }
    }

    // ----- bootstrap -----

    /// Starts (or restarts) bootstrap: calibration, then seeding. Keeps
    /// the cached value and the last served timestamp so that time never
    /// runs backwards across a restart.
    pub fn start(&mut self) {
        self.calib = None;
        self.anchor = None;
        self.cycle = None;
        if let Some(c) = self.cache.as_mut() {
            c.tainted = true;
        }
        let cal = match Calibrator::new(self.params.calibration.clone()) {
            Ok(c) => c,
            Err(_) => {
                self.terminate(TerminationReason::BootstrapFailed);
                return;
            }
        };
        self.host.clear_exit_flag();
        self.phase = Phase::Calibrating {
            cal: Box::new(cal),
            timer: None,
            fresh_timer: None,
        };
        self.drive_calibration();
    }

    fn drive_calibration(&mut self) {
        loop {
            let reading = self.host.read_counter();
            let Phase::Calibrating { cal, .. } = &mut self.phase else {
                return;
            };
            match cal.step(reading.epoch_id) {
                CalibrationStep::AwaitReply => return,
                CalibrationStep::AwaitFreshEpoch => {
                    // An exit must come within L; if none does, the
                    // current epoch is as good as a fresh one.
                    let l = cal.params().l_nanos;
                    let token = self.timer(l);
                    if let Phase::Calibrating { fresh_timer, .. } = &mut self.phase {
                        *fresh_timer = Some(token);
                    }
                    return;
                }
                CalibrationStep::Request { wait_nanos } => {
                    let Some(nonce) = self.send(Dest::External, Payload::CalRequest { wait_nanos })
                    else {
                        self.bootstrap_failed();
                        return;
                    };
                    let reading = self.host.read_counter();
                    let Phase::Calibrating { cal, .. } = &mut self.phase else {
                        return;
                    };
                    cal.sent(nonce, wait_nanos, reading.ticks, reading.epoch_id);
                    let after = cal.reply_timeout_nanos();
                    let token = self.timer(after);
                    if let Phase::Calibrating { timer, .. } = &mut self.phase {
                        *timer = Some((token, nonce));
                    }
                    return;
                }
                CalibrationStep::MeasureOps => {
                    let window = cal.params().ops_window;
                    let epoch = cal.baseline_epoch();
                    let ops = self.host.time_instruction_window(window);
                    let mem = self.host.time_memory_window(window);
                    let (Ok(ops), Ok(mem)) = (ops, mem) else {
                        // Interrupted: the next step asks for another held
                        // round in the new epoch.
                        continue;
                    };
                    if Some(self.host.read_counter().epoch_id) != epoch {
                        continue;
                    }
                    let Phase::Calibrating { cal, .. } = &self.phase else {
                        return;
                    };
                    match cal.finish(ops, Some(mem)) {
                        Ok(r) => {
                            self.log(NodeEvent::Calibrated(r.clone()));
                            self.host.clear_exit_flag();
                            self.calib = Some(r);
                            self.phase = Phase::Seeding {
                                external_timeouts: 0,
                                aborts: 0,
                            };
                            self.start_untaint();
                        }
                        Err(_) => self.bootstrap_failed(),
                    }
                    return;
                }
                CalibrationStep::Failed => {
                    self.log(NodeEvent::CalibrationFailed);
                    self.bootstrap_failed();
                    return;
                }
            }
        }
    }

    fn bootstrap_failed(&mut self) {
        self.bootstrap_failures += 1;
        if self.bootstrap_failures >= self.params.bootstrap_retries {
            self.terminate(TerminationReason::BootstrapFailed);
        } else {
            self.start();
        }
    }

    fn on_calibration_reply(&mut self, echo: WireNonce, server_elapsed: u64, server_nanos: u64) {
        let reading = self.host.read_counter();
        let Phase::Calibrating { cal, timer, .. } = &mut self.phase else {
            return;
        };
        if cal.pending_nonce() != Some(echo) {
            return;
        }
        *timer = None;
        let outcome = cal.on_reply(
            echo,
            server_elapsed,
            server_nanos,
            reading.ticks,
            reading.epoch_id,
        );
        self.log_round(outcome);
        self.drive_calibration();
    }

    fn log_round(&mut self, outcome: RoundOutcome) {
        let (kind, rejection) = match outcome {
            RoundOutcome::Valid { kind, .. } => (kind, None),
            RoundOutcome::Rejected(r) => (RoundKind::Held, Some(r)),
        };
        self.log(NodeEvent::CalibrationRound { kind, rejection });
    }

    /// Point estimate of the remote clock at reply arrival. A peer reads
    /// its value `reply_commit` before sending, so it is that much older
    /// than the return leg alone. A slow exchange usually means the peer
    /// sat on the request, so the round trip used is capped at the usual
    /// one.
    fn remote_value(&self, nanos: u64, rtt: u64, prov: Provenance) -> u64 {
        match prov {
            Provenance::External => nanos.saturating_add(rtt / 2),
            _ if self.params.compensate_latency => {
                let typical = rtt.min(self.peer_rtt_ewma);
                let commit = self.params.reply_commit_nanos.min(typical);
                nanos.saturating_add((typical + commit) / 2)
            }
            _ => nanos,
        }
    }

    // ----- cache -----

    fn local_value(&self, reading: HostCounterReading) -> Option<TrustedTimestamp> {
        let anchor = self.anchor?;
        let calib = self.calib.as_ref()?;
        if reading.epoch_id != anchor.epoch_id {
            return None;
        }
        let elapsed = apply_drift(reading.ticks.wrapping_sub(anchor.ticks), calib.drift);
        Some(TrustedTimestamp::new(
            anchor.nanos.saturating_add(elapsed),
            Provenance::LocalCounter,
            anchor
                .eps
                .saturating_add(residual(elapsed, self.residual_ppm)),
        ))
    }

    /// Re-reads the counter into the cache, or marks the cache tainted if
    /// an exit happened since the anchor was taken.
    pub fn refresh_cache(&mut self) {
        if !matches!(self.phase, Phase::Serving) {
            return;
        }
        let Some(mut cache) = self.cache else { return };
        if cache.tainted {
            return;
        }
        let flag = self.host.poll_exit_flag();
        let reading = self.host.read_counter();
        match self.local_value(reading) {
            Some(ts) if !flag.tainted => {
                if ts.nanos >= cache.last.nanos {
                    cache.last = ts;
                    cache.last_raw = reading;
                }
                self.cache = Some(cache);
            }
            _ => self.taint(),
        }
    }

    fn taint(&mut self) {
        let Some(c) = self.cache.as_mut() else { return };
        if c.tainted {
            return;
        }
        c.tainted = true;
        let last_nanos = c.last.nanos;
        self.log(NodeEvent::Tainted { last_nanos });
    }

    /// Refresher tick: notices exits promptly and starts untainting
    /// without waiting for a client.
    pub fn poll(&mut self) {
        match &mut self.phase {
            Phase::Calibrating {
                cal, fresh_timer, ..
            } => {
                if self.host.poll_exit_flag().tainted {
                    if let Some(outcome) = cal.on_exit() {
                        self.host.clear_exit_flag();
                        self.log_round(outcome);
                    } else {
                        self.host.clear_exit_flag();
                    }
                    if let Phase::Calibrating {
                        cal, fresh_timer, ..
                    } = &mut self.phase
                    {
                        cal.epoch_started();
                        *fresh_timer = None;
                    }
                    self.drive_calibration();
                } else {
                    let _ = fresh_timer;
                }
            }
            Phase::Serving => {
                self.refresh_cache();
                if self.cache.is_some_and(|c| c.tainted) {
                    self.start_untaint();
                }
            }
            _ => {}
        }
    }

    // ----- serving -----

    /// Serves an in-process client identified by `ticket`.
    pub fn serve_client(&mut self, ticket: u64) {
        self.serve(Ticket::Local(ticket));
    }

    fn serve(&mut self, ticket: Ticket) {
        match self.phase {
            Phase::Serving => {}
            Phase::Terminated(_) => return self.respond(ticket, Err(ServeError::Terminated)),
            _ => return self.respond(ticket, Err(ServeError::NotReady)),
        }
        if self.cycle.is_some() {
            self.queue.push_back(ticket);
            return;
        }
        self.refresh_cache();
        if self.cache.is_some_and(|c| !c.tainted) && self.periodic_guard_due() {
            self.run_periodic_guard();
            if !matches!(self.phase, Phase::Serving) {
                return self.respond(ticket, Err(ServeError::Terminated));
            }
            self.refresh_cache();
        }
        if self.cache.is_none_or(|c| c.tainted) {
            self.queue.push_back(ticket);
            self.start_untaint();
            return;
        }
        self.respond_value(ticket);
    }

    fn periodic_guard_due(&self) -> bool {
        self.cache.is_some_and(|c| {
            c.last.nanos.saturating_sub(self.last_guard_nanos) >= self.params.guard.period_nanos
        })
    }

    fn run_periodic_guard(&mut self) {
        let verdict = self.guard();
        if verdict.kind == VerdictKind::Interrupted {
            self.taint();
        }
    }

    /// Runs the guard and terminates on a violation.
    fn guard(&mut self) -> GuardVerdict {
        let calib = self.calib.clone().expect("guard runs after calibration");
        let verdict = run_guard(&mut self.host, &calib, &self.params.guard);
        self.log(NodeEvent::Guard(verdict));
        match verdict.kind {
            VerdictKind::RateViolation => self.terminate(TerminationReason::RateViolation),
            VerdictKind::FrequencyViolation => {
                self.terminate(TerminationReason::FrequencyViolation)
            }
            VerdictKind::Pass => {
                if let Some(c) = self.cache {
                    self.last_guard_nanos = c.last.nanos;
                }
            }
            VerdictKind::Interrupted => {}
        }
        verdict
    }

    fn respond_value(&mut self, ticket: Ticket) {
        let cache = self.cache.expect("serving with a cache");
        let unit = self.params.resolution;
        let ts = match self.last_served {
            Some(prev) if prev.nanos >= cache.last.nanos => match prev.advance(unit) {
                // Either bound is valid: the cache is below the value and
                // the previous serve plus one unit is above it.
                Ok(next) => TrustedTimestamp::new(
                    next.nanos,
                    cache.last.provenance,
                    cache
                        .last
                        .error_bound_nanos
                        .max(prev.error_bound_nanos.saturating_add(unit.nanos_per_tick())),
                ),
                Err(_) => {
                    self.terminate(TerminationReason::ClockExhausted);
                    return self.respond(ticket, Err(ServeError::Terminated));
                }
            },
            _ => cache.last,
        };
        self.last_served = Some(ts);
        self.respond(ticket, Ok(ts));
    }

    fn respond(&mut self, ticket: Ticket, result: Result<TrustedTimestamp, ServeError>) {
        match result {
            Ok(ts) => self.log(NodeEvent::Served(ts)),
            Err(e) => self.log(NodeEvent::ServeFailed(e)),
        }
        match ticket {
            Ticket::Local(id) => self.emit(ActionKind::Respond { ticket: id, result }),
            Ticket::Wire { sender, echo } => {
                let payload = match result {
                    Ok(ts) => Payload::TsReply {
                        echo,
                        nanos: ts.nanos,
                        epsilon_nanos: ts.error_bound_nanos,
                    },
                    Err(_) => Payload::FailureReply {
                        echo,
                        reason: FailureReason::Unavailable,
                    },
                };
                self.send(Dest::Client(sender), payload);
            }
        }
    }

    fn fail_queue(&mut self, err: ServeError) {
        while let Some(t) = self.queue.pop_front() {
            self.respond(t, Err(err));
        }
    }

    fn drain_queue(&mut self) {
        while let Some(t) = self.queue.pop_front() {
            self.refresh_cache();
            if !matches!(self.phase, Phase::Serving) || self.cache.is_none_or(|c| c.tainted) {
                self.queue.push_front(t);
                if matches!(self.phase, Phase::Serving) {
                    self.start_untaint();
                }
                return;
            }
            self.respond_value(t);
        }
    }

    // ----- untainting -----

    fn peer_timeout(&self) -> u64 {
        (self.peer_rtt_ewma.saturating_mul(4)).max(self.params.peer_timeout_floor_nanos)
    }

    fn start_untaint(&mut self) {
        if self.cycle.is_some() || !matches!(self.phase, Phase::Serving | Phase::Seeding { .. }) {
            return;
        }
        self.cycle = Some(Cycle::new());
        self.next_query();
    }

    fn restart_cycle(&mut self) {
        let mut c = Cycle::new();
        if let Some(old) = &self.cycle {
            c.deferrals = old.deferrals;
            c.bootstrap_deferrals = old.bootstrap_deferrals;
        }
        self.cycle = Some(c);
        self.next_query();
    }

    fn next_query(&mut self) {
        let Some(cycle) = self.cycle.as_ref() else {
            return;
        };
        if cycle.tried < self.ring.len() {
            let peer = self.ring.advance().expect("ring not empty");
            self.query(Dest::Peer(peer), Payload::TsRequest, self.peer_timeout());
            self.log(NodeEvent::PeerQuery(peer));
            if let Some(c) = self.cycle.as_mut() {
                c.tried += 1;
            }
            return;
        }
        let backoff = self.params.defer_backoff_nanos.max(1);
        let bootstrap_cap =
            (self.params.max_bootstrap_wait_nanos / backoff).min(u32::MAX as u64) as u32;
        let wait_lower = cycle.lower_failed && cycle.deferrals < self.params.max_deferrals;
        let wait_bootstrap = cycle.bootstrap_wait && cycle.bootstrap_deferrals < bootstrap_cap;
        if wait_lower || wait_bootstrap {
            let token = self.timer(backoff);
            let c = self.cycle.as_mut().expect("cycle present");
            if wait_bootstrap {
                c.bootstrap_deferrals += 1;
            } else {
                c.deferrals += 1;
            }
            c.tried = 0;
            c.lower_failed = false;
            c.bootstrap_wait = false;
            c.backoff_token = Some(token);
            self.log(NodeEvent::Deferred);
            return;
        }
        self.log(NodeEvent::ExternalQuery);
        self.query(
            Dest::External,
            Payload::ExtRequest,
            self.params.external_timeout_nanos,
        );
    }

    fn query(&mut self, to: Dest, payload: Payload, timeout: u64) {
        let exits = self.host.poll_exit_flag().exits_observed;
        let sent = self.host.read_counter();
        let Some(nonce) = self.send(to, payload) else {
            // No key for this destination; treat as an immediate timeout.
            let token = self.timer(0);
            if let Some(c) = self.cycle.as_mut() {
                c.pending = Some(Pending {
                    nonce: [0xff; 12],
                    to,
                    sent,
                    exits,
                    token,
                });
            }
            return;
        };
        let token = self.timer(timeout);
        if let Some(c) = self.cycle.as_mut() {
            c.pending = Some(Pending {
                nonce,
                to,
                sent,
                exits,
                token,
            });
        }
    }

    fn take_pending(&mut self, echo: WireNonce, from: Dest) -> Option<Pending> {
        let c = self.cycle.as_mut()?;
        match c.pending {
            Some(p) if p.nonce == echo && p.to == from => {
                c.pending = None;
                Some(p)
            }
            _ => None,
        }
    }

    fn on_remote_reply(&mut self, p: Pending, nanos: u64, eps: u64, prov: Provenance) {
        let reading = self.host.read_counter();
        let flag = self.host.poll_exit_flag();
        if flag.exits_observed != p.exits || reading.epoch_id != p.sent.epoch_id {
            self.log(NodeEvent::UntaintAborted);
            self.host.clear_exit_flag();
            if let Phase::Seeding { aborts, .. } = &mut self.phase {
                *aborts += 1;
                if *aborts >= self.params.max_seed_aborts {
                    self.terminate(TerminationReason::BootstrapFailed);
                    return;
                }
            }
            self.restart_cycle();
            return;
        }
        let Some(drift) = self.calib.as_ref().map(|c| c.drift) else {
            return;
        };
        let rtt = apply_drift(reading.ticks.wrapping_sub(p.sent.ticks), drift);
        let value = self.remote_value(nanos, rtt, prov);
        if let Provenance::Peer(_) = prov {
            self.peer_rtt_ewma = (self.peer_rtt_ewma * 7 + rtt) / 8;
        }
        let delta = self.host.off_enclave_interval();
        let Some(outcome) = self.adopt(value, eps, rtt, delta, prov, reading) else {
            return;
        };
        if matches!(self.phase, Phase::Seeding { .. }) {
            self.bootstrap_failures = 0;
            self.log(NodeEvent::Seeded(outcome.adopted));
            self.phase = Phase::Serving;
        }
        self.after_untaint();
    }

    /// Installs a new anchor from a remote value, or from the cache plus
    /// one unit when the remote value is not ahead of it.
    fn adopt(
        &mut self,
        remote: u64,
        remote_eps: u64,
        rtt: u64,
        delta: OffEnclaveInterval,
        prov: Provenance,
        reading: HostCounterReading,
    ) -> Option<UntaintOutcome> {
        let base = compute_error_bound(delta, RttEstimate::new(rtt))
            .saturating_add(residual(rtt, self.residual_ppm));
        let unit = self.params.resolution;
        let (kind, adopted) = match self.cache {
            Some(c) if remote <= c.last.nanos => {
                let next = match c.last.advance(unit) {
                    Ok(n) => n,
                    Err(_) => {
                        self.terminate(TerminationReason::ClockExhausted);
                        return None;
                    }
                };
                let eps = base
                    .saturating_add(remote_eps.max(c.last.error_bound_nanos))
                    .saturating_add(unit.nanos_per_tick());
                (
                    UntaintKind::SelfUntaint,
                    TrustedTimestamp::new(next.nanos, c.last.provenance, eps),
                )
            }
            _ => {
                let kind = match prov {
                    Provenance::External => UntaintKind::ExternalAdopt,
                    _ => UntaintKind::PeerAdopt,
                };
                (
                    kind,
                    TrustedTimestamp::new(remote, prov, base.saturating_add(remote_eps)),
                )
            }
        };
        self.anchor = Some(Anchor {
            ticks: reading.ticks,
            epoch_id: reading.epoch_id,
            nanos: adopted.nanos,
            eps: adopted.error_bound_nanos,
        });
        self.cache = Some(ClockCache {
            last: adopted,
            tainted: false,
            last_raw: reading,
        });
        self.host.clear_exit_flag();
        let outcome = UntaintOutcome { kind, adopted };
        self.log(NodeEvent::Untainted {
            outcome,
            rtt_nanos: rtt,
            delta_nanos: delta.delta_nanos,
        });
        Some(outcome)
    }

    /// Guard check after every untaint, then release blocked clients.
    fn after_untaint(&mut self) {
        self.cycle = None;
        let verdict = self.guard();
        match verdict.kind {
            VerdictKind::Pass => self.drain_queue(),
            VerdictKind::Interrupted => {
                self.taint();
                self.start_untaint();
            }
            _ => {}
        }
    }

    fn on_failure_reply(&mut self, from: NodeId, echo: WireNonce, reason: FailureReason) {
        if self.take_pending(echo, Dest::Peer(from)).is_none() {
            return;
        }
        self.log(NodeEvent::PeerFailure(from));
        let own = self.params.id;
        if let Some(c) = self.cycle.as_mut() {
            match reason {
                FailureReason::Calibrating => c.bootstrap_wait = true,
                FailureReason::Seeding if from < own => c.bootstrap_wait = true,
                _ if from < own => c.lower_failed = true,
                _ => {}
            }
        }
        self.next_query();
    }

    pub fn on_timer(&mut self, token: u64) {
        match &mut self.phase {
            Phase::Calibrating {
                cal,
                timer,
                fresh_timer,
            } => {
                if let Some((t, nonce)) = *timer {
                    if t == token {
                        *timer = None;
                        if let Some(outcome) = cal.on_timeout(nonce) {
                            self.log_round(outcome);
                        }
                        self.drive_calibration();
                        return;
                    }
                }
                if *fresh_timer == Some(token) {
                    *fresh_timer = None;
                    cal.epoch_started();
                    self.drive_calibration();
                }
            }
            Phase::Serving | Phase::Seeding { .. } => {
                let Some(c) = self.cycle.as_mut() else { return };
                if c.backoff_token == Some(token) {
                    c.backoff_token = None;
                    self.next_query();
                    return;
                }
                let Some(p) = c.pending.filter(|p| p.token == token) else {
                    return;
                };
                c.pending = None;
                match p.to {
                    Dest::Peer(id) => {
                        self.log(NodeEvent::PeerTimeout(id));
                        self.next_query();
                    }
                    _ => {
                        self.log(NodeEvent::ExternalTimeout);
                        if let Phase::Seeding {
                            external_timeouts, ..
                        } = &mut self.phase
                        {
                            *external_timeouts += 1;
                            if *external_timeouts >= self.params.bootstrap_retries {
                                self.terminate(TerminationReason::BootstrapFailed);
                                return;
                            }
                        }
                        self.fail_queue(ServeError::Unavailable);
                        self.restart_cycle_fresh();
                    }
                }
            }
            _ => {}
        }
    }

    fn restart_cycle_fresh(&mut self) {
        self.cycle = None;
        self.start_untaint();
    }

    // ----- peer service -----

    fn handle_peer_request(&mut self, from: NodeId, echo: WireNonce) {
        if matches!(self.phase, Phase::Terminated(_)) {
            return;
        }
        let serving = matches!(self.phase, Phase::Serving) && self.cycle.is_none();
        if serving {
            self.refresh_cache();
        }
        let cache = self.cache.filter(|c| serving && !c.tainted);
        let Some(cache) = cache else {
            let reason = match self.phase {
                Phase::Calibrating { .. } => FailureReason::Calibrating,
                Phase::Seeding { .. } => FailureReason::Seeding,
                _ => FailureReason::Tainted,
            };
            self.send(Dest::Peer(from), Payload::FailureReply { echo, reason });
            self.log(NodeEvent::FailureReplied(from));
            self.start_untaint();
            return;
        };
        // The reply only goes out if no exit happened between reading the
        // cache and committing the datagram.
        let exits = self.host.poll_exit_flag().exits_observed;
        self.host.process_for(self.params.reply_commit_nanos);
        if self.host.poll_exit_flag().exits_observed != exits {
            self.log(NodeEvent::ReplySuppressed(from));
            self.taint();
            self.start_untaint();
            return;
        }
        self.send(
            Dest::Peer(from),
            Payload::TsReply {
                echo,
                nanos: cache.last.nanos,
                epsilon_nanos: cache.last.error_bound_nanos,
            },
        );
        self.log(NodeEvent::PeerReplied(from));
    }

    /// Authenticates and dispatches one datagram.
    pub fn on_datagram(&mut self, bytes: &[u8]) {
        if matches!(self.phase, Phase::Terminated(_) | Phase::Idle) {
            return;
        }
        let header = match wire::peek_header(bytes) {
            Ok(h) => h,
            Err(e) => return self.log(NodeEvent::Dropped(e)),
        };
        let Some(key) = self.key_for(header.sender_id) else {
            return self.log(NodeEvent::Dropped(WireError::Key(format!(
                "unknown sender {}",
                header.sender_id
            ))));
        };
        let window = self
            .windows
            .entry(header.sender_id)
            .or_insert_with(|| ReplayWindow::new(DEFAULT_REPLAY_WINDOW));
        let msg = match wire::decode(bytes, &key, window) {
            Ok(m) => m,
            Err(e) => return self.log(NodeEvent::Dropped(e)),
        };
        self.dispatch(msg);
    }

    fn dispatch(&mut self, msg: WireMessage) {
        let from = msg.sender_id;
        let from_external = from == EXTERNAL_SENDER_ID;
        match msg.payload {
            Payload::TsRequest if self.ring.contains(from) => {
                self.handle_peer_request(from, msg.nonce)
            }
            Payload::TsRequest if !from_external => self.serve(Ticket::Wire {
                sender: from,
                echo: msg.nonce,
            }),
            Payload::TsReply {
                echo,
                nanos,
                epsilon_nanos,
            } if self.ring.contains(from) => {
                if let Some(p) = self.take_pending(echo, Dest::Peer(from)) {
                    self.on_remote_reply(p, nanos, epsilon_nanos, Provenance::Peer(from));
                }
            }
            Payload::FailureReply { echo, reason } if self.ring.contains(from) => {
                self.on_failure_reply(from, echo, reason)
            }
            Payload::CalReply {
                echo,
                server_elapsed_nanos,
                server_nanos,
            } if from_external => {
                self.on_calibration_reply(echo, server_elapsed_nanos, server_nanos)
            }
            Payload::ExtReply {
                echo,
                nanos,
                radius_nanos,
            } if from_external => {
                if let Some(p) = self.take_pending(echo, Dest::External) {
                    self.on_remote_reply(p, nanos, radius_nanos, Provenance::External);
                }
            }
            other => self.log(NodeEvent::Dropped(WireError::Malformed(
                match other.msg_type() {
                    MsgType::TsRequest => "unexpected request",
                    _ => "unexpected reply",
                },
            ))),
        }
    }

    fn terminate(&mut self, reason: TerminationReason) {
        if matches!(self.phase, Phase::Terminated(_)) {
            return;
        }
        self.phase = Phase::Terminated(reason);
        self.cycle = None;
        self.log(NodeEvent::Terminated(reason));
        self.fail_queue(ServeError::Terminated);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_covers_threshold() {
        // A counter 5% slow reads 0.95 s for a real second; the residual
        // on 0.95 s must reach the missing 0.05 s.
        let ppm = residual_ppm(0.05);
        let read = 950_000_000;
        assert!(residual(read, ppm) >= 50_000_000);
        assert!(residual(read, ppm) < 53_000_000);
        assert_eq!(residual(0, ppm), 1);
    }

    #[test]
    fn ring_wraps() {
        let mut r = PeerRing::new(vec![2, 3]);
        assert_eq!(r.advance(), Some(2));
        assert_eq!(r.advance(), Some(3));
        assert_eq!(r.advance(), Some(2));
        assert_eq!(PeerRing::new(vec![]).advance(), None);
    }
}
