//! Discrete-event world: hosts, links, the external source and the
//! adversary, all driven from one deterministic event queue.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schedule::{
    AdversaryAction, AdversarySchedule, MessageMatch, ScheduleError, DEFAULT_FORCED_OFF_NANOS,
};
use super::trace::{event_rows, RunTrace, TraceRow};
use crate::calibration::CalibrationParams;
use crate::external::ExternalServer;
use crate::guard::GuardConfig;
use crate::host::{ExitModel, ExitSpec, SimHost, SimHostConfig};
use crate::node::{ActionKind, Dest, Node, NodeEvent, NodeParams};
use crate::time::{DriftRate, NodeId, ResolutionUnit};
use crate::wire::{self, KeyRing, LinkKey};

/// Nodes and links.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: u32,
    /// One-way latency between nodes.
    pub one_way_nanos: u64,
    /// Uniform extra latency in `[0, jitter]` per datagram.
    pub jitter_nanos: u64,
    pub external_one_way_nanos: u64,
    pub external_jitter_nanos: u64,
    /// Each node's counter runs at `1 ± spread` of real time, seeded.
    pub rate_spread_ppm: u32,
}

impl Topology {
    pub fn trio() -> Self {
        Self::with_nodes(3)
    }

    pub fn with_nodes(nodes: u32) -> Self {
        Self {
            nodes,
            one_way_nanos: 35_000,
            jitter_nanos: 10_000,
            external_one_way_nanos: 71_000_000,
            external_jitter_nanos: 20_000,
            rate_spread_ppm: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub topology: Topology,
    pub duration_nanos: u64,
    pub host: SimHostConfig,
    pub calibration: CalibrationParams,
    pub guard: GuardConfig,
    pub resolution: ResolutionUnit,
    /// Each node gets a client request this often; 0 disables clients.
    pub client_period_nanos: u64,
    /// Delay before a node that stopped on a guard violation boots again.
    pub restart_after_nanos: Option<u64>,
    /// Oracle time at virtual time zero.
    pub epoch_base_nanos: u64,
    /// Refresher cadence, used to count local reads.
    pub poll_period_nanos: u64,
    /// Local-read counts are reported this often; 0 reports them once, at
    /// the end of the run.
    pub access_sample_nanos: u64,
    pub external_radius_nanos: u64,
    /// Explicit per-node counter rates; overrides the seeded spread.
    pub counter_rates: Vec<DriftRate>,
    /// Record every serve in the trace. Large runs can turn this off and
    /// rely on the streaming checks in [`SimOutcome`].
    pub record_serves: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            topology: Topology::trio(),
            duration_nanos: 60_000_000_000,
            host: SimHostConfig {
                exit_model: Some(ExitModel::trimodal()),
                ..SimHostConfig::default()
            },
            calibration: CalibrationParams::default(),
            guard: GuardConfig::default(),
            resolution: ResolutionUnit::NANOSECOND,
            client_period_nanos: 10_000_000,
            restart_after_nanos: Some(1_000_000_000),
            epoch_base_nanos: 1_700_000_000_000_000_000,
            poll_period_nanos: 5_000,
            access_sample_nanos: 3_000_000_000,
            external_radius_nanos: 0,
            counter_rates: Vec::new(),
            record_serves: true,
        }
    }
}

/// Checks made on every serve while the run progresses, so that they hold
/// even when serves are not recorded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SimOutcome {
    pub serves: u64,
    pub bound_violations: u64,
    pub monotonicity_violations: u64,
    pub max_abs_error_nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EvKind {
    HostCheck(usize),
    Start(usize),
    Deliver { to: NodeId, bytes: Vec<u8> },
    Timer { idx: usize, token: u64 },
    Client { idx: usize, periodic: bool },
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Ev {
    at: u64,
    seq: u64,
    kind: EvKind,
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy)]
enum RuleKind {
    Drop,
    Delay(u64),
    Replay,
}

#[derive(Debug, Clone, Copy)]
struct Rule {
    from: u64,
    until: u64,
    m: MessageMatch,
    kind: RuleKind,
}

struct Slot {
    node: Node<SimHost>,
    check_at: Option<u64>,
    serving_since: Option<u64>,
    local_reads: u64,
    reported_reads: u64,
    next_ticket: u64,
    last_served: Option<u64>,
}

/// Gap between a replayed copy and the original.
const REPLAY_GAP_NANOS: u64 = 1_000_000;
/// Nodes boot this far apart so their first requests do not collide.
const START_STAGGER_NANOS: u64 = 137_000;

pub struct World {
    cfg: SimConfig,
    slots: Vec<Slot>,
    external: ExternalServer,
    heap: BinaryHeap<Reverse<Ev>>,
    seq: u64,
    rng: ChaCha8Rng,
    rules: Vec<Rule>,
    trace: RunTrace,
    outcome: SimOutcome,
}

fn node_seed(seed: u64, id: NodeId) -> u64 {
    seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The single key used on every simulated link.
pub fn sim_keys() -> KeyRing {
    KeyRing::with_default(LinkKey::new([0x5a; 32]))
}

impl World {
    pub fn new(cfg: SimConfig, schedule: &AdversarySchedule) -> Result<Self, ScheduleError> {
        schedule.validate()?;
        let n = cfg.topology.nodes;
        if n == 0 {
            return Err(ScheduleError {
                line: 0,
                message: "topology has no nodes".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let mut slots = Vec::new();
        for id in 1..=n {
            let rate = match cfg.counter_rates.get(id as usize - 1) {
                Some(r) => *r,
                None => {
                    let spread = cfg.topology.rate_spread_ppm as i64;
                    let ppm = if spread > 0 {
                        rng.gen_range(-spread..=spread)
                    } else {
                        0
                    };
                    DriftRate::from_ratio((1_000_000 + ppm) as u64, 1_000_000)
                        .expect("rate near one")
                }
            };
            let host_cfg = SimHostConfig {
                counter_rate: rate,
                ..cfg.host.clone()
            };
            let host = SimHost::new(host_cfg, node_seed(schedule.seed, id));
            let mut params = NodeParams::new(id, (1..=n).filter(|&p| p != id).collect());
            params.calibration = cfg.calibration.clone();
            params.guard = cfg.guard;
            params.resolution = cfg.resolution;
            slots.push(Slot {
                node: Node::new(params, host, sim_keys()),
                check_at: None,
                serving_since: None,
                local_reads: 0,
                reported_reads: 0,
                next_ticket: 0,
                last_served: None,
            });
        }
        let mut world = Self {
            external: ExternalServer::new(sim_keys(), cfg.external_radius_nanos),
            cfg,
            slots,
            heap: BinaryHeap::new(),
            seq: 0,
            rng,
            rules: Vec::new(),
            trace: RunTrace {
                seed: schedule.seed,
                rows: Vec::new(),
            },
            outcome: SimOutcome::default(),
        };
        world.install(schedule)?;
        if world.cfg.access_sample_nanos > 0 {
            world.push(world.cfg.access_sample_nanos, EvKind::Sample);
        }
        for idx in 0..world.slots.len() {
            world.push(idx as u64 * START_STAGGER_NANOS, EvKind::Start(idx));
            if world.cfg.client_period_nanos > 0 {
                let first = world.cfg.client_period_nanos + idx as u64 * START_STAGGER_NANOS;
                world.push(
                    first,
                    EvKind::Client {
                        idx,
                        periodic: true,
                    },
                );
            }
        }
        Ok(world)
    }

    fn install(&mut self, schedule: &AdversarySchedule) -> Result<(), ScheduleError> {
        let n = self.slots.len() as u32;
        for (i, e) in schedule.events.iter().enumerate() {
            let bad_node = |node: NodeId| ScheduleError {
                line: i + 1,
                message: format!("event {} names node {node}, topology has {n}", i + 1),
            };
            let host_exit =
                |node: NodeId, spec: ExitSpec| -> Result<(NodeId, ExitSpec), ScheduleError> {
                    if node == 0 || node > n {
                        return Err(bad_node(node));
                    }
                    Ok((node, spec))
                };
            let plain = ExitSpec::plain(e.at, DEFAULT_FORCED_OFF_NANOS);
            let exit = match e.action {
                AdversaryAction::ForceExit { node, off_nanos } => {
                    Some(host_exit(node, ExitSpec::plain(e.at, off_nanos))?)
                }
                AdversaryAction::SetCounterRate { node, rate } => Some(host_exit(
                    node,
                    ExitSpec {
                        counter_rate: Some(rate),
                        ..plain
                    },
                )?),
                AdversaryAction::OverwriteCounter { node, ticks } => Some(host_exit(
                    node,
                    ExitSpec {
                        overwrite_ticks: Some(ticks),
                        ..plain
                    },
                )?),
                AdversaryAction::SetCpuFrequencyScale { node, scale } => Some(host_exit(
                    node,
                    ExitSpec {
                        cpu_scale: Some(scale),
                        ..plain
                    },
                )?),
                _ => None,
            };
            if let Some((node, spec)) = exit {
                self.slots[node as usize - 1]
                    .node
                    .host_mut()
                    .schedule_exit(spec);
                continue;
            }
            let rule = |m: MessageMatch, kind| Rule {
                from: e.at,
                until: m.duration.map_or(u64::MAX, |d| e.at.saturating_add(d)),
                m,
                kind,
            };
            match e.action {
                AdversaryAction::DelayMessage {
                    rule: m,
                    delay_nanos,
                } => self.rules.push(rule(m, RuleKind::Delay(delay_nanos))),
                AdversaryAction::DropMessage { rule: m } => {
                    self.rules.push(rule(m, RuleKind::Drop))
                }
                AdversaryAction::ReplayMessage { rule: m } => {
                    self.rules.push(rule(m, RuleKind::Replay))
                }
                AdversaryAction::IsolateNode {
                    node,
                    duration_nanos,
                } => {
                    if node > n {
                        return Err(bad_node(node));
                    }
                    let until = e.at.saturating_add(duration_nanos);
                    for m in [
                        MessageMatch {
                            src: Some(node),
                            ..MessageMatch::default()
                        },
                        MessageMatch {
                            dst: Some(node),
                            ..MessageMatch::default()
                        },
                    ] {
                        self.rules.push(Rule {
                            from: e.at,
                            until,
                            m,
                            kind: RuleKind::Drop,
                        });
                    }
                }
                _ => unreachable!("host actions handled above"),
            }
        }
        Ok(())
    }

    fn push(&mut self, at: u64, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev {
            at,
            seq: self.seq,
            kind,
        }));
    }

    fn oracle(&self, at: u64) -> u64 {
        self.cfg.epoch_base_nanos + at
    }

    pub fn node(&self, id: NodeId) -> &Node<SimHost> {
        &self.slots[id as usize - 1].node
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node<SimHost> {
        &mut self.slots[id as usize - 1].node
    }

    /// Runs until the configured duration.
    pub fn run(mut self) -> (RunTrace, SimOutcome) {
        let end = self.cfg.duration_nanos;
        self.run_until(end);
        self.finish()
    }

    /// Processes every event scheduled up to `t`.
    pub fn run_until(&mut self, t: u64) {
        while let Some(Reverse(ev)) = self.heap.peek() {
            if ev.at > t {
                break;
            }
            let Reverse(ev) = self.heap.pop().expect("peeked");
            self.process(ev);
        }
    }

    fn finish(mut self) -> (RunTrace, SimOutcome) {
        let end = self.cfg.duration_nanos;
        // Nodes log on their own host clocks, which can run a little ahead
        // of the event being processed. A stable sort keeps per-node order.
        self.trace.rows.sort_by_key(|r| r.event_nanos);
        for idx in 0..self.slots.len() {
            self.report_reads(idx, end);
        }
        self.trace
            .rows
            .push(TraceRow::new(end, 0, "external_time_reads").value(self.external.time_reads()));
        (self.trace, self.outcome)
    }

    /// Emits the local reads counted since the previous report.
    fn report_reads(&mut self, idx: usize, at: u64) {
        let serving = self.slots[idx].serving_since.is_some();
        self.close_serving(idx, at);
        let slot = &mut self.slots[idx];
        if serving {
            slot.serving_since = Some(at);
        }
        let delta = slot.local_reads - slot.reported_reads;
        slot.reported_reads = slot.local_reads;
        self.trace
            .rows
            .push(TraceRow::new(at, idx as u32 + 1, "local_reads").value(delta));
    }

    fn close_serving(&mut self, idx: usize, at: u64) {
        if let Some(since) = self.slots[idx].serving_since.take() {
            self.slots[idx].local_reads +=
                at.saturating_sub(since) / self.cfg.poll_period_nanos.max(1);
        }
    }

    fn process(&mut self, ev: Ev) {
        match ev.kind {
            EvKind::Sample => {
                for idx in 0..self.slots.len() {
                    self.report_reads(idx, ev.at);
                }
                let next = ev.at + self.cfg.access_sample_nanos;
                if next < self.cfg.duration_nanos {
                    self.push(next, EvKind::Sample);
                }
            }
            EvKind::HostCheck(idx) => {
                if self.slots[idx].check_at == Some(ev.at) {
                    self.slots[idx].check_at = None;
                }
                let _ = self.sync(idx, ev.at);
                self.ensure_check(idx);
            }
            EvKind::Start(idx) => match self.sync(idx, ev.at) {
                Err(back) => self.push(back, EvKind::Start(idx)),
                Ok(_) => {
                    if self.slots[idx].node.status() != crate::node::NodeStatus::Idle {
                        let at = self.slots[idx].node.host().now();
                        self.trace
                            .rows
                            .push(TraceRow::new(at, idx as u32 + 1, "restart"));
                    }
                    self.slots[idx].node.start();
                    self.flush(idx);
                }
            },
            EvKind::Deliver { to: 0, bytes } => self.deliver_external(ev.at, &bytes),
            EvKind::Deliver { to, bytes } => {
                let idx = to as usize - 1;
                match self.sync(idx, ev.at) {
                    Err(back) => self.push(back, EvKind::Deliver { to, bytes }),
                    Ok(_) => {
                        self.slots[idx].node.on_datagram(&bytes);
                        self.flush(idx);
                    }
                }
            }
            EvKind::Timer { idx, token } => match self.sync(idx, ev.at) {
                Err(back) => self.push(back, EvKind::Timer { idx, token }),
                Ok(_) => {
                    self.slots[idx].node.on_timer(token);
                    self.flush(idx);
                }
            },
            EvKind::Client { idx, periodic } => {
                if periodic {
                    let next = ev.at + self.cfg.client_period_nanos;
                    self.push(
                        next,
                        EvKind::Client {
                            idx,
                            periodic: true,
                        },
                    );
                }
                match self.sync(idx, ev.at) {
                    Err(back) => self.push(
                        back,
                        EvKind::Client {
                            idx,
                            periodic: false,
                        },
                    ),
                    Ok(_) => {
                        let slot = &mut self.slots[idx];
                        slot.next_ticket += 1;
                        let t = slot.next_ticket;
                        slot.node.serve_client(t);
                        self.flush(idx);
                    }
                }
            }
        }
    }

    /// Schedules a check at the host's next exit or return.
    fn ensure_check(&mut self, idx: usize) {
        let next = self.slots[idx].node.host().next_transition();
        if let Some(x) = next {
            if self.slots[idx].check_at.is_none_or(|c| c > x) {
                self.slots[idx].check_at = Some(x);
                self.push(x, EvKind::HostCheck(idx));
            }
        }
    }

    /// Brings node `idx` to time `t`, handling exits and returns on the
    /// way. Returns the time node logic runs at, or the return time when
    /// control is outside the enclave at `t`.
    fn sync(&mut self, idx: usize, t: u64) -> Result<u64, u64> {
        loop {
            let host = self.slots[idx].node.host();
            match host.next_transition() {
                Some(x) if x <= t => {
                    if host.in_enclave() {
                        // The refresher reads the counter right up to the
                        // moment of the exit.
                        let pre = x.saturating_sub(1).max(host.now());
                        self.slots[idx].node.host_mut().advance_to(pre);
                        self.slots[idx].node.refresh_cache();
                        self.slots[idx].node.host_mut().advance_to(x);
                        self.flush(idx);
                    } else {
                        self.slots[idx].node.host_mut().advance_to(x);
                        self.slots[idx].node.poll();
                        self.flush(idx);
                    }
                    self.record_epochs(idx);
                }
                _ => break,
            }
        }
        let host = self.slots[idx].node.host_mut();
        host.advance_to(t);
        let r = if host.in_enclave() {
            Ok(host.now())
        } else {
            Err(host.returns_at().expect("outside"))
        };
        self.record_epochs(idx);
        self.ensure_check(idx);
        r
    }

    fn record_epochs(&mut self, idx: usize) {
        let id = idx as u32 + 1;
        for (at, len) in self.slots[idx].node.host_mut().take_finished_epochs() {
            self.trace
                .rows
                .push(TraceRow::new(at, id, "exit").value(len));
        }
    }

    fn flush(&mut self, idx: usize) {
        let id = idx as u32 + 1;
        for a in self.slots[idx].node.take_actions() {
            match a.kind {
                ActionKind::Send { to, bytes } => {
                    let dst = match to {
                        Dest::Peer(p) => p,
                        Dest::External => 0,
                        Dest::Client(_) => continue,
                    };
                    self.route(id, dst, bytes, a.at);
                }
                ActionKind::SetTimer { token, after_nanos } => self.push(
                    a.at.saturating_add(after_nanos),
                    EvKind::Timer { idx, token },
                ),
                ActionKind::Respond { .. } => {}
                ActionKind::Log(event) => self.record(idx, a.at, event),
            }
        }
        self.record_epochs(idx);
    }

    fn latency(&mut self, src: NodeId, dst: NodeId) -> u64 {
        let t = &self.cfg.topology;
        let (base, jitter) = if src == 0 || dst == 0 {
            (t.external_one_way_nanos, t.external_jitter_nanos)
        } else {
            (t.one_way_nanos, t.jitter_nanos)
        };
        let j = if jitter > 0 {
            self.rng.gen_range(0..=jitter)
        } else {
            0
        };
        base + j
    }

    fn route(&mut self, src: NodeId, dst: NodeId, bytes: Vec<u8>, at: u64) {
        let Ok(header) = wire::peek_header(&bytes) else {
            return;
        };
        let mut delay = 0u64;
        let mut replay = false;
        for r in &self.rules {
            if at < r.from || at >= r.until || !r.m.matches(src, dst, header.msg_type, header.seq) {
                continue;
            }
            match r.kind {
                RuleKind::Drop => {
                    self.trace
                        .rows
                        .push(TraceRow::new(at, src, "net_drop").value(dst as u64));
                    return;
                }
                RuleKind::Delay(d) => delay = delay.saturating_add(d),
                RuleKind::Replay => replay = true,
            }
        }
        if delay > 0 {
            self.trace
                .rows
                .push(TraceRow::new(at, src, "net_delay").value(delay));
        }
        let arrive = at + self.latency(src, dst) + delay;
        if replay {
            self.trace
                .rows
                .push(TraceRow::new(at, src, "net_replay").value(dst as u64));
            self.push(
                arrive + REPLAY_GAP_NANOS,
                EvKind::Deliver {
                    to: dst,
                    bytes: bytes.clone(),
                },
            );
        }
        self.push(arrive, EvKind::Deliver { to: dst, bytes });
    }

    fn deliver_external(&mut self, at: u64, bytes: &[u8]) {
        let now = self.oracle(at);
        match self.external.handle(bytes, now) {
            Ok(Some(reply)) => self.route(0, reply.to, reply.bytes, at + reply.send_after_nanos),
            Ok(None) => {}
            Err(_) => self.trace.rows.push(TraceRow::new(at, 0, "dropped")),
        }
    }

    fn record(&mut self, idx: usize, at: u64, event: NodeEvent) {
        let oracle = self.oracle(at);
        let rows = event_rows(at, idx as u32 + 1, &event, oracle);
        match event {
            NodeEvent::Seeded(_) => self.slots[idx].serving_since = Some(at),
            NodeEvent::Served(ts) => {
                let o = &mut self.outcome;
                o.serves += 1;
                if rows[0].violates_bound() {
                    o.bound_violations += 1;
                }
                let err = rows[0].oracle_error_nanos.map_or(0, |e| e.unsigned_abs());
                o.max_abs_error_nanos = o.max_abs_error_nanos.max(err);
                let slot = &mut self.slots[idx];
                if slot.last_served.is_some_and(|p| ts.nanos <= p) {
                    o.monotonicity_violations += 1;
                }
                slot.last_served = Some(ts.nanos);
                if !self.cfg.record_serves {
                    return;
                }
            }
            NodeEvent::Terminated(_) => {
                self.close_serving(idx, at);
                if let Some(delay) = self.cfg.restart_after_nanos {
                    self.push(at + delay, EvKind::Start(idx));
                }
            }
            _ => {}
        }
        self.trace.rows.extend(rows);
    }
}

/// Runs one simulation to completion.
pub fn run_simulation(
    cfg: SimConfig,
    schedule: &AdversarySchedule,
) -> Result<(RunTrace, SimOutcome), ScheduleError> {
    Ok(World::new(cfg, schedule)?.run())
}
