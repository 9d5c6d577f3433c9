//! Bundled scenarios, one per threat, and a random schedule generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schedule::{AdversaryAction, AdversarySchedule, MessageMatch};
use super::world::{SimConfig, Topology};
use crate::time::{DriftRate, NodeId};
use crate::wire::MsgType;

/// Attacks in bundled scenarios start once bootstrap is surely over.
pub const ATTACK_START_NANOS: u64 = 40_000_000_000;

const SECOND: u64 = 1_000_000_000;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub config: SimConfig,
    pub schedule: AdversarySchedule,
}

pub const SCENARIO_NAMES: &[&str] = &[
    "no-attack",
    "error-profile",
    "freshness-attack",
    "delay-attack",
    "rate-attack-0.90",
    "rate-attack-0.96",
    "simultaneous-exit",
    "isolation",
];

fn rate(s: &str) -> DriftRate {
    DriftRate::from_decimal(s).expect("valid literal")
}

/// Builds a bundled scenario. `duration_nanos` overrides the default run
/// length when given.
pub fn scenario(name: &str, seed: u64, duration_nanos: Option<u64>) -> Option<Scenario> {
    let mut config = SimConfig::default();
    let mut schedule = AdversarySchedule::new(seed);
    let name = *SCENARIO_NAMES.iter().find(|n| **n == name)?;
    let t0 = ATTACK_START_NANOS;
    match name {
        "no-attack" => config.duration_nanos = 500 * SECOND,
        "error-profile" => config.duration_nanos = 300 * SECOND,
        "freshness-attack" => {
            config.duration_nanos = 120 * SECOND;
            for (i, node) in [2, 1, 3, 2].into_iter().enumerate() {
                schedule.push(
                    t0 + i as u64 * 10 * SECOND,
                    AdversaryAction::ForceExit {
                        node,
                        off_nanos: 3 * SECOND,
                    },
                );
            }
        }
        "delay-attack" => {
            config.duration_nanos = 60 * SECOND;
            // Every calibration reply to node 1 arrives later than RTT_max.
            let extra = config.calibration.rtt_max_nanos + 50_000_000;
            schedule.push(
                0,
                AdversaryAction::DelayMessage {
                    rule: MessageMatch {
                        dst: Some(1),
                        msg_type: Some(MsgType::CalReply),
                        ..MessageMatch::default()
                    },
                    delay_nanos: extra,
                },
            );
        }
        "rate-attack-0.90" | "rate-attack-0.96" => {
            config.duration_nanos = 90 * SECOND;
            let r = if name.ends_with("0.90") {
                "0.90"
            } else {
                "0.96"
            };
            schedule.push(
                t0,
                AdversaryAction::SetCounterRate {
                    node: 2,
                    rate: rate(r),
                },
            );
        }
        "simultaneous-exit" => {
            config.duration_nanos = 60 * SECOND;
            for node in 1..=3 {
                schedule.push(
                    t0,
                    AdversaryAction::ForceExit {
                        node,
                        off_nanos: 2_000_000,
                    },
                );
            }
        }
        "isolation" => {
            config.duration_nanos = 90 * SECOND;
            schedule.push(
                t0,
                AdversaryAction::IsolateNode {
                    node: 1,
                    duration_nanos: 10 * SECOND,
                },
            );
            schedule.push(
                t0 + SECOND,
                AdversaryAction::ForceExit {
                    node: 1,
                    off_nanos: 1_000_000,
                },
            );
        }
        _ => return None,
    }
    if let Some(d) = duration_nanos {
        config.duration_nanos = d;
    }
    Some(Scenario {
        name,
        config,
        schedule,
    })
}

/// Shape of randomly generated adversary schedules.
#[derive(Debug, Clone)]
pub struct RandomScheduleParams {
    pub nodes: u32,
    /// First and last instant at which actions may happen.
    pub start_nanos: u64,
    pub end_nanos: u64,
    pub events: usize,
}

/// A seeded mix of every adversary action.
///
/// Calibration traffic is left alone, and a node whose counter rate is
/// attacked never also gets its CPU frequency changed: scaling both by the
/// same factor is the one combination the rate guard cannot see without
/// the optional memory check.
pub fn random_schedule(seed: u64, p: &RandomScheduleParams) -> AdversarySchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut times: Vec<u64> = (0..p.events)
        .map(|_| rng.gen_range(p.start_nanos..p.end_nanos))
        .collect();
    times.sort_unstable();
    let rate_nodes: Vec<NodeId> = (1..=p.nodes).filter(|_| rng.gen_bool(0.5)).collect();
    let rates = [
        "0.90", "0.94", "0.96", "0.99", "1.01", "1.04", "1.06", "1.10",
    ];
    let scales = ["0.50", "0.93", "0.97", "1.00", "1.03", "1.20"];
    let types = [
        MsgType::TsRequest,
        MsgType::TsReply,
        MsgType::FailureReply,
        MsgType::ExtRequest,
        MsgType::ExtReply,
    ];
    let mut schedule = AdversarySchedule::new(seed);
    for at in times {
        let node = rng.gen_range(1..=p.nodes);
        let pick_type = |rng: &mut ChaCha8Rng| Some(types[rng.gen_range(0..types.len())]);
        let pick_peer = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.5) {
                Some(rng.gen_range(1..=p.nodes))
            } else {
                None
            }
        };
        let action = match rng.gen_range(0..9) {
            0..=2 => AdversaryAction::ForceExit {
                node,
                off_nanos: match rng.gen_range(0..3) {
                    0 => rng.gen_range(5_000..50_000),
                    1 => rng.gen_range(1_000_000..20_000_000),
                    _ => rng.gen_range(100_000_000..3_000_000_000),
                },
            },
            3 if rate_nodes.contains(&node) => AdversaryAction::SetCounterRate {
                node,
                rate: rate(rates[rng.gen_range(0..rates.len())]),
            },
            3 => AdversaryAction::SetCpuFrequencyScale {
                node,
                scale: rate(scales[rng.gen_range(0..scales.len())]),
            },
            4 => AdversaryAction::OverwriteCounter {
                node,
                ticks: rng.gen(),
            },
            5 => AdversaryAction::DelayMessage {
                rule: MessageMatch {
                    src: pick_peer(&mut rng),
                    dst: pick_peer(&mut rng),
                    msg_type: pick_type(&mut rng),
                    seq: None,
                    duration: Some(rng.gen_range(10_000_000..2_000_000_000)),
                },
                delay_nanos: rng.gen_range(10_000..5_000_000),
            },
            6 => AdversaryAction::DropMessage {
                rule: MessageMatch {
                    src: pick_peer(&mut rng),
                    dst: pick_peer(&mut rng),
                    msg_type: pick_type(&mut rng),
                    seq: None,
                    duration: Some(rng.gen_range(10_000_000..2_000_000_000)),
                },
            },
            7 => AdversaryAction::ReplayMessage {
                rule: MessageMatch {
                    src: pick_peer(&mut rng),
                    dst: None,
                    msg_type: pick_type(&mut rng),
                    seq: None,
                    duration: Some(rng.gen_range(10_000_000..1_000_000_000)),
                },
            },
            _ => AdversaryAction::IsolateNode {
                node,
                duration_nanos: rng.gen_range(100_000_000..5_000_000_000),
            },
        };
        schedule.push(at, action);
    }
    schedule
}

/// Default topology for generated runs.
pub fn random_topology() -> Topology {
    Topology::trio()
}
