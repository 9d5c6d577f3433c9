//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any of them does.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture`.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use triad::calibration::CalibrationResult;
use triad::guard::{verify_rate, GuardConfig, VerdictKind};
use triad::host::{ExitSpec, SimHost, SimHostConfig};
use triad::sim::{
    oracle_error, random_schedule, run_simulation, scenario, AdversaryAction, RandomScheduleParams,
    SCENARIO_NAMES,
};
use triad::time::{DriftRate, ResolutionUnit};
use triad::wire::{self, LinkKey, Payload, ReplayWindow, Sealer};

type Verdict = Result<String, String>;

fn rate(s: &str) -> DriftRate {
    DriftRate::from_decimal(s).unwrap()
}

// R2: strictly increasing serves under random adversaries.
const C1_SCHEDULES: u64 = 50;
const C1_MIN_SERVES: u64 = 1_000_000;
const C1_MAX_SECS: f64 = 300.0;

fn c1_monotonic() -> Verdict {
    let start = Instant::now();
    let mut serves = 0;
    let mut bad = 0;
    let mut seeds = Vec::new();
    for seed in 1..=C1_SCHEDULES {
        let cfg = triad::sim::SimConfig {
            duration_nanos: 40 * SECOND,
            client_period_nanos: 1_000_000,
            record_serves: false,
            ..triad::sim::SimConfig::default()
        };
        let sched = random_schedule(
            seed,
            &RandomScheduleParams {
                nodes: 3,
                start_nanos: SECOND,
                end_nanos: 39 * SECOND,
                events: 40,
            },
        );
        let (_, out) = run_simulation(cfg, &sched).map_err(|e| e.to_string())?;
        serves += out.serves;
        bad += out.monotonicity_violations;
        seeds.push(seed);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{serves} serves, {bad} violations, seeds {}..={}, {secs:.1}s",
        seeds[0],
        seeds[seeds.len() - 1]
    );
    if bad == 0 && serves >= C1_MIN_SERVES && secs < C1_MAX_SECS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// R1: every serve within its reported bound, in every bundled scenario
// and in random schedules.
fn c2_bounded() -> Verdict {
    let mut serves = 0;
    let mut bad = 0;
    let mut worst = String::new();
    for name in SCENARIO_NAMES {
        for seed in 1..=3 {
            let s = scenario(name, seed, None).unwrap();
            let (_, out) = run_simulation(s.config, &s.schedule).map_err(|e| e.to_string())?;
            serves += out.serves;
            if out.bound_violations > 0 {
                worst = format!(" first in {name} seed {seed}");
            }
            bad += out.bound_violations;
        }
    }
    for seed in 100..120 {
        let sched = random_schedule(
            seed,
            &RandomScheduleParams {
                nodes: 3,
                start_nanos: SECOND,
                end_nanos: 59 * SECOND,
                events: 60,
            },
        );
        let cfg = triad::sim::SimConfig::default();
        let (_, out) = run_simulation(cfg, &sched).map_err(|e| e.to_string())?;
        serves += out.serves;
        if out.bound_violations > 0 && worst.is_empty() {
            worst = format!(" first in random seed {seed}");
        }
        bad += out.bound_violations;
    }
    let detail = format!("{serves} serves, {bad} outside bound{worst}");
    if bad == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// A peer reply below the cache advances it by exactly one unit.
fn c3_increment() -> Verdict {
    let mut checked = Vec::new();
    for unit in [1, 1_000] {
        let mut cfg = quiet_config(24 * SECOND);
        cfg.resolution = ResolutionUnit::new(unit).unwrap();
        let mut s = triad::sim::AdversarySchedule::new(7);
        for node in [2, 3] {
            s.push(
                20 * SECOND,
                AdversaryAction::SetCounterRate {
                    node,
                    rate: rate("0.99"),
                },
            );
        }
        s.push(
            22 * SECOND,
            AdversaryAction::ForceExit {
                node: 1,
                off_nanos: 20_000,
            },
        );
        let (trace, _) = run_simulation(cfg, &s).map_err(|e| e.to_string())?;
        let rows: Vec<_> = trace
            .rows
            .iter()
            .filter(|r| r.node == 1 && r.event_nanos >= 22 * SECOND)
            .collect();
        let tainted = rows
            .iter()
            .find(|r| r.kind == "tainted")
            .and_then(|r| r.value_nanos)
            .ok_or("node 1 never tainted")?;
        let after = rows
            .iter()
            .find(|r| r.kind.ends_with("_adopt") || r.kind == "self_untaint")
            .ok_or("node 1 never untainted")?;
        if after.kind != "self_untaint" {
            return Err(format!("unit {unit}: got {}", after.kind));
        }
        let v = after.value_nanos.unwrap();
        if v != tainted + unit {
            return Err(format!("unit {unit}: {tainted} -> {v}"));
        }
        checked.push(unit);
    }
    Ok(format!(
        "self_untaint = last + 1 unit for units {checked:?} ns"
    ))
}

// Scripted scenarios against stored event sequences.
fn c4_scenarios() -> Verdict {
    let cases = [
        ("scenario1", scenario_local(1), true),
        ("scenario2", scenario_single_taint(1), false),
        ("scenario3", scenario_all_tainted(1), false),
    ];
    for (name, (cfg, sched, from, to), serves) in cases {
        let (trace, _) = run_simulation(cfg, &sched).map_err(|e| e.to_string())?;
        let lines = event_lines(&trace, from, to, serves);
        check_golden(name, &lines)?;
        let count = |k: &str| lines.iter().filter(|l| l.ends_with(k)).count();
        let ok = match name {
            "scenario1" => lines.iter().all(|l| l.ends_with(" serve")),
            "scenario2" => count(" peer_query") == 1 && count(" peer_adopt") == 1,
            _ => count(" external_query") == 1 && count(" external_adopt") == 1,
        };
        if !ok {
            return Err(format!("{name}: unexpected message pattern"));
        }
    }
    Ok("3 golden traces match".into())
}

// Rate guard detection at the 5% threshold.
const C5_RUNS: u64 = 1_000;
const C5_EVALS: u64 = 1_000_000;

fn c5_guard() -> Verdict {
    let calib = CalibrationResult::nominal(53_830, 53_830.0 / 1e6 * 100.0);
    let cfg = GuardConfig::default();
    let attacked = |r: &str, seed: u64| {
        let mut h = SimHost::new(SimHostConfig::default(), seed);
        h.schedule_exit(ExitSpec {
            counter_rate: Some(rate(r)),
            ..ExitSpec::plain(10, 10)
        });
        h.advance_to(100);
        verify_rate(&mut h, &calib, &cfg).kind
    };
    let caught_90 = (0..C5_RUNS)
        .filter(|&s| attacked("0.90", s) == VerdictKind::RateViolation)
        .count() as u64;
    let caught_96 = (0..C5_RUNS)
        .filter(|&s| attacked("0.96", s) != VerdictKind::Pass)
        .count() as u64;
    let mut false_kills = 0u64;
    let mut evals = 0u64;
    let per_host = 10_000;
    for seed in 0..C5_EVALS / per_host {
        let mut h = SimHost::new(SimHostConfig::default(), 1_000 + seed);
        for _ in 0..per_host {
            if verify_rate(&mut h, &calib, &cfg).kind != VerdictKind::Pass {
                false_kills += 1;
            }
            evals += 1;
        }
    }
    // The same attacks inside full runs.
    let mut sim_ok = true;
    for seed in 1..=3 {
        let s = scenario("rate-attack-0.90", seed, None).unwrap();
        let (trace, _) = run_simulation(s.config, &s.schedule).map_err(|e| e.to_string())?;
        sim_ok &= trace
            .rows
            .iter()
            .any(|r| r.node == 2 && r.kind == "terminated_rate_violation");
        let s = scenario("rate-attack-0.96", seed, None).unwrap();
        let (trace, _) = run_simulation(s.config, &s.schedule).map_err(|e| e.to_string())?;
        sim_ok &= trace.count("guard_rate_violation") == 0;
    }
    let detail = format!(
        "0.90 caught {caught_90}/{C5_RUNS}, 0.96 flagged {caught_96}/{C5_RUNS}, \
         {false_kills} false kills in {evals} evaluations, sim runs {}",
        if sim_ok { "agree" } else { "disagree" }
    );
    if caught_90 == C5_RUNS && caught_96 == 0 && false_kills == 0 && evals >= C5_EVALS && sim_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Calibration under delay and drift.
const C6_RUNS: u64 = 1_000;
const C6_DRIFT_TOL: f64 = 0.001;
const C6_MIN_ROUNDS: usize = 10;

fn c6_calibration() -> Verdict {
    let mut clean = 0;
    for seed in 0..C6_RUNS {
        let mut s = scenario("delay-attack", seed, Some(12 * SECOND)).unwrap();
        s.config.client_period_nanos = 0;
        let (trace, _) = run_simulation(s.config, &s.schedule).map_err(|e| e.to_string())?;
        let valid = trace
            .rows
            .iter()
            .any(|r| r.node == 1 && matches!(r.kind.as_ref(), "cal_held" | "calibrated"));
        if !valid {
            clean += 1;
        }
    }
    let mut worst: f64 = 0.0;
    let mut min_rounds = usize::MAX;
    for seed in 1..=5 {
        let mut cfg = triad::sim::SimConfig {
            duration_nanos: 30 * SECOND,
            counter_rates: vec![rate("0.98"), rate("1.0"), rate("1.02")],
            client_period_nanos: 0,
            ..triad::sim::SimConfig::default()
        };
        cfg.calibration.total_duration_nanos = 24 * SECOND;
        let rates = cfg.counter_rates.clone();
        let (trace, _) = run_simulation(cfg, &triad::sim::AdversarySchedule::new(seed))
            .map_err(|e| e.to_string())?;
        for (i, r) in rates.iter().enumerate() {
            let node = i as u32 + 1;
            let held = trace
                .rows
                .iter()
                .filter(|x| x.node == node && x.kind == "cal_held")
                .count();
            min_rounds = min_rounds.min(held);
            let got = trace
                .rows
                .iter()
                .find(|x| x.node == node && x.kind == "calibrated")
                .and_then(|x| x.value_nanos)
                .ok_or(format!("node {node} did not calibrate"))?;
            // Corrected nanoseconds per 10^9 ticks should be 10^9 / rate.
            let want = 1e9 / r.as_f64();
            worst = worst.max((got as f64 - want).abs() / want);
        }
    }
    let detail = format!(
        "{clean}/{C6_RUNS} delayed runs had zero valid rounds; drift error {:.4}% \
         (min {min_rounds} rounds)",
        worst * 100.0
    );
    if clean == C6_RUNS && worst <= C6_DRIFT_TOL && min_rounds >= C6_MIN_ROUNDS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Access profile of a long no-attack run.
const C7_MIN_RATIO: f64 = 1e4;

fn c7_profile() -> Verdict {
    let mut out = Vec::new();
    let mut ok = true;
    for seed in 1..=3 {
        let mut s = scenario("no-attack", seed, None).unwrap();
        s.config.record_serves = false;
        let (trace, _) = run_simulation(s.config, &s.schedule).map_err(|e| e.to_string())?;
        let sum = oracle_error(&trace);
        let local = sum.total(|n| n.local_reads) as f64;
        let peer = sum.total(|n| n.peer_reads).max(1) as f64;
        let ext = sum.total(|n| n.external_adopts);
        ok &= local / peer >= C7_MIN_RATIO && ext <= 1;
        out.push(format!(
            "seed {seed}: {:.2e}:1, {ext} external",
            local / peer
        ));
    }
    let detail = out.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Error profile with 35 µs links.
const C8_MEAN_NANOS: f64 = 1_000_000.0;
const C8_MAX_NANOS: u64 = 30_000_000;
const C8_MAX_SECS: f64 = 120.0;

fn c8_error() -> Verdict {
    let start = Instant::now();
    let mut worst_mean: f64 = 0.0;
    let mut worst_max = 0;
    let mut means = Vec::new();
    for seed in 1..=3 {
        let s = scenario("error-profile", seed, None).unwrap();
        let (trace, _) = run_simulation(s.config, &s.schedule).map_err(|e| e.to_string())?;
        for (node, n) in oracle_error(&trace).per_node {
            worst_mean = worst_mean.max(n.mean_abs_error_nanos);
            worst_max = worst_max.max(n.max_abs_error_nanos);
            if seed == 1 {
                means.push(format!("{node}:{:.0}us", n.mean_error_nanos / 1e3));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64() / 3.0;
    let detail = format!(
        "worst mean |err| {:.0}us, max {:.2}ms, seed 1 means {}, {secs:.1}s per run",
        worst_mean / 1e3,
        worst_max as f64 / 1e6,
        means.join(" ")
    );
    if worst_mean < C8_MEAN_NANOS && worst_max < C8_MAX_NANOS && secs < C8_MAX_SECS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Datagram handling under fuzzing, tampering and replay.
const C9_FUZZ: usize = 1_000_000;

fn c9_wire() -> Verdict {
    let key = LinkKey::new([0x42; 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sealer = Sealer::new(1, 0);
    let payloads = [
        Payload::TsRequest,
        Payload::TsReply {
            echo: wire::make_nonce(2, 5),
            nanos: 1_700_000_000_000_000_000,
            epsilon_nanos: 35_000,
        },
        Payload::FailureReply {
            echo: wire::make_nonce(3, 1),
            reason: wire::FailureReason::Tainted,
        },
        Payload::ExtRequest,
        Payload::CalRequest {
            wait_nanos: 1_264_000_000,
        },
    ];
    let mut valid = Vec::new();
    for i in 0..64 {
        let p = payloads[i % payloads.len()];
        valid.push(sealer.seal(p, &key).map_err(|e| e.to_string())?.1);
    }
    let mut accepted = 0;
    for i in 0..C9_FUZZ {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = rng.gen_range(0..96);
            (0..len).map(|_| rng.gen()).collect()
        } else {
            let mut b = valid[rng.gen_range(0..valid.len())].clone();
            for _ in 0..rng.gen_range(1..4) {
                let at = rng.gen_range(0..b.len());
                b[at] = rng.gen();
            }
            if rng.gen_bool(0.2) {
                b.truncate(rng.gen_range(0..b.len()));
            }
            b
        };
        let mut w = ReplayWindow::default();
        if wire::decode(&bytes, &key, &mut w).is_ok() && !valid.contains(&bytes) {
            accepted += 1;
        }
    }
    let mut flips = 0;
    let mut flips_accepted = 0;
    for d in &valid {
        for bit in 0..d.len() * 8 {
            let mut b = d.clone();
            b[bit / 8] ^= 1 << (bit % 8);
            flips += 1;
            if wire::decode(&b, &key, &mut ReplayWindow::default()).is_ok() {
                flips_accepted += 1;
            }
        }
    }
    let mut w = ReplayWindow::default();
    let mut replays_accepted = 0;
    for d in &valid {
        wire::decode(d, &key, &mut w).map_err(|e| e.to_string())?;
    }
    for d in valid.iter().rev() {
        if wire::decode(d, &key, &mut w).is_ok() {
            replays_accepted += 1;
        }
    }
    let vectors = check_wire_vectors()?;
    let detail = format!(
        "{C9_FUZZ} fuzzed ({accepted} forged accepted), {flips_accepted}/{flips} bit flips \
         accepted, {replays_accepted}/{} replays accepted, {vectors} vectors byte-exact",
        valid.len()
    );
    if accepted == 0 && flips_accepted == 0 && replays_accepted == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Same seed, same CSV.
fn c10_determinism() -> Verdict {
    for name in SCENARIO_NAMES {
        let csv = || -> Result<String, String> {
            let s = scenario(name, 11, Some(50 * SECOND)).unwrap();
            let (trace, _) = run_simulation(s.config, &s.schedule).map_err(|e| e.to_string())?;
            Ok(trace.to_csv_string())
        };
        if csv()? != csv()? {
            return Err(format!("{name}: traces differ"));
        }
    }
    let sched = random_schedule(
        5,
        &RandomScheduleParams {
            nodes: 3,
            start_nanos: SECOND,
            end_nanos: 40 * SECOND,
            events: 40,
        },
    );
    let run = || {
        run_simulation(triad::sim::SimConfig::default(), &sched)
            .map(|(t, _)| t.to_csv_string())
            .map_err(|e| e.to_string())
    };
    if run()? != run()? {
        return Err("random schedule: traces differ".into());
    }
    Ok(format!(
        "{} scenarios and a random schedule byte-identical",
        SCENARIO_NAMES.len()
    ))
}

type Criterion = (&'static str, fn() -> Verdict);

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("1 strict monotonicity", c1_monotonic),
        ("2 bounded error", c2_bounded),
        ("3 increment rule", c3_increment),
        ("4 scenario conformance", c4_scenarios),
        ("5 rate guard", c5_guard),
        ("6 calibration", c6_calibration),
        ("7 access profile", c7_profile),
        ("8 error profile", c8_error),
        ("9 wire robustness", c9_wire),
        ("10 determinism", c10_determinism),
    ];
    let results: Vec<Verdict> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria.iter().map(|(_, f)| s.spawn(*f)).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("panicked".into())))
            .collect()
    });
    let mut failed = Vec::new();
    for ((name, _), r) in criteria.iter().zip(&results) {
        match r {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                println!("FAIL criterion {name}: {d}");
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
