#![allow(dead_code)]

use std::path::PathBuf;

use triad::wire::{self, FailureReason, LinkKey, Payload, ReplayWindow, WireMessage};

pub fn testdata(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("testdata")
        .join(rel)
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

fn expected_message(name: &str) -> WireMessage {
    let (sender_id, seq, payload) = match name {
        "ts_reply" => (
            1,
            0,
            Payload::TsReply {
                echo: [0; 12],
                nanos: 1,
                epsilon_nanos: 0,
            },
        ),
        "failure_reply" => (
            2,
            7,
            Payload::FailureReply {
                echo: wire::make_nonce(3, 9),
                reason: FailureReason::Seeding,
            },
        ),
        "ext_request" => (5, 258, Payload::ExtRequest),
        "cal_reply" => (
            0,
            41,
            Payload::CalReply {
                echo: wire::make_nonce(7, 3),
                server_elapsed_nanos: 1_264_000_000,
                server_nanos: 1_700_000_001_264_000_000,
            },
        ),
        other => panic!("unknown vector {other}"),
    };
    WireMessage {
        version: 1,
        sender_id,
        nonce: wire::make_nonce(sender_id, seq),
        seq,
        payload,
    }
}

/// Checks every stored datagram against a fresh encoding. Returns the
/// number of vectors checked, or a description of the first mismatch.
pub fn check_wire_vectors() -> Result<usize, String> {
    let text = std::fs::read_to_string(testdata("wire/vectors.txt")).map_err(|e| e.to_string())?;
    let mut n = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, key, datagram) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(format!("bad line: {line}")),
        };
        let key = LinkKey::from_hex(key).map_err(|e| format!("{name}: {e}"))?;
        let want = unhex(datagram);
        let msg = expected_message(name);
        let got = wire::encode(&msg, &key).map_err(|e| format!("{name}: {e}"))?;
        if got != want {
            return Err(format!("{name}: encoding differs"));
        }
        let back = wire::decode(&want, &key, &mut ReplayWindow::default())
            .map_err(|e| format!("{name}: {e}"))?;
        if back != msg {
            return Err(format!("{name}: decoded {back:?}"));
        }
        n += 1;
    }
    Ok(n)
}

use triad::sim::{AdversaryAction, AdversarySchedule, RunTrace, SimConfig};

pub const SECOND: u64 = 1_000_000_000;

/// Trio with no background exits, so only scheduled actions interrupt.
pub fn quiet_config(duration_nanos: u64) -> SimConfig {
    let mut cfg = SimConfig {
        duration_nanos,
        ..SimConfig::default()
    };
    cfg.host.exit_model = None;
    cfg
}

/// Local serving only: a quiet window well after bootstrap.
pub fn scenario_local(seed: u64) -> (SimConfig, AdversarySchedule, u64, u64) {
    (
        quiet_config(21 * SECOND),
        AdversarySchedule::new(seed),
        20 * SECOND,
        20 * SECOND + 50_000_000,
    )
}

/// One node interrupted, recovered through one peer exchange.
pub fn scenario_single_taint(seed: u64) -> (SimConfig, AdversarySchedule, u64, u64) {
    let mut s = AdversarySchedule::new(seed);
    s.push(
        20 * SECOND,
        AdversaryAction::ForceExit {
            node: 1,
            off_nanos: 20_000,
        },
    );
    (quiet_config(22 * SECOND), s, 20 * SECOND, 21 * SECOND)
}

/// Every node interrupted at once; recovery needs the external source.
pub fn scenario_all_tainted(seed: u64) -> (SimConfig, AdversarySchedule, u64, u64) {
    let mut s = AdversarySchedule::new(seed);
    for node in 1..=3 {
        s.push(
            25 * SECOND,
            AdversaryAction::ForceExit {
                node,
                off_nanos: 20_000,
            },
        );
    }
    (quiet_config(27 * SECOND), s, 25 * SECOND, 26 * SECOND)
}

/// `node kind` per row in `[from, to)`, timestamps dropped.
pub fn event_lines(trace: &RunTrace, from: u64, to: u64, serves: bool) -> Vec<String> {
    trace
        .rows
        .iter()
        .filter(|r| r.event_nanos >= from && r.event_nanos < to)
        .filter(|r| serves || r.kind != "serve")
        .filter(|r| r.kind != "local_reads")
        .map(|r| format!("{} {}", r.node, r.kind))
        .collect()
}

/// Compares against `testdata/golden/<name>.txt`, rewriting it when
/// UPDATE_GOLDEN is set.
pub fn check_golden(name: &str, lines: &[String]) -> Result<(), String> {
    let path = testdata(&format!("golden/{name}.txt"));
    let text = lines.join("\n") + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, &text).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == text {
        return Ok(());
    }
    let at = want
        .lines()
        .zip(text.lines())
        .position(|(a, b)| a != b)
        .unwrap_or(want.lines().count().min(text.lines().count()));
    Err(format!("{name}: first difference at line {}", at + 1))
}
