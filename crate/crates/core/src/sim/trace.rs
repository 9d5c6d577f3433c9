//! Run traces: one CSV row per recorded event.
//!
//! Columns are `event_nanos,node,kind,value_nanos,epsilon_nanos,oracle_error_nanos`.
//! Empty cells mean "not applicable". Node 0 is the external source.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::calibration::RoundKind;
use crate::guard::VerdictKind;
use crate::node::{NodeEvent, ServeError, UntaintKind};
use crate::time::{apply_drift, Provenance};

pub const CSV_HEADER: &str = "event_nanos,node,kind,value_nanos,epsilon_nanos,oracle_error_nanos";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub event_nanos: u64,
    pub node: u32,
    pub kind: Cow<'static, str>,
    pub value_nanos: Option<u64>,
    pub epsilon_nanos: Option<u64>,
    pub oracle_error_nanos: Option<i64>,
}

impl TraceRow {
    pub fn new(event_nanos: u64, node: u32, kind: &'static str) -> Self {
        Self {
            event_nanos,
            node,
            kind: Cow::Borrowed(kind),
            value_nanos: None,
            epsilon_nanos: None,
            oracle_error_nanos: None,
        }
    }

    pub fn value(mut self, v: u64) -> Self {
        self.value_nanos = Some(v);
        self
    }

    pub fn timestamp(mut self, nanos: u64, eps: u64, oracle_nanos: u64) -> Self {
        self.value_nanos = Some(nanos);
        self.epsilon_nanos = Some(eps);
        let err = nanos as i128 - oracle_nanos as i128;
        self.oracle_error_nanos = Some(err.clamp(i64::MIN as i128, i64::MAX as i128) as i64);
        self
    }

    /// True when the row carries an oracle error larger than its bound.
    /// The row in CSV form, without a line terminator.
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.event_nanos,
            self.node,
            self.kind,
            opt(self.value_nanos),
            opt(self.epsilon_nanos),
            opt(self.oracle_error_nanos)
        )
    }

    pub fn violates_bound(&self) -> bool {
        match (self.oracle_error_nanos, self.epsilon_nanos) {
            (Some(e), Some(eps)) => e.unsigned_abs() > eps,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunTrace {
    pub seed: u64,
    pub rows: Vec<TraceRow>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl RunTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{}", r.to_csv_line())?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ascii output")
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut trace = RunTrace::default();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let no = idx + 1;
            if no == 1 {
                if line.trim() != CSV_HEADER {
                    return Err(TraceError::Parse {
                        line: no,
                        message: "unexpected header".into(),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| TraceError::Parse { line: no, message };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(err(format!("expected 6 columns, got {}", cols.len())));
            }
            fn cell<T: std::str::FromStr>(s: &str) -> Result<Option<T>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| format!("bad number {s:?}"))
                }
            }
            trace.rows.push(TraceRow {
                event_nanos: cell(cols[0])
                    .map_err(err)?
                    .ok_or_else(|| err("missing time".into()))?,
                node: cell(cols[1])
                    .map_err(err)?
                    .ok_or_else(|| err("missing node".into()))?,
                kind: Cow::Owned(cols[2].to_string()),
                value_nanos: cell(cols[3]).map_err(err)?,
                epsilon_nanos: cell(cols[4]).map_err(err)?,
                oracle_error_nanos: cell(cols[5]).map_err(err)?,
            });
        }
        Ok(trace)
    }

    pub fn rows_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRow> + 'a {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.rows_of(kind).count()
    }
}

/// Trace rows for one node event. `oracle_nanos` is the true time of the
/// event, used for the error column of timestamp rows.
pub fn event_rows(at: u64, id: u32, event: &NodeEvent, oracle: u64) -> Vec<TraceRow> {
    let row = |kind: &'static str| TraceRow::new(at, id, kind);
    match *event {
        NodeEvent::CalibrationRound { kind, rejection } => vec![match (kind, rejection) {
            (RoundKind::Echo, None) => row("cal_echo"),
            (RoundKind::Held, None) => row("cal_held"),
            (_, Some(_)) => row("cal_reject"),
        }],
        NodeEvent::Calibrated(ref r) => {
            vec![row("calibrated").value(apply_drift(1_000_000_000, r.drift))]
        }
        NodeEvent::CalibrationFailed => vec![row("calibration_failed")],
        NodeEvent::Seeded(ts) => {
            vec![row("seeded").timestamp(ts.nanos, ts.error_bound_nanos, oracle)]
        }
        NodeEvent::Tainted { last_nanos } => vec![row("tainted").value(last_nanos)],
        NodeEvent::PeerQuery(p) => vec![row("peer_query").value(p as u64)],
        NodeEvent::PeerFailure(p) => vec![row("peer_failure").value(p as u64)],
        NodeEvent::PeerTimeout(p) => vec![row("peer_timeout").value(p as u64)],
        NodeEvent::Deferred => vec![row("deferred")],
        NodeEvent::ExternalQuery => vec![row("external_query")],
        NodeEvent::ExternalTimeout => vec![row("external_timeout")],
        NodeEvent::UntaintAborted => vec![row("untaint_aborted")],
        NodeEvent::Untainted {
            outcome,
            rtt_nanos,
            delta_nanos,
        } => {
            let a = outcome.adopted;
            let mut v =
                vec![row(outcome.kind.name()).timestamp(a.nanos, a.error_bound_nanos, oracle)];
            let rtt_kind = match a.provenance {
                Provenance::External => "external_rtt",
                _ => "peer_rtt",
            };
            if outcome.kind != UntaintKind::SelfUntaint || rtt_nanos > 0 {
                v.push(row(rtt_kind).value(rtt_nanos));
            }
            if delta_nanos > 0 {
                v.push(row("off_enclave").value(delta_nanos));
            }
            v
        }
        NodeEvent::Guard(g) => {
            let kind = match g.kind {
                VerdictKind::Pass => "guard_pass",
                VerdictKind::RateViolation => "guard_rate_violation",
                VerdictKind::FrequencyViolation => "guard_frequency_violation",
                VerdictKind::Interrupted => "guard_interrupted",
            };
            let r = row(kind);
            vec![if g.measured_ratio.is_finite() {
                r.value((g.measured_ratio * 1e6).round().max(0.0) as u64)
            } else {
                r
            }]
        }
        NodeEvent::PeerReplied(p) => vec![row("peer_replied").value(p as u64)],
        NodeEvent::ReplySuppressed(p) => vec![row("reply_suppressed").value(p as u64)],
        NodeEvent::FailureReplied(p) => vec![row("failure_replied").value(p as u64)],
        NodeEvent::Served(ts) => {
            vec![row("serve").timestamp(ts.nanos, ts.error_bound_nanos, oracle)]
        }
        NodeEvent::ServeFailed(e) => vec![row(match e {
            ServeError::Unavailable => "serve_failed",
            ServeError::NotReady => "serve_not_ready",
            ServeError::Terminated => "serve_terminated",
        })],
        NodeEvent::Dropped(_) => vec![row("dropped")],
        NodeEvent::Terminated(reason) => vec![TraceRow {
            kind: format!("terminated_{}", reason.name()).into(),
            ..row("terminated")
        }],
    }
}

/// Per-node statistics over a trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeSummary {
    pub serves: u64,
    pub serve_failures: u64,
    pub local_reads: u64,
    pub peer_reads: u64,
    /// Requests sent to the external source, including aborted ones.
    pub external_reads: u64,
    /// Timestamps actually taken from the external source.
    pub external_adopts: u64,
    pub bootstrap_reads: u64,
    pub mean_error_nanos: f64,
    pub mean_abs_error_nanos: f64,
    pub max_abs_error_nanos: u64,
    /// Serves whose oracle error exceeds the reported bound.
    pub bound_violations: u64,
    /// Serves not strictly above the previous serve of the same node.
    pub monotonicity_violations: u64,
    pub terminations: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorSummary {
    pub per_node: BTreeMap<u32, NodeSummary>,
}

impl ErrorSummary {
    pub fn total(&self, f: impl Fn(&NodeSummary) -> u64) -> u64 {
        self.per_node.values().map(f).sum()
    }
}

/// Oracle error of every serve, plus access counts, per node.
pub fn oracle_error(trace: &RunTrace) -> ErrorSummary {
    let mut out = ErrorSummary::default();
    let mut last: BTreeMap<u32, u64> = BTreeMap::new();
    let mut sums: BTreeMap<u32, (i128, u128)> = BTreeMap::new();
    for r in &trace.rows {
        if r.node == 0 {
            continue;
        }
        let s = out.per_node.entry(r.node).or_default();
        match r.kind.as_ref() {
            "serve" => {
                s.serves += 1;
                if r.violates_bound() {
                    s.bound_violations += 1;
                }
                if let Some(v) = r.value_nanos {
                    if last.get(&r.node).is_some_and(|&p| v <= p) {
                        s.monotonicity_violations += 1;
                    }
                    last.insert(r.node, v);
                }
                if let Some(e) = r.oracle_error_nanos {
                    let acc = sums.entry(r.node).or_default();
                    acc.0 += e as i128;
                    acc.1 += e.unsigned_abs() as u128;
                    s.max_abs_error_nanos = s.max_abs_error_nanos.max(e.unsigned_abs());
                }
            }
            "serve_failed" => s.serve_failures += 1,
            "local_reads" => s.local_reads += r.value_nanos.unwrap_or(0),
            "peer_query" => s.peer_reads += 1,
            "external_query" => s.external_reads += 1,
            "external_adopt" => s.external_adopts += 1,
            "seeded" => s.bootstrap_reads += 1,
            k if k.starts_with("terminated") => s.terminations += 1,
            _ => {}
        }
    }
    for (node, (sum, abs)) in sums {
        let s = out.per_node.get_mut(&node).expect("node seen");
        if s.serves > 0 {
            s.mean_error_nanos = sum as f64 / s.serves as f64;
            s.mean_abs_error_nanos = abs as f64 / s.serves as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let trace = RunTrace {
            seed: 1,
            rows: vec![
                TraceRow::new(5, 1, "serve").timestamp(1_000, 10, 995),
                TraceRow::new(6, 2, "exit").value(77),
                TraceRow::new(7, 0, "tainted"),
            ],
        };
        let text = trace.to_csv_string();
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.contains("5,1,serve,1000,10,5\n"));
        assert!(text.contains("7,0,tainted,,,\n"));
        let back = RunTrace::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.rows, trace.rows);
    }

    #[test]
    fn summary_counts_violations() {
        let trace = RunTrace {
            seed: 0,
            rows: vec![
                TraceRow::new(1, 1, "serve").timestamp(100, 0, 100),
                TraceRow::new(2, 1, "serve").timestamp(100, 0, 101),
                TraceRow::new(3, 1, "serve").timestamp(90, 5, 102),
                TraceRow::new(4, 1, "peer_query").value(2),
            ],
        };
        let s = &oracle_error(&trace).per_node[&1];
        assert_eq!(s.serves, 3);
        assert_eq!(s.monotonicity_violations, 2);
        assert_eq!(s.bound_violations, 2);
        assert_eq!(s.max_abs_error_nanos, 12);
        assert_eq!(s.peer_reads, 1);
    }

    #[test]
    fn bad_csv_reports_line() {
        let text = format!("{CSV_HEADER}\n1,1,serve,,,\nx,1,serve,,,\n");
        match RunTrace::read_csv(text.as_bytes()) {
            Err(TraceError::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
