//! Plot data derived from run traces. Every export is a deterministic
//! function of the trace; an empty trace gives just the header.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::sim::RunTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    ErrorOverTime,
    AccessFrequency,
    EpochLength,
    Rtt,
}

impl ExportKind {
    pub const ALL: [ExportKind; 4] = [
        ExportKind::ErrorOverTime,
        ExportKind::AccessFrequency,
        ExportKind::EpochLength,
        ExportKind::Rtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExportKind::ErrorOverTime => "error-over-time",
            ExportKind::AccessFrequency => "access-frequency",
            ExportKind::EpochLength => "epoch-length",
            ExportKind::Rtt => "rtt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn header(self) -> &'static str {
        match self {
            ExportKind::ErrorOverTime => "time_s,node,phase,error_us,epsilon_us",
            ExportKind::AccessFrequency => "time_s,node,local_reads,peer_reads,external_reads",
            ExportKind::EpochLength => "bin_low_ns,bin_high_ns,count,fraction",
            ExportKind::Rtt => "node,source,rtt_us",
        }
    }
}

/// Serves are thinned to at most this many rows per node.
pub const MAX_ERROR_ROWS_PER_NODE: usize = 20_000;

fn secs(nanos: u64) -> String {
    format!("{:.6}", nanos as f64 / 1e9)
}

fn micros(nanos: i128) -> String {
    format!("{:.3}", nanos as f64 / 1e3)
}

pub fn export(trace: &RunTrace, kind: ExportKind) -> String {
    let mut out = String::new();
    out.push_str(kind.header());
    out.push('\n');
    match kind {
        ExportKind::ErrorOverTime => error_over_time(trace, &mut out),
        ExportKind::AccessFrequency => access_frequency(trace, &mut out),
        ExportKind::EpochLength => epoch_length(trace, &mut out),
        ExportKind::Rtt => rtt(trace, &mut out),
    }
    out
}

/// One row per served timestamp (thinned evenly on long runs), plus the
/// calibration rounds with phase `calibration` and no error value.
fn error_over_time(trace: &RunTrace, out: &mut String) {
    let mut serves: BTreeMap<u32, usize> = BTreeMap::new();
    for r in trace.rows_of("serve") {
        *serves.entry(r.node).or_default() += 1;
    }
    let stride: BTreeMap<u32, usize> = serves
        .iter()
        .map(|(n, c)| (*n, c.div_ceil(MAX_ERROR_ROWS_PER_NODE).max(1)))
        .collect();
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    for r in &trace.rows {
        match r.kind.as_ref() {
            "cal_echo" | "cal_held" | "cal_reject" | "calibrated" => {
                let _ = writeln!(out, "{},{},calibration,,", secs(r.event_nanos), r.node);
            }
            "serve" => {
                let i = seen.entry(r.node).or_default();
                *i += 1;
                if !(*i - 1).is_multiple_of(stride[&r.node]) {
                    continue;
                }
                let (Some(e), Some(eps)) = (r.oracle_error_nanos, r.epsilon_nanos) else {
                    continue;
                };
                let _ = writeln!(
                    out,
                    "{},{},serving,{},{}",
                    secs(r.event_nanos),
                    r.node,
                    micros(e as i128),
                    micros(eps as i128)
                );
            }
            _ => {}
        }
    }
}

/// Reads per node per local-read report: each `local_reads` row closes a
/// bucket, and the peer and external queries since the previous report
/// are attributed to it.
fn access_frequency(trace: &RunTrace, out: &mut String) {
    let mut pending: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for r in &trace.rows {
        match r.kind.as_ref() {
            "peer_query" => pending.entry(r.node).or_default().0 += 1,
            "external_query" => pending.entry(r.node).or_default().1 += 1,
            "local_reads" => {
                let (peer, ext) = pending.remove(&r.node).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{peer},{ext}",
                    secs(r.event_nanos),
                    r.node,
                    r.value_nanos.unwrap_or(0)
                );
            }
            _ => {}
        }
    }
}

/// Histogram of in-enclave period lengths over power-of-two bins.
fn epoch_length(trace: &RunTrace, out: &mut String) {
    let mut bins: BTreeMap<u32, u64> = BTreeMap::new();
    let mut total = 0u64;
    for r in trace.rows_of("exit") {
        let Some(len) = r.value_nanos else { continue };
        *bins.entry(64 - len.max(1).leading_zeros()).or_default() += 1;
        total += 1;
    }
    for (bit, count) in bins {
        let low = 1u64 << (bit - 1);
        let high = low.saturating_mul(2) - 1;
        let _ = writeln!(
            out,
            "{low},{high},{count},{:.6}",
            count as f64 / total as f64
        );
    }
}

fn rtt(trace: &RunTrace, out: &mut String) {
    for r in &trace.rows {
        let source = match r.kind.as_ref() {
            "peer_rtt" => "peer",
            "external_rtt" => "external",
            _ => continue,
        };
        if let Some(v) = r.value_nanos {
            let _ = writeln!(out, "{},{source},{}", r.node, micros(v as i128));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TraceRow;

    #[test]
    fn empty_trace_gives_headers() {
        let t = RunTrace::default();
        for k in ExportKind::ALL {
            assert_eq!(export(&t, k), format!("{}\n", k.header()));
            assert_eq!(ExportKind::from_name(k.name()), Some(k));
        }
    }

    #[test]
    fn rows_per_kind() {
        let t = RunTrace {
            seed: 0,
            rows: vec![
                TraceRow::new(1_000, 1, "cal_held"),
                TraceRow::new(2_000, 1, "exit").value(3),
                TraceRow::new(2_500, 1, "exit").value(1_000),
                TraceRow::new(3_000, 1, "peer_query").value(2),
                TraceRow::new(3_100, 1, "peer_rtt").value(70_000),
                TraceRow::new(4_000, 1, "serve").timestamp(1_000_500, 900, 1_000_000),
                TraceRow::new(5_000, 1, "local_reads").value(42),
            ],
        };
        assert_eq!(
            export(&t, ExportKind::ErrorOverTime),
            "time_s,node,phase,error_us,epsilon_us\n\
             0.000001,1,calibration,,\n\
             0.000004,1,serving,0.500,0.900\n"
        );
        assert!(export(&t, ExportKind::AccessFrequency).ends_with("0.000005,1,42,1,0\n"));
        assert_eq!(
            export(&t, ExportKind::EpochLength),
            "bin_low_ns,bin_high_ns,count,fraction\n2,3,1,0.500000\n512,1023,1,0.500000\n"
        );
        assert!(export(&t, ExportKind::Rtt).ends_with("1,peer,70.000\n"));
    }
}
