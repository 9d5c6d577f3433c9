//! Runs one simulator experiment and writes its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use thiserror::Error;

use super::config::ExperimentSpec;
use super::export::{export, ExportKind};
use crate::sim::{
    oracle_error, run_simulation, scenario, AdversarySchedule, ErrorSummary, RunTrace,
    ScheduleError, Topology, SCENARIO_NAMES,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown scenario {0:?} (known: {known})", known = SCENARIO_NAMES.join(", "))]
    UnknownScenario(String),
    #[error("{path}: {source}")]
    Schedule {
        path: PathBuf,
        source: ScheduleError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub trace: RunTrace,
    pub summary: ErrorSummary,
    pub files: Vec<PathBuf>,
}

pub const SUMMARY_HEADER: &str = "seed,node,serves,mean_error_us,mean_abs_error_us,\
max_abs_error_us,local_reads,peer_reads,external_reads,external_adopts,bound_violations,\
monotonicity_violations,terminations";

/// Per-node summary as CSV, one row per node.
pub fn summary_csv(seed: u64, summary: &ErrorSummary) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (node, s) in &summary.per_node {
        let _ = writeln!(
            out,
            "{seed},{node},{},{:.3},{:.3},{:.3},{},{},{},{},{},{},{}",
            s.serves,
            s.mean_error_nanos / 1e3,
            s.mean_abs_error_nanos / 1e3,
            s.max_abs_error_nanos as f64 / 1e3,
            s.local_reads,
            s.peer_reads,
            s.external_reads,
            s.external_adopts,
            s.bound_violations,
            s.monotonicity_violations,
            s.terminations
        );
    }
    out
}

/// Runs the spec and writes `trace.csv`, `summary.csv` and one CSV per
/// plot-data kind into the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, ExperimentError> {
    let duration = spec.duration_s.map(|s| (s * 1e9).round() as u64);
    let mut sc = scenario(&spec.scenario, spec.seed, duration)
        .ok_or_else(|| ExperimentError::UnknownScenario(spec.scenario.clone()))?;
    if spec.nodes != sc.config.topology.nodes {
        sc.config.topology = Topology {
            nodes: spec.nodes,
            ..sc.config.topology
        };
    }
    if let Some(ms) = spec.client_period_ms {
        sc.config.client_period_nanos = (ms * 1e6).round() as u64;
    }
    if let Some(r) = spec.record_serves {
        sc.config.record_serves = r;
    }
    let mut schedule = sc.schedule;
    if let Some(path) = &spec.schedule {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        let extra =
            AdversarySchedule::parse(&text).map_err(|source| ExperimentError::Schedule {
                path: path.clone(),
                source,
            })?;
        schedule.events.extend(extra.events);
        schedule.events.sort_by_key(|e| e.at);
    }
    schedule.seed = spec.seed;
    let (trace, _) =
        run_simulation(sc.config, &schedule).map_err(|source| ExperimentError::Schedule {
            path: spec.schedule.clone().unwrap_or_default(),
            source,
        })?;
    let summary = oracle_error(&trace);

    let dir = &spec.output_dir;
    let io = |path: PathBuf| move |source| ExperimentError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.clone()))?;
    let mut files = Vec::new();
    let mut write = |name: String, body: String| -> Result<(), ExperimentError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(path.clone()))?;
        files.push(path);
        Ok(())
    };
    write("trace.csv".into(), trace.to_csv_string())?;
    write("summary.csv".into(), summary_csv(spec.seed, &summary))?;
    for kind in ExportKind::ALL {
        write(format!("{}.csv", kind.name()), export(&trace, kind))?;
    }
    Ok(ExperimentOutput {
        trace,
        summary,
        files,
    })
}
