//! Operator surface: node daemon, loopback external source, experiment
//! runner and plot-data export.

pub mod config;
pub mod daemon;
pub mod experiment;
pub mod export;

pub use config::{ConfigError, ExperimentSpec, NodeConfig};
pub use daemon::{query, run_external, run_node, DaemonError};
pub use experiment::{run_experiment, ExperimentError};
pub use export::{export, ExportKind};
