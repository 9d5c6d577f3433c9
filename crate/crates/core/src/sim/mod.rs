//! Deterministic simulation of Triad clusters under attack.
//!
//! Everything runs on virtual time from one event queue, so a run is fully
//! determined by its configuration and schedule seed. The oracle clock is
//! `epoch_base + virtual time` and is never visible to node logic.

pub mod scenarios;
pub mod schedule;
pub mod trace;
pub mod world;

pub use scenarios::{random_schedule, scenario, RandomScheduleParams, Scenario, SCENARIO_NAMES};
pub use schedule::{
    AdversaryAction, AdversarySchedule, MessageMatch, ScheduleError, ScheduledAction,
};
pub use trace::{
    event_rows, oracle_error, ErrorSummary, NodeSummary, RunTrace, TraceRow, CSV_HEADER,
};
pub use world::{run_simulation, sim_keys, SimConfig, SimOutcome, Topology, World};
