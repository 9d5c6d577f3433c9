//! The execution environment a node runs in.
//!
//! A node never touches clocks or counters directly; it goes through an
//! [`EnclaveHost`]. [`SimHost`] is fully deterministic and lets the
//! adversary rescale or overwrite the counter on every exit. [`RealHost`]
//! runs on the local machine and approximates exits with a polling
//! watchdog.

mod real;
mod sim;

use std::time::Duration;

use thiserror::Error;

use crate::time::OffEnclaveInterval;

pub use real::{RealHost, RealHostConfig};
pub use sim::{ExitModel, ExitSpec, SimHost, SimHostConfig};

/// Raw counter value plus the continuous-execution epoch it was read in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostCounterReading {
    pub ticks: u64,
    pub epoch_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExitFlag {
    pub tainted: bool,
    pub exits_observed: u64,
}

/// Operations counted over a counter-measured window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionTimingSample {
    pub ops_counted: u64,
    /// Window length in raw counter ticks.
    pub window_ticks: u64,
}

/// Main-memory accesses completed over a counter-measured window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryTimingSample {
    pub accesses: u64,
    pub window_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum HostError {
    #[error("an enclave exit interrupted the timing window")]
    WindowInterrupted,
}

/// Counter ticks per nanosecond at nominal frequency (1 GHz).
pub const NOMINAL_TICKS_PER_NANO: u64 = 1;

pub trait EnclaveHost {
    fn read_counter(&mut self) -> HostCounterReading;

    /// Current taint state. Never clears it.
    fn poll_exit_flag(&mut self) -> ExitFlag;

    fn clear_exit_flag(&mut self);

    /// Time spent outside the enclave since the flag was last cleared.
    fn off_enclave_interval(&self) -> OffEnclaveInterval;

    /// Busy-counts operations until the raw counter has advanced by
    /// `target` at nominal frequency.
    fn time_instruction_window(
        &mut self,
        target: Duration,
    ) -> Result<InstructionTimingSample, HostError>;

    /// Like [`EnclaveHost::time_instruction_window`] but counting
    /// dependent main-memory loads.
    fn time_memory_window(&mut self, target: Duration) -> Result<MemoryTimingSample, HostError>;

    /// Accounts for `nanos` of in-enclave processing. The simulator moves
    /// virtual time forward (possibly across exits); real hosts do nothing
    /// since the work already took real time.
    fn process_for(&mut self, nanos: u64);

    /// Wall or virtual time used only to stamp trace records. Protocol
    /// logic must never read it.
    fn trace_clock(&self) -> u64;
}

/// `host.backend` configuration value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Simulated,
    Real,
}
