//! Counter-rate attack detection.
//!
//! After control comes back the counter may tick at a different rate. The
//! guard times a short busy window twice, once with the corrected counter
//! and once by counting instructions against the calibrated baseline, and
//! fails the node when the two disagree by more than the threshold.

use std::time::Duration;

use crate::calibration::CalibrationResult;
use crate::host::EnclaveHost;
use crate::time::apply_drift;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardConfig {
    pub window: Duration,
    pub rate_threshold: f64,
    pub memory_check: bool,
    pub frequency_threshold: f64,
    /// Periodic re-check interval, in corrected nanoseconds of serving.
    pub period_nanos: u64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            window: Duration::from_millis(2),
            rate_threshold: 0.05,
            memory_check: false,
            frequency_threshold: 0.10,
            period_nanos: 1_000_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Pass,
    RateViolation,
    FrequencyViolation,
    Interrupted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardVerdict {
    pub kind: VerdictKind,
    /// Observed quantity relative to calibration; 1.0 means unchanged.
    pub measured_ratio: f64,
}

impl GuardVerdict {
    fn interrupted() -> Self {
        Self {
            kind: VerdictKind::Interrupted,
            measured_ratio: f64::NAN,
        }
    }

    pub fn is_violation(&self) -> bool {
        matches!(
            self.kind,
            VerdictKind::RateViolation | VerdictKind::FrequencyViolation
        )
    }
}

/// Compares the corrected counter against instruction timing over one
/// window. `measured_ratio` is counter time over instruction time, so a
/// counter slowed to 0.9x reads as 0.9.
pub fn verify_rate<H: EnclaveHost + ?Sized>(
    host: &mut H,
    calib: &CalibrationResult,
    cfg: &GuardConfig,
) -> GuardVerdict {
    let sample = match host.time_instruction_window(cfg.window) {
        Ok(s) => s,
        Err(_) => return GuardVerdict::interrupted(),
    };
    let counter_ns = apply_drift(sample.window_ticks, calib.drift) as f64;
    let instr_ns = sample.ops_counted as f64 * 1e6 / calib.ops_per_ms.max(1) as f64;
    let ratio = if instr_ns > 0.0 {
        counter_ns / instr_ns
    } else {
        f64::INFINITY
    };
    let kind = if (ratio - 1.0).abs() > cfg.rate_threshold {
        VerdictKind::RateViolation
    } else {
        VerdictKind::Pass
    };
    GuardVerdict {
        kind,
        measured_ratio: ratio,
    }
}

/// Compares the instruction-to-memory latency ratio with calibration.
/// Memory latency does not follow CPU frequency, so a frequency change
/// shows up here even when it fooled the instruction counter.
pub fn verify_frequency<H: EnclaveHost + ?Sized>(
    host: &mut H,
    calib: &CalibrationResult,
    cfg: &GuardConfig,
) -> GuardVerdict {
    let half = cfg.window / 2;
    let ops = match host.time_instruction_window(half) {
        Ok(s) => s,
        Err(_) => return GuardVerdict::interrupted(),
    };
    let mem = match host.time_memory_window(half) {
        Ok(s) => s,
        Err(_) => return GuardVerdict::interrupted(),
    };
    let ops_rate = ops.ops_counted as f64 / ops.window_ticks.max(1) as f64;
    let mem_rate = mem.accesses as f64 / mem.window_ticks.max(1) as f64;
    let ratio = if mem_rate > 0.0 && calib.ops_per_access > 0.0 {
        (ops_rate / mem_rate) / calib.ops_per_access
    } else {
        f64::INFINITY
    };
    let kind = if (ratio - 1.0).abs() > cfg.frequency_threshold {
        VerdictKind::FrequencyViolation
    } else {
        VerdictKind::Pass
    };
    GuardVerdict {
        kind,
        measured_ratio: ratio,
    }
}

/// Rate check, then the frequency check when enabled.
pub fn run_guard<H: EnclaveHost + ?Sized>(
    host: &mut H,
    calib: &CalibrationResult,
    cfg: &GuardConfig,
) -> GuardVerdict {
    let rate = verify_rate(host, calib, cfg);
    if rate.kind != VerdictKind::Pass || !cfg.memory_check {
        return rate;
    }
    verify_frequency(host, calib, cfg)
}
