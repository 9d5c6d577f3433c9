//! Bootstrap-time drift and rate calibration.
//!
//! A node asks a trusted source to hold a request for a known period and
//! reply. A round only counts when it completed inside one continuous
//! in-enclave period and its total duration stayed under `PP + RTT_max`:
//! an adversary delaying messages turns rounds into aborts instead of
//! skewing the measured rate.

use std::time::Duration;

use thiserror::Error;

use crate::host::{InstructionTimingSample, MemoryTimingSample, NOMINAL_TICKS_PER_NANO};
use crate::time::{apply_drift, DriftRate, RttEstimate, TimeError};
use crate::wire::WireNonce;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalibrationError {
    #[error("PP ({pp_nanos} ns) + RTT_max ({rtt_max_nanos} ns) exceeds L ({l_nanos} ns)")]
    ParamsInadmissible {
        pp_nanos: u64,
        rtt_max_nanos: u64,
        l_nanos: u64,
    },
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("need at least {needed} epoch samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

impl From<TimeError> for CalibrationError {
    fn from(e: TimeError) -> Self {
        CalibrationError::CalibrationFailed(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationParams {
    /// How long the source holds each request.
    pub pp_nanos: u64,
    /// Longest round trip tolerated.
    pub rtt_max_nanos: u64,
    /// Longest continuous in-enclave period.
    pub l_nanos: u64,
    /// Wall time spent repeating rounds, by the source's clock.
    pub total_duration_nanos: u64,
    /// Zero-wait exchanges used to estimate the round trip.
    pub echo_rounds: u32,
    /// Window used to establish the operations-per-millisecond baseline.
    pub ops_window: Duration,
    /// Hard cap on round attempts, valid or not.
    pub max_attempts: u32,
    /// Held rounds whose ratios spread wider than this, relative to their
    /// median, mean the counter rate changed mid-calibration.
    pub max_ratio_spread_ppm: u32,
}

/// L measured on the reference machine.
pub const DEFAULT_L_NANOS: u64 = 1_580_000_000;

impl CalibrationParams {
    /// PP = 0.8 L and RTT_max = 0.15 L, repeated for 10 s.
    pub fn from_l(l_nanos: u64) -> Self {
        Self {
            pp_nanos: l_nanos / 10 * 8,
            rtt_max_nanos: l_nanos / 100 * 15,
            l_nanos,
            total_duration_nanos: 10_000_000_000,
            echo_rounds: 20,
            ops_window: Duration::from_millis(10),
            max_attempts: 2_000,
            max_ratio_spread_ppm: 5_000,
        }
    }

    pub fn check_admissible(&self) -> Result<(), CalibrationError> {
        if self.pp_nanos.saturating_add(self.rtt_max_nanos) > self.l_nanos {
            return Err(CalibrationError::ParamsInadmissible {
                pp_nanos: self.pp_nanos,
                rtt_max_nanos: self.rtt_max_nanos,
                l_nanos: self.l_nanos,
            });
        }
        Ok(())
    }

    /// Longest acceptable duration of a held round, in nominal ticks.
    fn round_limit_ticks(&self) -> u64 {
        (self.pp_nanos + self.rtt_max_nanos) * NOMINAL_TICKS_PER_NANO
    }
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::from_l(DEFAULT_L_NANOS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub drift: DriftRate,
    /// Instructions per corrected millisecond.
    pub ops_per_ms: u64,
    /// Operations per memory access over equal windows, recorded for the
    /// optional frequency check.
    pub ops_per_access: f64,
    pub rtt_stats: RttEstimate,
    pub rounds_attempted: u32,
    pub rounds_succeeded: u32,
}

impl CalibrationResult {
    /// A result for a host that needs no correction; handy in tests.
    pub fn nominal(ops_per_ms: u64, ops_per_access: f64) -> Self {
        Self {
            drift: DriftRate::IDENTITY,
            ops_per_ms,
            ops_per_access,
            rtt_stats: RttEstimate::default(),
            rounds_attempted: 1,
            rounds_succeeded: 1,
        }
    }
}

/// P99.9 of observed in-enclave period lengths, capped at `hard_cap`.
pub fn estimate_l(samples: &[u64], hard_cap: u64) -> Result<u64, CalibrationError> {
    estimate_l_quantile(samples, 999, hard_cap)
}

/// Nearest-rank quantile (`permille` / 1000) of epoch lengths.
pub fn estimate_l_quantile(
    samples: &[u64],
    permille: u32,
    hard_cap: u64,
) -> Result<u64, CalibrationError> {
    const NEEDED: usize = 100;
    if samples.len() < NEEDED {
        return Err(CalibrationError::InsufficientSamples {
            needed: NEEDED,
            got: samples.len(),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as u64;
    let rank = (permille as u64 * n).div_ceil(1000).clamp(1, n);
    Ok(sorted[(rank - 1) as usize].min(hard_cap))
}

fn median(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        a / 2 + b / 2 + (a % 2 + b % 2) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundKind {
    Echo,
    Held,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingRound {
    nonce: WireNonce,
    kind: RoundKind,
    sent_ticks: u64,
    epoch_id: u64,
}

/// Why a round did not count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundRejection {
    /// An exit happened between request and reply.
    EpochChanged,
    /// Round took longer than `PP + RTT_max` (or RTT_max for echoes).
    TooSlow,
    /// The reply did not match the outstanding request.
    Unexpected,
    TimedOut,
    /// Implied rate falls outside the plausibility window.
    Implausible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundOutcome {
    Valid {
        kind: RoundKind,
        ratio: Option<DriftRate>,
    },
    Rejected(RoundRejection),
}

/// What the caller should do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationStep {
    /// Send a `CalRequest` with this hold time, then call
    /// [`Calibrator::sent`].
    Request {
        wait_nanos: u64,
    },
    /// Wait for a fresh epoch before the next round.
    AwaitFreshEpoch,
    /// Wait for the outstanding reply or its timeout.
    AwaitReply,
    /// Enough rounds; take the instruction-rate sample and call
    /// [`Calibrator::finish`].
    MeasureOps,
    Failed,
}

/// Round bookkeeping for one calibration run. Performs no IO.
#[derive(Debug, Clone)]
pub struct Calibrator {
    params: CalibrationParams,
    echo_ticks: Vec<u64>,
    ratios: Vec<u64>,
    pending: Option<PendingRound>,
    first_server_nanos: Option<u64>,
    last_server_nanos: u64,
    attempts: u32,
    valid: u32,
    /// Completed-but-invalid held rounds; they consumed wall time the
    /// source clock may not have recorded.
    slow_rounds: u32,
    needs_fresh_epoch: bool,
    used_epoch: Option<u64>,
    /// Epoch of the latest valid held round. The baseline must be taken in
    /// it, or the rate may have changed after the last measurement.
    held_epoch: Option<u64>,
}

impl Calibrator {
    pub fn new(params: CalibrationParams) -> Result<Self, CalibrationError> {
        params.check_admissible()?;
        Ok(Self {
            params,
            echo_ticks: Vec::new(),
            ratios: Vec::new(),
            pending: None,
            first_server_nanos: None,
            last_server_nanos: 0,
            attempts: 0,
            valid: 0,
            slow_rounds: 0,
            needs_fresh_epoch: false,
            used_epoch: None,
            held_epoch: None,
        })
    }

    pub fn params(&self) -> &CalibrationParams {
        &self.params
    }

    pub fn rounds_attempted(&self) -> u32 {
        self.attempts
    }

    pub fn rounds_succeeded(&self) -> u32 {
        self.valid
    }

    pub fn valid_ratios(&self) -> usize {
        self.ratios.len()
    }

    fn echo_phase(&self) -> bool {
        (self.echo_ticks.len() as u32) < self.params.echo_rounds
    }

    fn budget_spent(&self) -> bool {
        let span = self
            .first_server_nanos
            .map_or(0, |first| self.last_server_nanos.saturating_sub(first));
        let slow = self.slow_rounds as u64 * (self.params.pp_nanos + self.params.rtt_max_nanos);
        span.saturating_add(slow) >= self.params.total_duration_nanos
            || self.attempts >= self.params.max_attempts
    }

    /// Decides the next step given the current epoch.
    pub fn step(&mut self, epoch_id: u64) -> CalibrationStep {
        if self.pending.is_some() {
            return CalibrationStep::AwaitReply;
        }
        if self.budget_spent() {
            if self.ratios.is_empty()
                || self.echo_phase()
                || self.attempts >= self.params.max_attempts
            {
                return CalibrationStep::Failed;
            }
            if self.held_epoch == Some(epoch_id) {
                return CalibrationStep::MeasureOps;
            }
            // Otherwise one more held round, to pin the current rate.
        }
        if self.echo_phase() {
            return CalibrationStep::Request { wait_nanos: 0 };
        }
        // Held rounds must begin at the start of a fresh epoch so that they
        // have the whole of L available.
        if self.needs_fresh_epoch && self.used_epoch == Some(epoch_id) {
            return CalibrationStep::AwaitFreshEpoch;
        }
        self.needs_fresh_epoch = false;
        CalibrationStep::Request {
            wait_nanos: self.params.pp_nanos,
        }
    }

    /// Tells the calibrator that the current epoch is brand new (control
    /// just returned), so a held round may start.
    pub fn epoch_started(&mut self) {
        self.needs_fresh_epoch = false;
        self.used_epoch = None;
    }

    pub fn sent(&mut self, nonce: WireNonce, wait_nanos: u64, ticks: u64, epoch_id: u64) {
        let kind = if wait_nanos == 0 {
            RoundKind::Echo
        } else {
            RoundKind::Held
        };
        self.attempts += 1;
        if kind == RoundKind::Held {
            self.needs_fresh_epoch = true;
            self.used_epoch = Some(epoch_id);
        }
        self.pending = Some(PendingRound {
            nonce,
            kind,
            sent_ticks: ticks,
            epoch_id,
        });
    }

    pub fn pending_nonce(&self) -> Option<WireNonce> {
        self.pending.map(|p| p.nonce)
    }

    /// Timeout for the outstanding round in nominal nanoseconds.
    pub fn reply_timeout_nanos(&self) -> u64 {
        match self.pending.map(|p| p.kind) {
            Some(RoundKind::Echo) => self.params.rtt_max_nanos,
            _ => self.params.pp_nanos + self.params.rtt_max_nanos,
        }
    }

    pub fn on_timeout(&mut self, nonce: WireNonce) -> Option<RoundOutcome> {
        let p = self.pending.filter(|p| p.nonce == nonce)?;
        self.pending = None;
        if p.kind == RoundKind::Held {
            self.slow_rounds += 1;
        }
        Some(RoundOutcome::Rejected(RoundRejection::TimedOut))
    }

    /// The enclave was interrupted; any outstanding round is void.
    pub fn on_exit(&mut self) -> Option<RoundOutcome> {
        self.pending.take()?;
        Some(RoundOutcome::Rejected(RoundRejection::EpochChanged))
    }

    pub fn on_reply(
        &mut self,
        echo: WireNonce,
        server_elapsed_nanos: u64,
        server_nanos: u64,
        ticks: u64,
        epoch_id: u64,
    ) -> RoundOutcome {
        let p = match self.pending {
            Some(p) if p.nonce == echo => p,
            _ => return RoundOutcome::Rejected(RoundRejection::Unexpected),
        };
        self.pending = None;
        self.first_server_nanos.get_or_insert(server_nanos);
        self.last_server_nanos = self.last_server_nanos.max(server_nanos);
        if epoch_id != p.epoch_id {
            return RoundOutcome::Rejected(RoundRejection::EpochChanged);
        }
        let round_ticks = ticks.wrapping_sub(p.sent_ticks);
        match p.kind {
            RoundKind::Echo => {
                if round_ticks > self.params.rtt_max_nanos * NOMINAL_TICKS_PER_NANO {
                    return RoundOutcome::Rejected(RoundRejection::TooSlow);
                }
                self.echo_ticks.push(round_ticks);
                self.valid += 1;
                RoundOutcome::Valid {
                    kind: RoundKind::Echo,
                    ratio: None,
                }
            }
            RoundKind::Held => {
                if round_ticks > self.params.round_limit_ticks() {
                    self.slow_rounds += 1;
                    return RoundOutcome::Rejected(RoundRejection::TooSlow);
                }
                let rtt_ticks = median(&mut self.echo_ticks.clone());
                let held_ticks = round_ticks.saturating_sub(rtt_ticks);
                match DriftRate::from_ratio(server_elapsed_nanos, held_ticks) {
                    Ok(ratio) => {
                        self.ratios.push(ratio.raw());
                        self.held_epoch = Some(epoch_id);
                        self.valid += 1;
                        RoundOutcome::Valid {
                            kind: RoundKind::Held,
                            ratio: Some(ratio),
                        }
                    }
                    Err(_) => RoundOutcome::Rejected(RoundRejection::Implausible),
                }
            }
        }
    }

    /// Epoch in which the baseline sample has to be taken.
    pub fn baseline_epoch(&self) -> Option<u64> {
        self.held_epoch
    }

    /// Median of per-round ratios; `None` until a held round succeeded.
    pub fn drift(&self) -> Option<DriftRate> {
        if self.ratios.is_empty() {
            return None;
        }
        DriftRate::from_raw(median(&mut self.ratios.clone())).ok()
    }

    /// Completes calibration from an instruction sample (and optionally a
    /// memory sample) taken inside one epoch.
    pub fn finish(
        &self,
        ops: InstructionTimingSample,
        memory: Option<MemoryTimingSample>,
    ) -> Result<CalibrationResult, CalibrationError> {
        let drift = self
            .drift()
            .ok_or_else(|| CalibrationError::CalibrationFailed("zero valid rounds".into()))?;
        let lo = *self.ratios.iter().min().expect("non-empty") as u128;
        let hi = *self.ratios.iter().max().expect("non-empty") as u128;
        if (hi - lo) * 1_000_000 > drift.raw() as u128 * self.params.max_ratio_spread_ppm as u128 {
            return Err(CalibrationError::CalibrationFailed(
                "held rounds disagree on the counter rate".into(),
            ));
        }
        let corrected_ns = apply_drift(ops.window_ticks, drift).max(1);
        let ops_per_ms = ((ops.ops_counted as u128 * 1_000_000 + corrected_ns as u128 / 2)
            / corrected_ns as u128) as u64;
        if ops_per_ms == 0 {
            return Err(CalibrationError::CalibrationFailed(
                "no instructions counted".into(),
            ));
        }
        let ops_per_access = memory
            .filter(|m| m.accesses > 0)
            .map(|m| {
                let ops_rate = ops.ops_counted as f64 / ops.window_ticks as f64;
                let mem_rate = m.accesses as f64 / m.window_ticks as f64;
                ops_rate / mem_rate
            })
            .unwrap_or(0.0);
        let rtt_ticks = median(&mut self.echo_ticks.clone());
        Ok(CalibrationResult {
            drift,
            ops_per_ms,
            ops_per_access,
            rtt_stats: RttEstimate::new(apply_drift(rtt_ticks, drift)),
            rounds_attempted: self.attempts,
            rounds_succeeded: self.valid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nonce(i: u8) -> WireNonce {
        [i; 12]
    }

    #[test]
    fn admissibility_boundary() {
        let mut p = CalibrationParams::from_l(1_580_000_000);
        p.pp_nanos = 1_400_000_000;
        p.rtt_max_nanos = 200_000_000;
        assert!(matches!(
            p.check_admissible(),
            Err(CalibrationError::ParamsInadmissible { .. })
        ));
        p.rtt_max_nanos = 180_000_000;
        assert!(p.check_admissible().is_ok());
        assert!(CalibrationParams::default().check_admissible().is_ok());
    }

    #[test]
    fn l_estimates() {
        assert_eq!(estimate_l(&[5_000_000; 200], u64::MAX).unwrap(), 5_000_000);
        let mut mixed = vec![4_000_000u64; 700];
        mixed.extend(std::iter::repeat_n(1_500_000_000, 300));
        assert_eq!(estimate_l(&mixed, u64::MAX).unwrap(), 1_500_000_000);
        assert_eq!(estimate_l(&mixed, 1_000_000_000).unwrap(), 1_000_000_000);
        assert!(matches!(
            estimate_l(&[1; 99], u64::MAX),
            Err(CalibrationError::InsufficientSamples {
                needed: 100,
                got: 99
            })
        ));
    }

    fn small_params() -> CalibrationParams {
        CalibrationParams {
            pp_nanos: 80_000_000,
            rtt_max_nanos: 15_000_000,
            l_nanos: 100_000_000,
            total_duration_nanos: 1_000_000_000,
            echo_rounds: 3,
            ops_window: Duration::from_millis(10),
            max_attempts: 100,
            max_ratio_spread_ppm: 5_000,
        }
    }

    #[test]
    fn echo_then_held_rounds() {
        let mut c = Calibrator::new(small_params()).unwrap();
        let rtt = 1_000_000u64;
        let mut ticks = 0u64;
        let mut server = 0u64;
        for i in 0..3u8 {
            assert_eq!(c.step(0), CalibrationStep::Request { wait_nanos: 0 });
            c.sent(nonce(i), 0, ticks, 0);
            ticks += rtt;
            server += rtt;
            assert!(matches!(
                c.on_reply(nonce(i), 0, server, ticks, 0),
                RoundOutcome::Valid { .. }
            ));
        }
        // held round: counter runs 2% fast
        let step = c.step(0);
        assert_eq!(
            step,
            CalibrationStep::Request {
                wait_nanos: 80_000_000
            }
        );
        c.sent(nonce(9), 80_000_000, ticks, 0);
        ticks += 81_600_000 + rtt;
        server += 80_000_000 + rtt;
        let out = c.on_reply(nonce(9), 80_000_000, server, ticks, 0);
        let RoundOutcome::Valid { ratio: Some(r), .. } = out else {
            panic!("{out:?}")
        };
        assert!((r.as_f64() - 1.0 / 1.02).abs() < 1e-6);
        // next held round needs a fresh epoch
        assert_eq!(c.step(0), CalibrationStep::AwaitFreshEpoch);
        assert!(matches!(c.step(1), CalibrationStep::Request { .. }));
    }

    /// Echoes, then held rounds at the given counter speeds, each in its
    /// own epoch. Returns the calibrator and the epoch of the last round.
    fn run_rounds(speeds: &[f64]) -> (Calibrator, u64) {
        let mut p = small_params();
        p.total_duration_nanos = 81_000_000 * speeds.len() as u64 - 1;
        let mut c = Calibrator::new(p).unwrap();
        let (mut ticks, mut server) = (0u64, 0u64);
        for i in 0..3u8 {
            c.sent(nonce(i), 0, ticks, 0);
            ticks += 1_000_000;
            server += 1_000_000;
            c.on_reply(nonce(i), 0, server, ticks, 0);
        }
        let mut epoch = 0;
        for (i, speed) in speeds.iter().enumerate() {
            epoch += 1;
            assert!(matches!(c.step(epoch), CalibrationStep::Request { .. }));
            c.sent(nonce(10 + i as u8), 80_000_000, ticks, epoch);
            ticks += (80_000_000.0 * speed) as u64 + 1_000_000;
            server += 81_000_000;
            c.on_reply(nonce(10 + i as u8), 80_000_000, server, ticks, epoch);
        }
        (c, epoch)
    }

    fn sample() -> InstructionTimingSample {
        InstructionTimingSample {
            ops_counted: 538_300,
            window_ticks: 10_000_000,
        }
    }

    #[test]
    fn rate_change_between_rounds_fails() {
        let (mut c, epoch) = run_rounds(&[1.0, 1.0, 1.1, 1.1]);
        assert_eq!(c.step(epoch), CalibrationStep::MeasureOps);
        assert!(c.finish(sample(), None).is_err());
        let (c, _) = run_rounds(&[1.0, 1.001, 1.0, 1.0]);
        assert!(c.finish(sample(), None).is_ok());
    }

    #[test]
    fn baseline_needs_the_last_held_epoch() {
        let (mut c, epoch) = run_rounds(&[1.0, 1.0]);
        assert_eq!(c.baseline_epoch(), Some(epoch));
        assert_eq!(c.step(epoch), CalibrationStep::MeasureOps);
        // An exit came first: one more held round before the baseline.
        assert!(matches!(
            c.step(epoch + 1),
            CalibrationStep::Request {
                wait_nanos: 80_000_000
            }
        ));
    }

    #[test]
    fn round_across_exit_is_void() {
        let mut c = Calibrator::new(small_params()).unwrap();
        c.sent(nonce(1), 0, 0, 0);
        assert_eq!(
            c.on_reply(nonce(1), 0, 10, 100, 1),
            RoundOutcome::Rejected(RoundRejection::EpochChanged)
        );
        c.sent(nonce(2), 0, 0, 1);
        assert!(c.on_exit().is_some());
        assert_eq!(c.pending_nonce(), None);
    }

    #[test]
    fn slow_round_rejected() {
        let mut c = Calibrator::new(small_params()).unwrap();
        c.sent(nonce(1), 0, 0, 0);
        assert_eq!(
            c.on_reply(nonce(1), 0, 10, 16_000_000, 0),
            RoundOutcome::Rejected(RoundRejection::TooSlow)
        );
    }

    #[test]
    fn stale_reply_ignored() {
        let mut c = Calibrator::new(small_params()).unwrap();
        c.sent(nonce(1), 0, 0, 0);
        assert!(c.on_timeout(nonce(1)).is_some());
        assert_eq!(
            c.on_reply(nonce(1), 0, 10, 10, 0),
            RoundOutcome::Rejected(RoundRejection::Unexpected)
        );
    }

    #[test]
    fn fails_without_held_rounds() {
        let mut p = small_params();
        p.max_attempts = 2;
        let mut c = Calibrator::new(p).unwrap();
        c.sent(nonce(1), 0, 0, 0);
        c.on_timeout(nonce(1));
        c.sent(nonce(2), 0, 0, 0);
        c.on_timeout(nonce(2));
        assert_eq!(c.step(0), CalibrationStep::Failed);
        let sample = InstructionTimingSample {
            ops_counted: 1,
            window_ticks: 1,
        };
        assert!(c.finish(sample, None).is_err());
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&mut [3, 1, 2]), 2);
        assert_eq!(median(&mut [4, 1, 3, 2]), 2);
        assert_eq!(median(&mut [u64::MAX, u64::MAX]), u64::MAX);
    }
}
