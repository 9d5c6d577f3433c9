use std::collections::VecDeque;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    EnclaveHost, ExitFlag, HostCounterReading, HostError, InstructionTimingSample,
    MemoryTimingSample,
};
use crate::time::{apply_drift, remove_drift, DriftRate, OffEnclaveInterval};

/// Distribution of in-enclave period lengths and exit durations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitModel {
    /// `(weight, shortest, longest)` in nanoseconds; a mode is picked by
    /// weight and the period drawn uniformly inside it.
    pub modes: Vec<(u32, u64, u64)>,
    pub off_min_nanos: u64,
    pub off_max_nanos: u64,
}

impl ExitModel {
    /// Three clusters of in-enclave periods, the longest ending at 1.58 s and
    /// holding 30% of the mass.
    pub fn trimodal() -> Self {
        Self {
            modes: vec![
                (40, 8_000_000, 12_000_000),
                (30, 90_000_000, 110_000_000),
                (30, 1_500_000_000, 1_580_000_000),
            ],
            off_min_nanos: 5_000,
            off_max_nanos: 40_000,
        }
    }

    pub fn sample_period(&self, rng: &mut impl Rng) -> u64 {
        let total: u32 = self.modes.iter().map(|m| m.0).sum();
        let mut pick = rng.gen_range(0..total.max(1));
        for &(w, lo, hi) in &self.modes {
            if pick < w {
                return rng.gen_range(lo..=hi);
            }
            pick -= w;
        }
        let (_, lo, hi) = self.modes[self.modes.len() - 1];
        rng.gen_range(lo..=hi)
    }

    pub fn sample_off(&self, rng: &mut impl Rng) -> u64 {
        rng.gen_range(self.off_min_nanos..=self.off_max_nanos)
    }
}

/// A scripted exit and what the adversary does while control is outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitSpec {
    pub at: u64,
    pub off_nanos: u64,
    pub counter_rate: Option<DriftRate>,
    pub overwrite_ticks: Option<u64>,
    pub cpu_scale: Option<DriftRate>,
}

impl ExitSpec {
    pub fn plain(at: u64, off_nanos: u64) -> Self {
        Self {
            at,
            off_nanos,
            counter_rate: None,
            overwrite_ticks: None,
            cpu_scale: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimHostConfig {
    /// ADD-equivalent operations per millisecond at CPU scale 1.0.
    pub ops_per_ms: u64,
    /// Symmetric jitter on operation counts, parts per million.
    pub jitter_ppm: u32,
    pub memory_access_nanos: u64,
    pub exit_model: Option<ExitModel>,
    /// Counter value at virtual time zero.
    pub initial_ticks: u64,
    pub counter_rate: DriftRate,
}

impl Default for SimHostConfig {
    fn default() -> Self {
        Self {
            ops_per_ms: 53_830,
            jitter_ppm: 500,
            memory_access_nanos: 100,
            exit_model: None,
            initial_ticks: 0,
            counter_rate: DriftRate::IDENTITY,
        }
    }
}

/// Deterministic host driven by virtual time.
///
/// The driver moves time forward with [`SimHost::advance_to`]; exits due
/// on the way are applied in order. While an exit is in progress the host
/// is "outside" and the driver must not run node logic on it.
#[derive(Debug)]
pub struct SimHost {
    cfg: SimHostConfig,
    rng: ChaCha8Rng,
    now: u64,
    base_ticks: u64,
    base_time: u64,
    rate: DriftRate,
    cpu_scale: DriftRate,
    epoch_id: u64,
    flag: ExitFlag,
    off_accum: u64,
    off_until: Option<u64>,
    epoch_started: u64,
    exit_started: u64,
    scripted: VecDeque<ExitSpec>,
    next_background: Option<u64>,
    finished_epochs: Vec<(u64, u64)>,
    total_off: u64,
}

impl SimHost {
    pub fn new(cfg: SimHostConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next_background = cfg.exit_model.as_ref().map(|m| m.sample_period(&mut rng));
        Self {
            rate: cfg.counter_rate,
            base_ticks: cfg.initial_ticks,
            base_time: 0,
            cpu_scale: DriftRate::IDENTITY,
            cfg,
            rng,
            now: 0,
            epoch_id: 0,
            flag: ExitFlag::default(),
            off_accum: 0,
            off_until: None,
            epoch_started: 0,
            exit_started: 0,
            scripted: VecDeque::new(),
            next_background,
            finished_epochs: Vec::new(),
            total_off: 0,
        }
    }

    /// Queues a scripted exit. Exits must be added in time order.
    pub fn schedule_exit(&mut self, spec: ExitSpec) {
        debug_assert!(self.scripted.back().is_none_or(|s| s.at <= spec.at));
        self.scripted.push_back(spec);
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn in_enclave(&self) -> bool {
        self.off_until.is_none()
    }

    /// When control comes back, if currently outside.
    pub fn returns_at(&self) -> Option<u64> {
        self.off_until
    }

    /// Ground-truth counter rate in ticks per nanosecond.
    pub fn counter_rate(&self) -> DriftRate {
        self.rate
    }

    pub fn epoch_id(&self) -> u64 {
        self.epoch_id
    }

    /// Lengths of completed in-enclave periods as `(ended_at, length)`;
    /// drained by the caller.
    pub fn take_finished_epochs(&mut self) -> Vec<(u64, u64)> {
        std::mem::take(&mut self.finished_epochs)
    }

    pub fn total_off_nanos(&self) -> u64 {
        self.total_off
    }

    /// Next instant at which the host changes state on its own: an exit
    /// while inside, or the return while outside.
    pub fn next_transition(&self) -> Option<u64> {
        if let Some(back) = self.off_until {
            return Some(back);
        }
        self.next_exit_at()
    }

    fn next_exit_at(&self) -> Option<u64> {
        match (self.scripted.front().map(|s| s.at), self.next_background) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn ticks_at(&self, t: u64) -> u64 {
        self.base_ticks
            .wrapping_add(apply_drift(t.saturating_sub(self.base_time), self.rate))
    }

    fn rebase(&mut self, t: u64) {
        self.base_ticks = self.ticks_at(t);
        self.base_time = t;
    }

    /// Moves virtual time to `t`, applying every exit and return due on
    /// the way.
    pub fn advance_to(&mut self, t: u64) {
        loop {
            if let Some(back) = self.off_until {
                let pending_exit = self.scripted.front().map(|s| s.at).filter(|&a| a < back);
                if let Some(at) = pending_exit.filter(|&a| a <= t) {
                    // Adversary acts again while control is still outside.
                    let spec = self.scripted.pop_front().expect("front exists");
                    self.apply_effects(at.max(self.now), &spec);
                    self.extend_off(at.max(self.now) + spec.off_nanos);
                    continue;
                }
                if back > t {
                    break;
                }
                self.resume(back);
                continue;
            }
            match self.next_exit_at() {
                Some(at) if at <= t => self.begin_exit(at.max(self.now)),
                _ => break,
            }
        }
        self.now = self.now.max(t);
    }

    fn begin_exit(&mut self, at: u64) {
        let scripted_due = self
            .scripted
            .front()
            .is_some_and(|s| s.at <= self.next_background.unwrap_or(u64::MAX));
        let off = if scripted_due {
            let spec = self.scripted.pop_front().expect("front exists");
            self.apply_effects(at, &spec);
            spec.off_nanos
        } else {
            self.next_background = None;
            let model = self
                .cfg
                .exit_model
                .as_ref()
                .expect("background exit without model");
            model.sample_off(&mut self.rng)
        };
        self.finished_epochs.push((at, at - self.epoch_started));
        self.now = at;
        self.exit_started = at;
        self.flag.tainted = true;
        self.flag.exits_observed += 1;
        self.epoch_id += 1;
        self.off_until = Some(at + off);
        // Background exits restart relative to the return.
        self.next_background = None;
    }

    fn apply_effects(&mut self, at: u64, spec: &ExitSpec) {
        if let Some(rate) = spec.counter_rate {
            self.rebase(at);
            self.rate = rate;
        }
        if let Some(ticks) = spec.overwrite_ticks {
            self.base_ticks = ticks;
            self.base_time = at;
        }
        if let Some(scale) = spec.cpu_scale {
            self.cpu_scale = scale;
        }
    }

    fn extend_off(&mut self, until: u64) {
        if let Some(back) = self.off_until.as_mut() {
            *back = (*back).max(until);
        }
    }

    fn resume(&mut self, back: u64) {
        let off = back - self.exit_started;
        self.off_accum += off;
        self.total_off += off;
        self.off_until = None;
        self.now = back;
        self.epoch_started = back;
        if let Some(model) = &self.cfg.exit_model {
            self.next_background = Some(back + model.sample_period(&mut self.rng));
        }
    }

    /// Runs in-enclave for `nanos`; returns true if an exit intervened.
    fn run_inside(&mut self, nanos: u64) -> bool {
        let target = self.now + nanos;
        match self.next_exit_at() {
            Some(at) if at < target => {
                self.advance_to(at);
                // Finish the exit; the caller's work resumes afterwards.
                if let Some(back) = self.off_until {
                    self.advance_to(back);
                }
                true
            }
            _ => {
                self.advance_to(target);
                false
            }
        }
    }

    fn jittered(&mut self, value: f64) -> u64 {
        let j = self.cfg.jitter_ppm as f64;
        let factor = if j > 0.0 {
            1.0 + self.rng.gen_range(-j..=j) / 1e6
        } else {
            1.0
        };
        (value * factor).round() as u64
    }
}

impl EnclaveHost for SimHost {
    fn read_counter(&mut self) -> HostCounterReading {
        HostCounterReading {
            ticks: self.ticks_at(self.now),
            epoch_id: self.epoch_id,
        }
    }

    fn poll_exit_flag(&mut self) -> ExitFlag {
        self.flag
    }

    fn clear_exit_flag(&mut self) {
        self.flag.tainted = false;
        self.off_accum = 0;
    }

    fn off_enclave_interval(&self) -> OffEnclaveInterval {
        OffEnclaveInterval::new(self.off_accum)
    }

    fn time_instruction_window(
        &mut self,
        target: Duration,
    ) -> Result<InstructionTimingSample, HostError> {
        let window_ticks = target.as_nanos() as u64 * super::NOMINAL_TICKS_PER_NANO;
        let real = remove_drift(window_ticks, self.rate);
        if self.run_inside(real) {
            return Err(HostError::WindowInterrupted);
        }
        let ideal = self.cfg.ops_per_ms as f64 * self.cpu_scale.as_f64() * real as f64 / 1e6;
        Ok(InstructionTimingSample {
            ops_counted: self.jittered(ideal),
            window_ticks,
        })
    }

    fn time_memory_window(&mut self, target: Duration) -> Result<MemoryTimingSample, HostError> {
        let window_ticks = target.as_nanos() as u64 * super::NOMINAL_TICKS_PER_NANO;
        let real = remove_drift(window_ticks, self.rate);
        if self.run_inside(real) {
            return Err(HostError::WindowInterrupted);
        }
        let ideal = real as f64 / self.cfg.memory_access_nanos.max(1) as f64;
        Ok(MemoryTimingSample {
            accesses: self.jittered(ideal),
            window_ticks,
        })
    }

    fn process_for(&mut self, nanos: u64) {
        self.run_inside(nanos);
    }

    fn trace_clock(&self) -> u64 {
        self.now
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host() -> SimHost {
        SimHost::new(SimHostConfig::default(), 7)
    }

    #[test]
    fn counter_monotone_within_epoch() {
        let mut h = host();
        let a = h.read_counter();
        h.advance_to(1_000_000);
        let b = h.read_counter();
        assert_eq!(a.epoch_id, b.epoch_id);
        assert!(b.ticks >= a.ticks);
        // 1 ms at rate 1.0 on a 1 GHz counter.
        assert_eq!(b.ticks - a.ticks, 1_000_000);
    }

    #[test]
    fn exit_with_overwrite_changes_epoch() {
        let mut h = host();
        h.schedule_exit(ExitSpec {
            overwrite_ticks: Some(5),
            ..ExitSpec::plain(1_000, 500)
        });
        let before = h.read_counter();
        h.advance_to(2_000);
        let after = h.read_counter();
        assert_ne!(before.epoch_id, after.epoch_id);
        assert_eq!(after.ticks, 5 + 1_000);
    }

    #[test]
    fn flag_set_by_exit_and_cleared_explicitly() {
        let mut h = host();
        assert!(!h.poll_exit_flag().tainted);
        h.schedule_exit(ExitSpec::plain(100, 50));
        h.advance_to(100);
        assert!(!h.in_enclave());
        assert_eq!(h.returns_at(), Some(150));
        h.advance_to(200);
        let f = h.poll_exit_flag();
        assert!(f.tainted);
        assert_eq!(f.exits_observed, 1);
        assert_eq!(h.off_enclave_interval().delta_nanos, 50);
        // polling does not clear
        assert!(h.poll_exit_flag().tainted);
        h.clear_exit_flag();
        assert!(!h.poll_exit_flag().tainted);
        h.clear_exit_flag();
        assert!(!h.poll_exit_flag().tainted);
        assert_eq!(h.off_enclave_interval().delta_nanos, 0);
    }

    #[test]
    fn clear_then_exit_leaves_flag_set() {
        let mut h = host();
        h.schedule_exit(ExitSpec::plain(100, 10));
        h.schedule_exit(ExitSpec::plain(300, 10));
        h.advance_to(200);
        h.clear_exit_flag();
        h.advance_to(400);
        assert!(h.poll_exit_flag().tainted);
        assert_eq!(h.poll_exit_flag().exits_observed, 2);
    }

    #[test]
    fn scripted_exit_count_matches() {
        let mut h = host();
        for i in 0..25u64 {
            h.schedule_exit(ExitSpec::plain(1_000 * (i + 1), 100));
        }
        h.advance_to(1_000_000);
        assert_eq!(h.poll_exit_flag().exits_observed, 25);
    }

    #[test]
    fn instruction_window_counts() {
        let mut h = host();
        let s1 = h.time_instruction_window(Duration::from_millis(1)).unwrap();
        let dev = (s1.ops_counted as f64 - 53_830.0).abs() / 53_830.0;
        assert!(dev <= 0.0005, "{}", s1.ops_counted);
        let s2 = h.time_instruction_window(Duration::from_millis(2)).unwrap();
        let dev = (s2.ops_counted as f64 - 107_660.0).abs() / 107_660.0;
        assert!(dev <= 0.0005, "{}", s2.ops_counted);
        assert_eq!(h.now(), 3_000_000);
    }

    #[test]
    fn instruction_window_interrupted() {
        let mut h = host();
        h.schedule_exit(ExitSpec::plain(500_000, 1_000));
        assert_eq!(
            h.time_instruction_window(Duration::from_millis(1)),
            Err(HostError::WindowInterrupted)
        );
        assert!(h.in_enclave());
        assert!(h.poll_exit_flag().tainted);
    }

    #[test]
    fn slowed_counter_stretches_window() {
        let mut h = host();
        h.schedule_exit(ExitSpec {
            counter_rate: Some(DriftRate::from_decimal("0.9").unwrap()),
            ..ExitSpec::plain(10, 10)
        });
        h.advance_to(100);
        let s = h.time_instruction_window(Duration::from_millis(2)).unwrap();
        // 2e6 ticks at 0.9 ticks/ns take 2.222 ms of real time.
        let expect = 53_830.0 * 2.0 / 0.9;
        assert!((s.ops_counted as f64 - expect).abs() / expect < 0.001);
    }

    #[test]
    fn background_exits_follow_model() {
        let cfg = SimHostConfig {
            exit_model: Some(ExitModel::trimodal()),
            ..SimHostConfig::default()
        };
        let mut h = SimHost::new(cfg, 11);
        h.advance_to(100_000_000_000);
        let epochs = h.take_finished_epochs();
        assert!(epochs.len() > 100);
        let long = epochs.iter().filter(|e| e.1 >= 1_500_000_000).count();
        let frac = long as f64 / epochs.len() as f64;
        assert!((0.2..0.4).contains(&frac), "{frac}");
        assert!(epochs.iter().all(|e| e.1 <= 1_580_000_000));
    }

    #[test]
    fn jitter_bounded() {
        let mut h = host();
        for _ in 0..10_000 {
            let s = h.time_instruction_window(Duration::from_millis(1)).unwrap();
            let dev = (s.ops_counted as f64 - 53_830.0).abs() / 53_830.0;
            assert!(dev <= 0.0005 + 1e-5);
        }
    }
}
