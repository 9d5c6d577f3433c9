use std::hint::black_box;
use std::time::{Duration, Instant};

use super::{
    EnclaveHost, ExitFlag, HostCounterReading, HostError, InstructionTimingSample,
    MemoryTimingSample,
};
use crate::time::OffEnclaveInterval;

#[derive(Debug, Clone)]
pub struct RealHostConfig {
    /// A gap between two consecutive polls longer than this counts as an
    /// exit.
    pub watchdog_gap: Duration,
    /// Inside a timing window the loop checks the clock every few hundred
    /// nanoseconds; a longer gap means the thread was preempted and the
    /// window is void.
    pub window_gap: Duration,
    /// Size of the pointer-chasing buffer used for memory timing.
    pub memory_buffer_bytes: usize,
}

impl Default for RealHostConfig {
    fn default() -> Self {
        Self {
            watchdog_gap: Duration::from_millis(5),
            window_gap: Duration::from_micros(200),
            memory_buffer_bytes: 32 << 20,
        }
    }
}

/// Best-effort host for running on an ordinary machine.
///
/// The counter is the monotonic clock in nanoseconds. There is no access
/// to hardware exit notifications, so any gap between polls longer than
/// the watchdog limit is treated as one.
pub struct RealHost {
    cfg: RealHostConfig,
    start: Instant,
    last_poll: Instant,
    flag: ExitFlag,
    epoch_id: u64,
    off_accum: u64,
    chase: Vec<u32>,
}

impl RealHost {
    pub fn new(cfg: RealHostConfig) -> Self {
        let now = Instant::now();
        Self {
            cfg,
            start: now,
            last_poll: now,
            flag: ExitFlag::default(),
            epoch_id: 0,
            off_accum: 0,
            chase: Vec::new(),
        }
    }

    fn watchdog(&mut self) -> Instant {
        let now = Instant::now();
        let gap = now.duration_since(self.last_poll);
        if gap > self.cfg.watchdog_gap {
            self.note_exit(gap);
        }
        self.last_poll = now;
        now
    }

    fn note_exit(&mut self, gap: Duration) {
        self.flag.tainted = true;
        self.flag.exits_observed += 1;
        self.epoch_id += 1;
        self.off_accum = self.off_accum.saturating_add(gap.as_nanos() as u64);
    }

    /// Ends a timing window: records a preemption seen inside it as an
    /// exit, or any gap since the last poll.
    fn close_window(
        &mut self,
        exits: u64,
        target: Duration,
        window: Duration,
        longest: Duration,
    ) -> Result<(), HostError> {
        if longest > self.cfg.window_gap {
            self.note_exit(longest);
        }
        self.last_poll = Instant::now();
        if window > target + self.cfg.watchdog_gap || self.poll_exit_flag().exits_observed != exits
        {
            return Err(HostError::WindowInterrupted);
        }
        Ok(())
    }

    fn ticks(&self, at: Instant) -> u64 {
        at.duration_since(self.start).as_nanos() as u64
    }

    fn chase_buffer(&mut self) -> &[u32] {
        if self.chase.is_empty() {
            let n = (self.cfg.memory_buffer_bytes / 4).max(1024);
            // Single cycle through the buffer with a large odd stride so
            // consecutive loads land on different cache lines.
            let stride = (n / 2 + 4097) | 1;
            let mut buf = vec![0u32; n];
            let mut idx = 0usize;
            for _ in 0..n {
                let next = (idx + stride) % n;
                buf[idx] = next as u32;
                idx = next;
            }
            self.chase = buf;
        }
        &self.chase
    }
}

impl EnclaveHost for RealHost {
    fn read_counter(&mut self) -> HostCounterReading {
        let now = self.watchdog();
        HostCounterReading {
            ticks: self.ticks(now),
            epoch_id: self.epoch_id,
        }
    }

    fn poll_exit_flag(&mut self) -> ExitFlag {
        self.watchdog();
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
        let exits = self.poll_exit_flag().exits_observed;
        let begin = Instant::now();
        let mut last = begin;
        let mut longest = Duration::ZERO;
        let mut ops = 0u64;
        let mut acc = 0u64;
        loop {
            for i in 0..64u64 {
                acc = black_box(acc.wrapping_add(i));
            }
            ops += 64;
            let now = Instant::now();
            longest = longest.max(now - last);
            last = now;
            if now - begin >= target {
                break;
            }
        }
        black_box(acc);
        let window = last - begin;
        // The loop itself never yields, so a pause shows up as a gap.
        self.close_window(exits, target, window, longest)?;
        Ok(InstructionTimingSample {
            ops_counted: ops,
            window_ticks: window.as_nanos() as u64,
        })
    }

    fn time_memory_window(&mut self, target: Duration) -> Result<MemoryTimingSample, HostError> {
        let exits = self.poll_exit_flag().exits_observed;
        self.chase_buffer();
        let begin = Instant::now();
        let mut last = begin;
        let mut longest = Duration::ZERO;
        let mut idx = 0usize;
        let mut accesses = 0u64;
        loop {
            for _ in 0..32 {
                idx = black_box(self.chase[idx]) as usize;
            }
            accesses += 32;
            let now = Instant::now();
            longest = longest.max(now - last);
            last = now;
            if now - begin >= target {
                break;
            }
        }
        let window = last - begin;
        self.close_window(exits, target, window, longest)?;
        Ok(MemoryTimingSample {
            accesses,
            window_ticks: window.as_nanos() as u64,
        })
    }

    fn process_for(&mut self, _nanos: u64) {}

    fn trace_clock(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
    }
}
