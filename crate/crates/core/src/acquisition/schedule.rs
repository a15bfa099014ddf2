//! Absolute tick schedules. Deadlines are `t0 + k * interval`, never
//! accumulated from the previous tick, so lateness does not drift.

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickSchedule {
    pub t0: Instant,
    pub interval: Duration,
    pub n_ticks: u64,
}

/// `floor(duration / interval)` ticks starting at `t0`.
pub fn build_tick_schedule(t0: Instant, interval: Duration, duration: Duration) -> TickSchedule {
    let n_ticks = if interval.is_zero() {
        0
    } else {
        (duration.as_nanos() / interval.as_nanos()) as u64
    };
    TickSchedule { t0, interval, n_ticks }
}

impl TickSchedule {
    pub fn deadline(&self, k: u64) -> Instant {
        self.t0 + self.offset(k)
    }

    pub fn offset(&self, k: u64) -> Duration {
        Duration::from_nanos((self.interval.as_nanos() * k as u128) as u64)
    }

    /// First tick index `>= from` whose deadline is not before `now`.
    /// May return `n_ticks` when none remain.
    pub fn next_due(&self, from: u64, now: Instant) -> u64 {
        if from >= self.n_ticks {
            return self.n_ticks;
        }
        if self.deadline(from) >= now {
            return from;
        }
        let late = now.duration_since(self.t0).as_nanos();
        let k = late.div_ceil(self.interval.as_nanos()) as u64;
        k.max(from).min(self.n_ticks)
    }
}
