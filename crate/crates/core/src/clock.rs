//! Session clock: a monotonic clock anchored once to the wall-clock RTC.
//!
//! Every modality of a session reads the same `SessionClock`, so all
//! timestamps share one time axis. Readings are strictly increasing across
//! the whole session, with a 1 µs minimum step so they stay distinct after
//! conversion to epoch milliseconds.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

const MIN_STEP_NS: u64 = 1_000;

/// Current wall-clock time in epoch milliseconds.
pub fn wall_clock_ms() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64() * 1e3)
        .unwrap_or(0.0)
}

#[derive(Debug, Clone)]
pub struct SessionClock {
    anchor_epoch_ms: f64,
    origin: Instant,
    last_ns: Arc<AtomicU64>,
}

impl SessionClock {
    pub fn start() -> Self {
        let origin = Instant::now();
        SessionClock {
            anchor_epoch_ms: wall_clock_ms(),
            origin,
            last_ns: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Epoch milliseconds at the anchor instant.
    pub fn anchor_epoch_ms(&self) -> f64 {
        self.anchor_epoch_ms
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    /// Strictly increasing reading, nanoseconds since the anchor.
    fn tick_ns(&self) -> u64 {
        let raw = self.origin.elapsed().as_nanos() as u64;
        let mut prev = self.last_ns.load(Ordering::Relaxed);
        loop {
            let next = raw.max(prev + MIN_STEP_NS);
            match self
                .last_ns
                .compare_exchange_weak(prev, next, Ordering::AcqRel, Ordering::Relaxed)
            {
                Ok(_) => return next,
                Err(p) => prev = p,
            }
        }
    }

    /// Timestamp in epoch milliseconds.
    pub fn now_ms(&self) -> f64 {
        self.anchor_epoch_ms + self.tick_ns() as f64 / 1e6
    }

    /// Elapsed time since the anchor without consuming a timestamp.
    pub fn elapsed(&self) -> Duration {
        self.origin.elapsed()
    }

    /// Wait until `deadline`: coarse sleep to within `spin_margin`, then
    /// yield-spin. Returns early with `false` if `stop` becomes true.
    pub fn wait_until(&self, deadline: Instant, spin_margin: Duration, stop: &dyn Fn() -> bool) -> bool {
        loop {
            if stop() {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return true;
            }
            let remaining = deadline - now;
            if remaining > spin_margin {
                // Sleep in bounded slices so stop requests are observed.
                let slice = (remaining - spin_margin).min(Duration::from_millis(50));
                std::thread::sleep(slice);
            } else {
                std::thread::yield_now();
            }
        }
    }
}
