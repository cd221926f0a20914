//! Injectable time source. All run and provenance timestamps come from here.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Seconds since the Unix epoch.
pub type Timestamp = f64;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }
}

/// Deterministic clock: every reading advances by a fixed step of microseconds.
#[derive(Debug)]
pub struct ManualClock {
    start: f64,
    step_us: u64,
    ticks: AtomicU64,
}

impl ManualClock {
    pub fn new(start: f64, step_us: u64) -> Self {
        ManualClock { start, step_us, ticks: AtomicU64::new(0) }
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.start + (t * self.step_us) as f64 * 1e-6
    }
}
