//! Clock abstraction so rate limiting, retry backoff, and call-log
//! timestamps are testable and fully deterministic in offline mode.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Milliseconds since this clock's epoch.
    fn now_ms(&self) -> u64;

    /// Blocks (or virtually advances) for the given duration.
    fn sleep_ms(&self, ms: u64);

    /// Marks one unit of logical progress. Wall clocks ignore this; the
    /// virtual clock advances 1 ms so consecutive events get distinct,
    /// reproducible timestamps.
    fn tick(&self) {}
}

/// Wall-clock time; used for live endpoints.
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

/// Virtual clock: sleeping advances time instantly. Offline runs use this
/// so every timestamp is a pure function of the call sequence.
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: AtomicU64::new(start_ms),
        }
    }

    /// Advances the clock without sleeping semantics.
    pub fn advance_ms(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_ms(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }

    fn tick(&self) {
        self.now.fetch_add(1, Ordering::SeqCst);
    }
}

pub type SharedClock = Arc<dyn Clock>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_advances_on_sleep() {
        let clock = VirtualClock::new(100);
        assert_eq!(clock.now_ms(), 100);
        clock.sleep_ms(250);
        assert_eq!(clock.now_ms(), 350);
        clock.advance_ms(1);
        assert_eq!(clock.now_ms(), 351);
    }
}
