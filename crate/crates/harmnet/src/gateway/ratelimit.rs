//! Sliding-minute rate limiter, one per endpoint.

use std::collections::VecDeque;
use std::sync::Mutex;

use crate::gateway::clock::SharedClock;

const WINDOW_MS: u64 = 60_000;

/// Admits at most `limit` calls per sliding 60-second window, blocking the
/// caller (via the injected clock) until a slot frees up.
pub struct RateLimiter {
    limit: u32,
    grants: Mutex<VecDeque<u64>>,
}

impl RateLimiter {
    pub fn new(limit: u32) -> Self {
        Self {
            limit: limit.max(1),
            grants: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks until a call slot is available, then records the grant.
    /// Returns the grant timestamp.
    pub fn acquire(&self, clock: &SharedClock) -> u64 {
        loop {
            let mut grants = self.grants.lock().unwrap();
            let now = clock.now_ms();
            while let Some(&oldest) = grants.front() {
                if now.saturating_sub(oldest) >= WINDOW_MS {
                    grants.pop_front();
                } else {
                    break;
                }
            }
            if (grants.len() as u32) < self.limit {
                grants.push_back(now);
                return now;
            }
            // Window full: wait until the oldest grant leaves the window.
            let oldest = *grants.front().expect("window full implies non-empty");
            let wait = (oldest + WINDOW_MS).saturating_sub(now).max(1);
            drop(grants);
            clock.sleep_ms(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::clock::VirtualClock;
    use std::sync::Arc;

    #[test]
    fn never_exceeds_limit_in_any_sliding_window() {
        let clock: SharedClock = Arc::new(VirtualClock::new(0));
        let limiter = RateLimiter::new(3);
        let mut stamps = Vec::new();
        for _ in 0..10 {
            stamps.push(limiter.acquire(&clock));
        }
        for (i, &t) in stamps.iter().enumerate() {
            let in_window = stamps[i..]
                .iter()
                .take_while(|&&u| u - t < WINDOW_MS)
                .count();
            assert!(in_window <= 3, "window starting at {t} holds {in_window} calls");
        }
        // 10 calls at 3/min need to span at least three full windows.
        assert!(stamps[9] - stamps[0] >= 3 * WINDOW_MS);
    }

    #[test]
    fn burst_below_limit_does_not_block() {
        let clock: SharedClock = Arc::new(VirtualClock::new(5));
        let limiter = RateLimiter::new(10);
        for _ in 0..10 {
            limiter.acquire(&clock);
        }
        assert_eq!(clock.now_ms(), 5);
    }
}
