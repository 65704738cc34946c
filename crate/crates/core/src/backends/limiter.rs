//! Sliding-window rate limiter shared by all requests to one backend.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use super::clock::Clock;

const WINDOW_MS: u64 = 60_000;

/// Grants at most `limit` acquisitions per sliding 60-second window,
/// blocking (via the clock) until a slot frees up.
pub struct RateLimiter {
    limit: u32,
    grants: Mutex<VecDeque<u64>>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(limit_per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        assert!(limit_per_minute > 0, "rate limit must be positive");
        RateLimiter {
            limit: limit_per_minute,
            grants: Mutex::new(VecDeque::new()),
            clock,
        }
    }

    /// Blocks until a slot is available and returns the grant timestamp.
    pub fn acquire(&self) -> u64 {
        loop {
            let wait = {
                let now = self.clock.now_ms();
                let mut grants = self.grants.lock().unwrap();
                while grants.front().is_some_and(|&t| t + WINDOW_MS <= now) {
                    grants.pop_front();
                }
                if (grants.len() as u32) < self.limit {
                    grants.push_back(now);
                    return now;
                }
                grants.front().unwrap() + WINDOW_MS - now
            };
            // Sleep outside the lock so other threads can expire grants.
            self.clock.sleep_ms(wait.max(1));
        }
    }
}
