//! Time source abstraction so rate limiting and retry backoff can run
//! against virtual time in tests.

use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Monotonic milliseconds plus the ability to wait.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep_ms(&self, ms: u64);
}

/// Real time: milliseconds since clock construction, real sleeping.
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

/// Test clock: sleeping advances time instantly.
pub struct VirtualClock {
    now: Mutex<u64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock { now: Mutex::new(0) }
    }

    /// Moves time forward without a sleeper.
    pub fn advance_ms(&self, ms: u64) {
        *self.now.lock().unwrap() += ms;
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        *self.now.lock().unwrap()
    }

    fn sleep_ms(&self, ms: u64) {
        *self.now.lock().unwrap() += ms;
    }
}
