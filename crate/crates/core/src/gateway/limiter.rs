//! Token-bucket request throttle.

use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<Bucket>,
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

impl RateLimiter {
    /// Allows `rpm` requests per minute, with bursts up to `rpm`.
    pub fn per_minute(rpm: u32) -> Self {
        let rpm = rpm.max(1) as f64;
        Self {
            capacity: rpm,
            refill_per_sec: rpm / 60.0,
            state: Mutex::new(Bucket {
                tokens: rpm,
                last: Instant::now(),
            }),
        }
    }

    /// Takes a token without waiting; returns the wait needed otherwise.
    pub fn try_acquire(&self) -> Result<(), Duration> {
        let mut bucket = self.state.lock().unwrap();
        let now = Instant::now();
        let elapsed = now.duration_since(bucket.last).as_secs_f64();
        bucket.tokens = (bucket.tokens + elapsed * self.refill_per_sec).min(self.capacity);
        bucket.last = now;
        if bucket.tokens >= 1.0 {
            bucket.tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - bucket.tokens) / self.refill_per_sec))
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire() {
            std::thread::sleep(wait);
        }
    }
}
