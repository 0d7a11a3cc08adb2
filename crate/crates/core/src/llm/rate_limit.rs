use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

/// Blocking token bucket shared by every worker of a live client.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    /// `rate` tokens per second, bursting up to `capacity`. The bucket starts full.
    pub fn new(rate: f64, capacity: f64) -> Self {
        assert!(rate > 0.0 && capacity >= 1.0, "invalid token bucket parameters");
        TokenBucket {
            rate,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn per_second(rate: f64) -> Self {
        Self::new(rate, 1.0)
    }

    /// Takes one token, sleeping until it is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let (tokens, last) = *state;
                let refilled = (tokens + now.duration_since(last).as_secs_f64() * self.rate).min(self.capacity);
                if refilled >= 1.0 {
                    *state = (refilled - 1.0, now);
                    return;
                }
                *state = (refilled, now);
                Duration::from_secs_f64((1.0 - refilled) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}
