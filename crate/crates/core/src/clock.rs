//! Monotonic service time.
//!
//! Every timestamp in the system is a [`Timestamp`]: seconds of service time
//! since the clock's origin. Production code uses [`SystemClock`]; tests use
//! [`ManualClock`] and move time explicitly.

use std::fmt;
use std::ops::{Add, Sub};
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0.0);

    pub fn seconds(self) -> f64 {
        self.0
    }
}

impl Add<f64> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: f64) -> Timestamp {
        Timestamp(self.0 + rhs)
    }
}

impl Sub for Timestamp {
    type Output = f64;
    fn sub(self, rhs: Timestamp) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> Timestamp;
}

pub type SharedClock = Arc<dyn Clock>;

/// Wall clock scaled by `speed` (1.0 = real time).
#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
    speed: f64,
    offset: f64,
}

impl SystemClock {
    pub fn new(speed: f64) -> Self {
        Self::starting_at(Timestamp::ZERO, speed)
    }

    /// Resumes service time from `start`, e.g. after a restart.
    pub fn starting_at(start: Timestamp, speed: f64) -> Self {
        SystemClock {
            origin: Instant::now(),
            speed,
            offset: start.0,
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.offset + self.origin.elapsed().as_secs_f64() * self.speed)
    }
}

/// Clock that only moves when told to. Never goes backwards.
#[derive(Debug, Default)]
pub struct ManualClock {
    bits: AtomicU64,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock {
            bits: AtomicU64::new(start.0.to_bits()),
        }
    }

    pub fn shared(start: Timestamp) -> Arc<ManualClock> {
        Arc::new(Self::new(start))
    }

    /// Sets the time; earlier values than the current one are ignored.
    pub fn set(&self, t: Timestamp) {
        let mut cur = self.bits.load(Ordering::SeqCst);
        loop {
            if f64::from_bits(cur) >= t.0 {
                return;
            }
            match self
                .bits
                .compare_exchange(cur, t.0.to_bits(), Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn advance(&self, seconds: f64) -> Timestamp {
        let t = self.now() + seconds;
        self.set(t);
        self.now()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(f64::from_bits(self.bits.load(Ordering::SeqCst)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_is_monotone() {
        let c = ManualClock::new(Timestamp(5.0));
        c.set(Timestamp(3.0));
        assert_eq!(c.now(), Timestamp(5.0));
        c.advance(1.5);
        assert_eq!(c.now(), Timestamp(6.5));
    }

    #[test]
    fn system_clock_speed() {
        let c = SystemClock::starting_at(Timestamp(100.0), 1000.0);
        let a = c.now();
        std::thread::sleep(std::time::Duration::from_millis(5));
        assert!(c.now() - a >= 4.0);
        assert!(a.0 >= 100.0);
    }
}
