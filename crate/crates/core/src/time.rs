//! Time is carried as integer nanoseconds so that virtual schedules are exact
//! and sums of stage durations never drift.

use std::time::Instant;

/// Nanoseconds, either a duration or a point on some [`Clock`].
pub type Nanos = u64;

pub const NANOS_PER_MS: u64 = 1_000_000;
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Rounds milliseconds to the nearest nanosecond.
pub fn ms(ms: f64) -> Nanos {
    (ms * NANOS_PER_MS as f64).round().max(0.0) as Nanos
}

pub fn secs(s: f64) -> Nanos {
    (s * NANOS_PER_SEC as f64).round().max(0.0) as Nanos
}

pub fn to_ms(ns: Nanos) -> f64 {
    ns as f64 / NANOS_PER_MS as f64
}

pub fn to_secs(ns: Nanos) -> f64 {
    ns as f64 / NANOS_PER_SEC as f64
}

/// Source of "now" for worker and controller logic.
pub trait Clock {
    fn now(&self) -> Nanos;
}

/// Clock that only moves when told to.
#[derive(Debug, Default, Clone)]
pub struct VirtualClock {
    now: Nanos,
}

impl VirtualClock {
    pub fn new(start: Nanos) -> Self {
        Self { now: start }
    }

    /// Moves the clock forward; never backward.
    pub fn advance_to(&mut self, t: Nanos) {
        assert!(t >= self.now, "virtual clock moved backward: {} -> {t}", self.now);
        self.now = t;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Nanos {
        self.now
    }
}

/// Monotonic wall clock measured from process-local origin.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for WallClock {
    fn now(&self) -> Nanos {
        self.origin.elapsed().as_nanos() as Nanos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ms_round_trip_is_exact_for_calibration_values() {
        assert_eq!(ms(0.97), 970_000);
        assert_eq!(ms(6.5), 6_500_000);
        assert_eq!(to_ms(6_500_000 + 970_000), 7.47);
    }

    #[test]
    #[should_panic(expected = "backward")]
    fn virtual_clock_is_monotone() {
        let mut c = VirtualClock::new(10);
        c.advance_to(5);
    }
}
