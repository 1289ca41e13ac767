//! Virtual time. Everything in the simulator is an integer number of
//! nanoseconds from simulation start, so all configured durations (22 ns
//! checks, 200 µs thresholds, 10 ms budgets) are representable exactly.

pub type Nanos = u64;

pub const NANOS_PER_MICRO: Nanos = 1_000;
pub const NANOS_PER_MILLI: Nanos = 1_000_000;
pub const NANOS_PER_SEC: Nanos = 1_000_000_000;

/// Monotonic virtual clock. Only the engine advances it.
#[derive(Debug, Clone, Copy, Default)]
pub struct VirtualClock {
    now: Nanos,
}

impl VirtualClock {
    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Advance to `t`. Never moves backwards.
    pub(crate) fn advance_to(&mut self, t: Nanos) {
        debug_assert!(t >= self.now, "clock must be monotone: {} -> {}", self.now, t);
        if t > self.now {
            self.now = t;
        }
    }
}
