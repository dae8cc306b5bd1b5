//! Discrete-event clock shared by the fabric and the task executor.
//!
//! Time is integer nanoseconds. Events with the same fire time are delivered
//! in insertion order, which keeps every run bit-for-bit reproducible.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Simulated time in nanoseconds since the start of the run.
pub type Nanos = u64;

pub const NS_PER_US: Nanos = 1_000;
pub const NS_PER_MS: Nanos = 1_000_000;
pub const NS_PER_S: Nanos = 1_000_000_000;

/// Handle returned by [`SimClock::schedule`]; lets the caller cancel the event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle {
    fire_at: Nanos,
    seq: u64,
}

impl EventHandle {
    pub fn fire_at(&self) -> Nanos {
        self.fire_at
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event budget of {budget} exhausted at t={now}ns (runaway event loop)")]
    BudgetExhausted { budget: u64, now: Nanos },
}

/// Ordered pending-event queue plus the current time.
pub struct SimClock<E> {
    now: Nanos,
    next_seq: u64,
    pending: BTreeMap<(Nanos, u64), E>,
    fired: u64,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> fmt::Debug for SimClock<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimClock")
            .field("now", &self.now)
            .field("pending", &self.pending.len())
            .field("fired", &self.fired)
            .finish()
    }
}

impl<E> SimClock<E> {
    pub fn new() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            pending: BTreeMap::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Number of events popped so far.
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn schedule(&mut self, delay: Nanos, event: E) -> EventHandle {
        self.schedule_at(self.now + delay, event)
    }

    /// Schedules at an absolute time; times in the past are clamped to `now`.
    pub fn schedule_at(&mut self, at: Nanos, event: E) -> EventHandle {
        let fire_at = at.max(self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert((fire_at, seq), event);
        EventHandle { fire_at, seq }
    }

    /// Removes a not-yet-fired event. Returns it if it was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> Option<E> {
        self.pending.remove(&(handle.fire_at, handle.seq))
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.pending.keys().next().map(|&(t, _)| t)
    }

    /// Pops the earliest event and advances `now` to its fire time.
    pub fn pop(&mut self) -> Option<(Nanos, E)> {
        let ((t, _), e) = self.pending.pop_first()?;
        debug_assert!(t >= self.now);
        self.now = t;
        self.fired += 1;
        Some((t, e))
    }

    /// Moves the clock forward without firing anything. Never moves backwards.
    pub fn advance_to(&mut self, t: Nanos) {
        assert!(t >= self.now, "clock moved backwards: {} -> {}", self.now, t);
        if let Some(head) = self.peek_time() {
            assert!(t <= head, "advance_to({t}) would skip a pending event at {head}");
        }
        self.now = t;
    }

    /// Processes every event in time order. `handler` may schedule more events.
    pub fn run_until_idle<F>(&mut self, budget: u64, mut handler: F) -> Result<Nanos, SimError>
    where
        F: FnMut(&mut Self, E),
    {
        let mut processed = 0u64;
        while let Some((_, e)) = self.pop() {
            processed += 1;
            if processed > budget {
                return Err(SimError::BudgetExhausted {
                    budget,
                    now: self.now,
                });
            }
            handler(self, e);
        }
        Ok(self.now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collect(clock: &mut SimClock<&'static str>) -> Vec<(Nanos, &'static str)> {
        let mut out = Vec::new();
        while let Some(x) = clock.pop() {
            out.push(x);
        }
        out
    }

    #[test]
    fn zero_delay_fires_now() {
        let mut c = SimClock::new();
        c.schedule(0, "e");
        assert_eq!(collect(&mut c), vec![(0, "e")]);
    }

    #[test]
    fn ties_fire_in_insertion_order() {
        let mut c = SimClock::new();
        c.schedule(5, "a");
        c.schedule(5, "b");
        assert_eq!(collect(&mut c), vec![(5, "a"), (5, "b")]);
    }

    #[test]
    fn earlier_fires_first() {
        let mut c = SimClock::new();
        c.schedule(10, "a");
        c.schedule(3, "b");
        assert_eq!(collect(&mut c), vec![(3, "b"), (10, "a")]);
    }

    #[test]
    fn empty_run_returns_zero() {
        let mut c: SimClock<()> = SimClock::new();
        assert_eq!(c.run_until_idle(10, |_, _| {}), Ok(0));
    }

    #[test]
    fn run_returns_last_time() {
        let mut c = SimClock::new();
        c.schedule(3, ());
        c.schedule(10, ());
        assert_eq!(c.run_until_idle(10, |_, _| {}), Ok(10));
    }

    #[test]
    fn chain_of_100() {
        let mut c = SimClock::new();
        c.schedule(0, 0u32);
        let end = c
            .run_until_idle(1_000, |clk, depth| {
                if depth < 100 {
                    clk.schedule(1, depth + 1);
                }
            })
            .unwrap();
        assert_eq!(end, 100);
    }

    #[test]
    fn runaway_is_detected() {
        let mut c = SimClock::new();
        c.schedule(0, ());
        let err = c
            .run_until_idle(50, |clk, _| {
                clk.schedule(1, ());
            })
            .unwrap_err();
        assert!(matches!(err, SimError::BudgetExhausted { budget: 50, .. }));
    }

    #[test]
    fn cancel_removes_event() {
        let mut c = SimClock::new();
        let h = c.schedule(4, "x");
        c.schedule(5, "y");
        assert_eq!(c.cancel(h), Some("x"));
        assert_eq!(c.cancel(h), None);
        assert_eq!(collect(&mut c), vec![(5, "y")]);
    }

    #[test]
    fn past_schedule_is_clamped() {
        let mut c = SimClock::new();
        c.schedule(10, "a");
        c.pop();
        c.schedule_at(2, "late");
        assert_eq!(c.pop(), Some((10, "late")));
    }

    proptest::proptest! {
        #[test]
        fn time_never_decreases(delays in proptest::collection::vec(0u64..1000, 1..200)) {
            let mut c = SimClock::new();
            for (i, d) in delays.iter().enumerate() {
                c.schedule(*d, i);
            }
            let mut last = 0;
            let mut seen_at: Vec<(Nanos, usize)> = Vec::new();
            while let Some((t, i)) = c.pop() {
                proptest::prop_assert!(t >= last);
                last = t;
                seen_at.push((t, i));
            }
            // equal times keep insertion order
            for w in seen_at.windows(2) {
                if w[0].0 == w[1].0 {
                    proptest::prop_assert!(w[0].1 < w[1].1);
                }
            }
        }
    }
}
