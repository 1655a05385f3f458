//! Host-side counter pool over leased ranges.
//!
//! Counters are issued front-first, strictly increasing within each range.
//! Dropping below the low watermark triggers one refill request through the
//! caller-supplied lease callback; an in-flight flag keeps refills from
//! stacking. Counter value zero is never issued: an all-zero metadata block
//! marks an unwritten sector, so the stored IV of a written sector must be
//! nonzero.

use parking_lot::Mutex;
use sealstor_kbs::LeaseRange;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("counter pool exhausted ({remaining} units remain, {requested} requested)")]
    Exhausted { remaining: u64, requested: u64 },
}

/// Lease callback: request `units` more counters; `None` when the broker is
/// unreachable or drained.
pub type RefillFn<'a> = dyn FnMut(u64) -> Option<Vec<LeaseRange>> + 'a;

#[derive(Debug)]
struct PoolState {
    ranges: Vec<LeaseRange>,
    watermark: u64,
    refill_units: u64,
    refill_in_flight: bool,
    refills_requested: u64,
    issued: u64,
}

pub struct CounterPool {
    state: Mutex<PoolState>,
}

impl CounterPool {
    pub fn new(watermark: u64, refill_units: u64) -> Self {
        Self {
            state: Mutex::new(PoolState {
                ranges: Vec::new(),
                watermark,
                refill_units,
                refill_in_flight: false,
                refills_requested: 0,
                issued: 0,
            }),
        }
    }

    pub fn install(&self, ranges: Vec<LeaseRange>) {
        let mut state = self.state.lock();
        Self::install_locked(&mut state, ranges);
    }

    fn install_locked(state: &mut PoolState, ranges: Vec<LeaseRange>) {
        for mut range in ranges {
            // Counter 0 is the unwritten-sector sentinel; discard it.
            if range.start == 0 {
                range.start = 1;
            }
            if !range.is_empty() {
                state.ranges.push(range);
            }
        }
    }

    pub fn remaining(&self) -> u64 {
        self.state.lock().ranges.iter().map(LeaseRange::len).sum()
    }

    pub fn issued(&self) -> u64 {
        self.state.lock().issued
    }

    pub fn refills_requested(&self) -> u64 {
        self.state.lock().refills_requested
    }

    /// Take `count` fresh counters, all or nothing. Refills through
    /// `refill` when short or when the take crosses the watermark.
    pub fn take(&self, count: u64, refill: &mut RefillFn<'_>) -> Result<Vec<u64>, PoolError> {
        let mut state = self.state.lock();
        let available = |s: &PoolState| s.ranges.iter().map(LeaseRange::len).sum::<u64>();
        if available(&state) < count {
            Self::request_refill(&mut state, refill);
        }
        let remaining = available(&state);
        if remaining < count {
            return Err(PoolError::Exhausted {
                remaining,
                requested: count,
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        while (out.len() as u64) < count {
            let range = state.ranges.first_mut().expect("availability checked");
            out.push(range.start);
            range.start += 1;
            if range.is_empty() {
                state.ranges.remove(0);
            }
        }
        state.issued += count;
        if available(&state) < state.watermark && !state.refill_in_flight {
            Self::request_refill(&mut state, refill);
        }
        Ok(out)
    }

    fn request_refill(state: &mut PoolState, refill: &mut RefillFn<'_>) {
        if state.refill_in_flight {
            return;
        }
        state.refill_in_flight = true;
        state.refills_requested += 1;
        let granted = refill(state.refill_units);
        if let Some(ranges) = granted {
            Self::install_locked(state, ranges);
        }
        state.refill_in_flight = false;
    }

    /// Remove and return every unissued range, for returning leases on
    /// shutdown or eviction.
    pub fn drain_ranges(&self) -> Vec<LeaseRange> {
        let mut state = self.state.lock();
        std::mem::take(&mut state.ranges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_refill() -> Box<RefillFn<'static>> {
        Box::new(|_| None)
    }

    #[test]
    fn counters_increase_within_a_range() {
        let pool = CounterPool::new(0, 0);
        pool.install(vec![LeaseRange { start: 10, end: 20 }]);
        let got = pool.take(5, &mut *no_refill()).unwrap();
        assert_eq!(got, vec![10, 11, 12, 13, 14]);
        let got = pool.take(2, &mut *no_refill()).unwrap();
        assert_eq!(got, vec![15, 16]);
    }

    #[test]
    fn crossing_a_range_boundary_jumps_to_next_subrange() {
        let pool = CounterPool::new(0, 0);
        pool.install(vec![
            LeaseRange { start: 5, end: 8 },
            LeaseRange { start: 100, end: 103 },
        ]);
        let got = pool.take(5, &mut *no_refill()).unwrap();
        assert_eq!(got, vec![5, 6, 7, 100, 101]);
    }

    #[test]
    fn counter_zero_is_never_issued() {
        let pool = CounterPool::new(0, 0);
        pool.install(vec![LeaseRange { start: 0, end: 4 }]);
        assert_eq!(pool.remaining(), 3);
        let got = pool.take(3, &mut *no_refill()).unwrap();
        assert_eq!(got, vec![1, 2, 3]);
    }

    #[test]
    fn watermark_crossing_triggers_exactly_one_refill() {
        let pool = CounterPool::new(4, 16);
        pool.install(vec![LeaseRange { start: 1, end: 11 }]);
        let mut granted_from = 100u64;
        let mut refill = |units: u64| {
            let r = LeaseRange {
                start: granted_from,
                end: granted_from + units,
            };
            granted_from += units;
            Some(vec![r])
        };
        // 10 -> 3 remaining crosses the watermark; one refill tops it up.
        pool.take(7, &mut refill).unwrap();
        assert_eq!(pool.refills_requested(), 1);
        assert_eq!(pool.remaining(), 3 + 16);
        // Healthy pool: no further refill.
        pool.take(2, &mut refill).unwrap();
        assert_eq!(pool.refills_requested(), 1);
    }

    #[test]
    fn exhaustion_with_broker_down_is_atomic() {
        let pool = CounterPool::new(0, 64);
        pool.install(vec![LeaseRange { start: 1, end: 4 }]);
        let err = pool.take(5, &mut *no_refill()).unwrap_err();
        assert_eq!(
            err,
            PoolError::Exhausted {
                remaining: 3,
                requested: 5
            }
        );
        // Nothing was consumed by the failed take.
        assert_eq!(pool.take(3, &mut *no_refill()).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn drain_returns_unissued_tails() {
        let pool = CounterPool::new(0, 0);
        pool.install(vec![LeaseRange { start: 1, end: 10 }]);
        pool.take(4, &mut *no_refill()).unwrap();
        assert_eq!(pool.drain_ranges(), vec![LeaseRange { start: 5, end: 10 }]);
        assert_eq!(pool.remaining(), 0);
    }
}
