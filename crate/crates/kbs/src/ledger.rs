//! Per-device counter ledger: a free list of disjoint, sorted, non-adjacent
//! ranges plus the outstanding ranges per lessee. Free and outstanding
//! always partition the counter space, and returned ranges are merged with
//! their neighbours (compaction).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Counters are 58-bit values; a fresh device ledger spans `[0, 2^58)`.
pub const COUNTER_SPACE_END: u64 = 1 << 58;
/// Default lease size: 1 TB of 4096-byte sector writes, one counter each.
pub const LEASE_UNITS_1TB: u64 = (1 << 40) / 4096;

/// Half-open leased counter range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseRange {
    pub start: u64,
    pub end: u64,
}

impl LeaseRange {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("lease of {requested} units exceeds {free} free counters")]
    Exhausted { requested: u64, free: u64 },
    #[error("range [{start}, {end}) is not outstanding for this lessee")]
    NotOwned { start: u64, end: u64 },
    #[error("invalid range [{start}, {end})")]
    InvalidRange { start: u64, end: u64 },
}

/// Counter ledger for one device.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceLedger {
    space_end: u64,
    /// start -> end, disjoint, never adjacent.
    free: BTreeMap<u64, u64>,
    /// lessee -> sorted disjoint ranges.
    outstanding: BTreeMap<String, Vec<LeaseRange>>,
}

impl DeviceLedger {
    /// Fresh ledger with the full `[0, 2^58)` range free.
    pub fn new() -> Self {
        Self::with_space(COUNTER_SPACE_END)
    }

    /// Ledger over a smaller counter space, for desk-scale tests.
    pub fn with_space(space_end: u64) -> Self {
        let mut free = BTreeMap::new();
        free.insert(0, space_end);
        Self {
            space_end,
            free,
            outstanding: BTreeMap::new(),
        }
    }

    pub fn space_end(&self) -> u64 {
        self.space_end
    }

    pub fn free_units(&self) -> u64 {
        self.free.iter().map(|(s, e)| e - s).sum()
    }

    pub fn outstanding_units(&self) -> u64 {
        self.outstanding
            .values()
            .flat_map(|ranges| ranges.iter())
            .map(LeaseRange::len)
            .sum()
    }

    pub fn free_ranges(&self) -> Vec<LeaseRange> {
        self.free
            .iter()
            .map(|(&start, &end)| LeaseRange { start, end })
            .collect()
    }

    pub fn outstanding_for(&self, lessee: &str) -> &[LeaseRange] {
        self.outstanding.get(lessee).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Lease `units` counters, draining free ranges front-first. Smaller
    /// subranges may be combined to reach the total.
    pub fn lease(&mut self, lessee: &str, units: u64) -> Result<Vec<LeaseRange>, LedgerError> {
        let free = self.free_units();
        if units > free {
            return Err(LedgerError::Exhausted {
                requested: units,
                free,
            });
        }
        let mut granted = Vec::new();
        let mut remaining = units;
        while remaining > 0 {
            let (&start, &end) = self.free.iter().next().expect("free units accounted");
            let take = remaining.min(end - start);
            self.free.remove(&start);
            if start + take < end {
                self.free.insert(start + take, end);
            }
            granted.push(LeaseRange {
                start,
                end: start + take,
            });
            remaining -= take;
        }
        if !granted.is_empty() {
            let entry = self.outstanding.entry(lessee.to_string()).or_default();
            entry.extend(granted.iter().copied());
            entry.sort_by_key(|r| r.start);
            // Coalesce adjacent holdings so subrange returns may span them.
            let mut merged: Vec<LeaseRange> = Vec::with_capacity(entry.len());
            for r in entry.drain(..) {
                match merged.last_mut() {
                    Some(last) if last.end == r.start => last.end = r.end,
                    _ => merged.push(r),
                }
            }
            *entry = merged;
        }
        debug_assert!(self.validate().is_ok());
        Ok(granted)
    }

    /// Return ranges (or subranges) previously leased by this lessee.
    pub fn give_back(&mut self, lessee: &str, ranges: &[LeaseRange]) -> Result<(), LedgerError> {
        for range in ranges {
            if range.start >= range.end || range.end > self.space_end {
                return Err(LedgerError::InvalidRange {
                    start: range.start,
                    end: range.end,
                });
            }
        }
        // Validate ownership of every returned range before mutating.
        {
            let owned = self.outstanding.get(lessee).map(Vec::as_slice).unwrap_or(&[]);
            for range in ranges {
                let covered = owned
                    .iter()
                    .any(|o| o.start <= range.start && range.end <= o.end);
                if !covered {
                    return Err(LedgerError::NotOwned {
                        start: range.start,
                        end: range.end,
                    });
                }
            }
            // Reject overlapping returns within one call (double return).
            let mut sorted: Vec<_> = ranges.to_vec();
            sorted.sort_by_key(|r| r.start);
            for pair in sorted.windows(2) {
                if pair[1].start < pair[0].end {
                    return Err(LedgerError::InvalidRange {
                        start: pair[1].start,
                        end: pair[1].end,
                    });
                }
            }
        }
        let owned = self.outstanding.get_mut(lessee).expect("ownership checked");
        for range in ranges {
            let idx = owned
                .iter()
                .position(|o| o.start <= range.start && range.end <= o.end)
                .expect("ownership checked");
            let outer = owned.remove(idx);
            if outer.start < range.start {
                owned.insert(
                    idx,
                    LeaseRange {
                        start: outer.start,
                        end: range.start,
                    },
                );
            }
            if range.end < outer.end {
                let at = owned
                    .iter()
                    .position(|o| o.start > range.end)
                    .unwrap_or(owned.len());
                owned.insert(
                    at,
                    LeaseRange {
                        start: range.end,
                        end: outer.end,
                    },
                );
            }
            Self::insert_free(&mut self.free, range.start, range.end);
        }
        if owned.is_empty() {
            self.outstanding.remove(lessee);
        }
        debug_assert!(self.validate().is_ok());
        Ok(())
    }

    fn insert_free(free: &mut BTreeMap<u64, u64>, mut start: u64, mut end: u64) {
        // Merge with the predecessor if adjacent.
        if let Some((&ps, &pe)) = free.range(..=start).next_back() {
            debug_assert!(pe <= start, "free overlap");
            if pe == start {
                free.remove(&ps);
                start = ps;
            }
        }
        // Merge with the successor if adjacent.
        if let Some((&ns, &ne)) = free.range(start..).next() {
            debug_assert!(ns >= end, "free overlap");
            if ns == end {
                free.remove(&ns);
                end = ne;
            }
        }
        free.insert(start, end);
    }

    /// Structural invariants: disjoint sorted compacted free list, disjoint
    /// outstanding ranges, and conservation of the counter space.
    pub fn validate(&self) -> Result<(), String> {
        let mut prev_end = None;
        for (&start, &end) in &self.free {
            if start >= end || end > self.space_end {
                return Err(format!("bad free range [{start}, {end})"));
            }
            if let Some(prev) = prev_end {
                if start < prev {
                    return Err("free ranges overlap".into());
                }
                if start == prev {
                    return Err(format!("free ranges adjacent at {start}"));
                }
            }
            prev_end = Some(end);
        }
        let mut all: Vec<LeaseRange> = self.free_ranges();
        for ranges in self.outstanding.values() {
            for r in ranges {
                if r.start >= r.end || r.end > self.space_end {
                    return Err(format!("bad outstanding range [{}, {})", r.start, r.end));
                }
                all.push(*r);
            }
        }
        all.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for r in &all {
            if r.start != cursor {
                return Err(format!(
                    "coverage gap or overlap at {cursor} (next range starts {})",
                    r.start
                ));
            }
            cursor = r.end;
        }
        if cursor != self.space_end {
            return Err(format!("space ends at {cursor}, expected {}", self.space_end));
        }
        Ok(())
    }
}

impl Default for DeviceLedger {
    fn default() -> Self {
        Self::new()
    }
}
