//! Sliding-window anti-replay acceptance with duplicate suppression.
//!
//! Counters at most `T - 1` behind the maximum seen are accepted once; a
//! bitmap remembers which of those positions were already used, so a value
//! is never accepted twice. Everything at distance `T` or more is rejected
//! outright, as is anything below the session's start counter.

const WORD_BITS: u64 = 64;

#[derive(Debug, Clone)]
pub struct ReplayWindow {
    floor: u64,
    size: u64,
    max_seen: Option<u64>,
    /// Bit `d` set means `max_seen - d` was accepted.
    bitmap: Vec<u64>,
}

impl ReplayWindow {
    /// Window starting at the session's random start counter.
    pub fn new(start: u64, size: u32) -> Self {
        assert!(size > 0);
        let words = (size as u64).div_ceil(WORD_BITS) as usize;
        Self {
            floor: start,
            size: size as u64,
            max_seen: None,
            bitmap: vec![0; words],
        }
    }

    pub fn max_seen(&self) -> Option<u64> {
        self.max_seen
    }

    /// Accept `value` exactly once; rejection leaves the state unchanged.
    pub fn accept(&mut self, value: u64) -> bool {
        if value < self.floor {
            return false;
        }
        let Some(max) = self.max_seen else {
            self.max_seen = Some(value);
            self.bitmap[0] = 1;
            return true;
        };
        if value > max {
            self.shift_up(value - max);
            self.max_seen = Some(value);
            self.bitmap[0] |= 1;
            return true;
        }
        let distance = max - value;
        if distance >= self.size {
            return false;
        }
        let word = (distance / WORD_BITS) as usize;
        let bit = 1u64 << (distance % WORD_BITS);
        if self.bitmap[word] & bit != 0 {
            return false;
        }
        self.bitmap[word] |= bit;
        true
    }

    /// All-or-nothing batch acceptance: either every value is fresh and all
    /// are marked, or the state is unchanged.
    pub fn accept_batch(&mut self, values: &[u64]) -> bool {
        let saved = self.clone();
        for &v in values {
            if !self.accept(v) {
                *self = saved;
                return false;
            }
        }
        true
    }

    fn shift_up(&mut self, by: u64) {
        if by >= self.size {
            self.bitmap.fill(0);
            return;
        }
        let word_shift = (by / WORD_BITS) as usize;
        let bit_shift = (by % WORD_BITS) as u32;
        let len = self.bitmap.len();
        for i in (0..len).rev() {
            let mut v = if i >= word_shift {
                self.bitmap[i - word_shift] << bit_shift
            } else {
                0
            };
            if bit_shift > 0 && i > word_shift {
                v |= self.bitmap[i - word_shift - 1] >> (WORD_BITS as u32 - bit_shift);
            }
            self.bitmap[i] = v;
        }
        // Positions at or beyond the window size are meaningless; keep them
        // clear so clones compare cleanly.
        let top_bits = self.size % WORD_BITS;
        if top_bits != 0 {
            let last = (self.size / WORD_BITS) as usize;
            for w in self.bitmap.iter_mut().skip(last + 1) {
                *w = 0;
            }
            if let Some(word) = self.bitmap.get_mut(last) {
                *word &= (1u64 << top_bits) - 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    #[test]
    fn monotone_advance_is_accepted() {
        let mut w = ReplayWindow::new(100, 16);
        assert!(w.accept(100));
        assert!(w.accept(101));
        assert!(w.accept(150));
        assert_eq!(w.max_seen(), Some(150));
    }

    #[test]
    fn duplicates_are_rejected() {
        let mut w = ReplayWindow::new(0, 16);
        assert!(w.accept(5));
        assert!(!w.accept(5));
        assert!(w.accept(3));
        assert!(!w.accept(3));
        assert!(w.accept(6));
        assert!(!w.accept(5));
    }

    #[test]
    fn boundary_behaviour_matches_window_size() {
        let t = 1024u64;
        let mut w = ReplayWindow::new(0, t as u32);
        assert!(w.accept(5000));
        // Distance T is out, distance T-1 (unseen) is in.
        assert!(!w.accept(5000 - t));
        assert!(w.accept(5000 - (t - 1)));
        assert!(!w.accept(5000 - (t - 1)));
    }

    #[test]
    fn below_floor_is_rejected() {
        let mut w = ReplayWindow::new(1000, 64);
        assert!(!w.accept(999));
        assert!(w.accept(1000));
    }

    #[test]
    fn batch_is_all_or_nothing() {
        let mut w = ReplayWindow::new(0, 64);
        assert!(w.accept_batch(&[1, 2, 3]));
        // 4 is fresh but 2 is a duplicate; nothing may change.
        assert!(!w.accept_batch(&[4, 2]));
        assert!(w.accept(4));
    }

    /// Brute-force oracle: a seen-set plus the max, with the same window
    /// rule, over randomized counters.
    #[test]
    fn randomized_counters_match_seen_set_oracle() {
        let t = 1024u64;
        let floor = 500u64;
        let mut w = ReplayWindow::new(floor, t as u32);
        let mut seen: HashSet<u64> = HashSet::new();
        let mut max: Option<u64> = None;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut cursor = floor;
        for step in 0..100_000u64 {
            // Mix forward progress with stragglers around the window edge.
            let value = match rng.gen_range(0..10) {
                0..=3 => {
                    cursor += rng.gen_range(0..3);
                    cursor
                }
                4..=8 => cursor.saturating_sub(rng.gen_range(0..t + 64)),
                _ => rng.gen_range(0..=cursor + t),
            };
            let expect = value >= floor
                && match max {
                    None => true,
                    Some(m) => value > m || (m - value < t && !seen.contains(&value)),
                }
                && !seen.contains(&value);
            let got = w.accept(value);
            assert_eq!(got, expect, "step {step}, value {value}, max {max:?}");
            if got {
                seen.insert(value);
                max = Some(max.map_or(value, |m| m.max(value)));
            }
        }
    }

    /// Accepted values are unique over any trace.
    #[test]
    fn accepted_values_never_repeat() {
        let mut w = ReplayWindow::new(0, 128);
        let mut accepted = HashSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            let v = rng.gen_range(0..4000u64);
            if w.accept(v) {
                assert!(accepted.insert(v), "value {v} accepted twice");
            }
        }
    }
}
