//! Lock-free counters exposed by both engines.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Default)]
pub struct EngineStats {
    pub writes: AtomicU64,
    pub reads: AtomicU64,
    pub sectors_written: AtomicU64,
    pub sectors_read: AtomicU64,
    pub fast_path_hits: AtomicU64,
    pub full_path_checks: AtomicU64,
    pub unwritten_reads: AtomicU64,
    pub cache_hits: AtomicU64,
    pub cache_misses: AtomicU64,
    pub cache_writebacks: AtomicU64,
    pub window_rejects: AtomicU64,
    pub mac_rejects: AtomicU64,
    pub freshness_errors: AtomicU64,
    pub journal_reclaims: AtomicU64,
    pub refreshed_tags: AtomicU64,
    pub hasher_backlog_peak: AtomicU64,
    pub nv_commits: AtomicU64,
}

impl EngineStats {
    pub fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }

    pub fn note_backlog(&self, backlog: u64) {
        self.hasher_backlog_peak.fetch_max(backlog, Ordering::Relaxed);
    }

    /// Fraction of verified reads that took the full path.
    pub fn full_path_rate(&self) -> f64 {
        let fast = Self::get(&self.fast_path_hits) as f64;
        let full = Self::get(&self.full_path_checks) as f64;
        if fast + full == 0.0 {
            0.0
        } else {
            full / (fast + full)
        }
    }

    pub fn cache_hit_rate(&self) -> f64 {
        let hits = Self::get(&self.cache_hits) as f64;
        let misses = Self::get(&self.cache_misses) as f64;
        if hits + misses == 0.0 {
            0.0
        } else {
            hits / (hits + misses)
        }
    }
}
