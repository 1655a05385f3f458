//! Write-back LRU cache of aggregated-IV metadata sectors.
//!
//! A hash map gives O(1) seek and an index-linked list maintains recency;
//! the whole-structure lock is held only for list surgery. Entry contents
//! sit behind per-entry locks. When present, an entry is authoritative over
//! the on-disk aggregated sector.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

const NIL: usize = usize::MAX;

#[derive(Debug)]
pub struct EntryState {
    pub ivs: Vec<u64>,
    pub dirty: bool,
}

#[derive(Debug)]
pub struct CacheEntry {
    pub data_set: u64,
    pub state: Mutex<EntryState>,
}

impl CacheEntry {
    pub fn new(data_set: u64, ivs: Vec<u64>) -> Self {
        Self {
            data_set,
            state: Mutex::new(EntryState { ivs, dirty: false }),
        }
    }

    pub fn is_dirty(&self) -> bool {
        self.state.lock().dirty
    }
}

struct Slot {
    data_set: u64,
    prev: usize,
    next: usize,
    entry: Arc<CacheEntry>,
}

struct CacheIndex {
    map: HashMap<u64, usize>,
    slots: Vec<Slot>,
    free: Vec<usize>,
    head: usize,
    tail: usize,
}

impl CacheIndex {
    fn detach(&mut self, slot: usize) {
        let (prev, next) = (self.slots[slot].prev, self.slots[slot].next);
        if prev == NIL {
            self.head = next;
        } else {
            self.slots[prev].next = next;
        }
        if next == NIL {
            self.tail = prev;
        } else {
            self.slots[next].prev = prev;
        }
        self.slots[slot].prev = NIL;
        self.slots[slot].next = NIL;
    }

    fn push_front(&mut self, slot: usize) {
        self.slots[slot].prev = NIL;
        self.slots[slot].next = self.head;
        if self.head != NIL {
            self.slots[self.head].prev = slot;
        }
        self.head = slot;
        if self.tail == NIL {
            self.tail = slot;
        }
    }
}

pub struct IvCache {
    capacity: usize,
    index: Mutex<CacheIndex>,
    /// Serializes miss handling so one loader fills a given line.
    pub miss_lock: Mutex<()>,
}

impl IvCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            index: Mutex::new(CacheIndex {
                map: HashMap::new(),
                slots: Vec::new(),
                free: Vec::new(),
                head: NIL,
                tail: NIL,
            }),
            miss_lock: Mutex::new(()),
        }
    }

    pub fn len(&self) -> usize {
        self.index.lock().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seek; a hit moves the line to the front.
    pub fn get(&self, data_set: u64) -> Option<Arc<CacheEntry>> {
        let mut index = self.index.lock();
        let slot = *index.map.get(&data_set)?;
        index.detach(slot);
        index.push_front(slot);
        Some(Arc::clone(&index.slots[slot].entry))
    }

    /// Insert a loaded line at the front. At capacity the least recently
    /// used line is detached and handed back for write-back.
    pub fn insert(&self, entry: Arc<CacheEntry>) -> Option<Arc<CacheEntry>> {
        let mut index = self.index.lock();
        debug_assert!(!index.map.contains_key(&entry.data_set));
        let mut evicted = None;
        if index.map.len() >= self.capacity {
            let victim = index.tail;
            index.detach(victim);
            let victim_ds = index.slots[victim].data_set;
            index.map.remove(&victim_ds);
            index.free.push(victim);
            evicted = Some(Arc::clone(&index.slots[victim].entry));
        }
        let data_set = entry.data_set;
        let slot = if let Some(slot) = index.free.pop() {
            index.slots[slot] = Slot {
                data_set,
                prev: NIL,
                next: NIL,
                entry,
            };
            slot
        } else {
            index.slots.push(Slot {
                data_set,
                prev: NIL,
                next: NIL,
                entry,
            });
            index.slots.len() - 1
        };
        index.map.insert(data_set, slot);
        index.push_front(slot);
        evicted
    }

    /// Entries currently resident, most recent first.
    pub fn resident(&self) -> Vec<Arc<CacheEntry>> {
        let index = self.index.lock();
        let mut out = Vec::with_capacity(index.map.len());
        let mut cursor = index.head;
        while cursor != NIL {
            out.push(Arc::clone(&index.slots[cursor].entry));
            cursor = index.slots[cursor].next;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(ds: u64) -> Arc<CacheEntry> {
        Arc::new(CacheEntry::new(ds, vec![ds; 4]))
    }

    #[test]
    fn hit_refreshes_recency() {
        let cache = IvCache::new(2);
        assert!(cache.insert(entry(1)).is_none());
        assert!(cache.insert(entry(2)).is_none());
        // Touch 1 so 2 becomes the LRU victim.
        assert!(cache.get(1).is_some());
        let evicted = cache.insert(entry(3)).unwrap();
        assert_eq!(evicted.data_set, 2);
        assert!(cache.get(1).is_some());
        assert!(cache.get(2).is_none());
        assert!(cache.get(3).is_some());
    }

    #[test]
    fn eviction_returns_the_lru_line() {
        let cache = IvCache::new(3);
        for ds in 0..3 {
            cache.insert(entry(ds));
        }
        let evicted = cache.insert(entry(10)).unwrap();
        assert_eq!(evicted.data_set, 0);
        assert_eq!(cache.len(), 3);
        let order: Vec<u64> = cache.resident().iter().map(|e| e.data_set).collect();
        assert_eq!(order, vec![10, 2, 1]);
    }

    #[test]
    fn slots_are_recycled() {
        let cache = IvCache::new(2);
        for ds in 0..100 {
            cache.insert(entry(ds));
        }
        let index = cache.index.lock();
        assert!(index.slots.len() <= 3);
    }
}
