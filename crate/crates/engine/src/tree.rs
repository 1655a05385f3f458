//! In-memory freshness tree over per-data-set IV hashes.
//!
//! Two branching factors: level 1 hashes a data set's IV array (leaf fanout
//! = the data-set size), upper levels hash 16-byte child nodes (tree fanout,
//! default 16). The per-sector IV level is never memoized; level 1 upward
//! lives in memory.
//!
//! Every node carries its own lock. A global node index (level-major,
//! level 1 first) orders acquisition: whenever a thread holds several node
//! locks it acquired them in ascending global index, which a thread-local
//! held-stack asserts. The write path touches a single level-1 node; the
//! hashers lock a parent's children and then the parent.

use std::cell::RefCell;
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};
use sealstor_core::crypto::{node_hash_children, node_hash_ivs, CipherSuite, NODE_HASH_LEN};

type Node = [u8; NODE_HASH_LEN];

thread_local! {
    static HELD: RefCell<Vec<u64>> = const { RefCell::new(Vec::new()) };
}

/// Optional lock-acquisition trace for concurrency tests.
pub type LockTrace = Mutex<Vec<(std::thread::ThreadId, u64)>>;

pub struct FreshnessTree {
    suite: CipherSuite,
    leaf_width: u32,
    branching: u32,
    /// `levels[0]` is level 1 (one node per data set); the last level holds
    /// the single root.
    levels: Vec<Vec<Mutex<Node>>>,
    /// Global index base per level.
    bases: Vec<u64>,
    trace: Option<Arc<LockTrace>>,
}

impl FreshnessTree {
    /// Build from per-data-set leaf hashes, computing all upper levels.
    pub fn from_leaf_hashes(
        suite: CipherSuite,
        leaves: Vec<Node>,
        leaf_width: u32,
        branching: u32,
    ) -> Self {
        assert!(!leaves.is_empty());
        assert!(branching >= 2);
        let mut plain: Vec<Vec<Node>> = vec![leaves];
        while plain.last().unwrap().len() > 1 {
            let below = plain.last().unwrap();
            let mut level = Vec::with_capacity(below.len().div_ceil(branching as usize));
            for chunk in below.chunks(branching as usize) {
                level.push(node_hash_children(&suite, chunk, branching));
            }
            plain.push(level);
        }
        let mut bases = Vec::with_capacity(plain.len());
        let mut base = 0u64;
        for level in &plain {
            bases.push(base);
            base += level.len() as u64;
        }
        let levels = plain
            .into_iter()
            .map(|level| level.into_iter().map(Mutex::new).collect())
            .collect();
        Self {
            suite,
            leaf_width,
            branching,
            levels,
            bases,
            trace: None,
        }
    }

    /// Tree for a device whose sectors are all unwritten.
    pub fn new_zeroed(
        suite: CipherSuite,
        data_sets: u64,
        leaf_width: u32,
        branching: u32,
    ) -> Self {
        let zero_leaf = node_hash_ivs(&suite, &[], leaf_width);
        Self::from_leaf_hashes(suite, vec![zero_leaf; data_sets as usize], leaf_width, branching)
    }

    pub fn enable_lock_trace(&mut self) -> Arc<LockTrace> {
        let trace = Arc::new(Mutex::new(Vec::new()));
        self.trace = Some(Arc::clone(&trace));
        trace
    }

    pub fn leaf_width(&self) -> u32 {
        self.leaf_width
    }

    pub fn branching(&self) -> u32 {
        self.branching
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn data_sets(&self) -> u64 {
        self.levels[0].len() as u64
    }

    fn lock_node(&self, level: usize, index: u64) -> MutexGuard<'_, Node> {
        let global = self.bases[level] + index;
        HELD.with(|held| {
            let mut held = held.borrow_mut();
            if let Some(&last) = held.last() {
                assert!(
                    global > last,
                    "node lock order violation: {global} after {last}"
                );
            }
            held.push(global);
        });
        if let Some(trace) = &self.trace {
            trace.lock().push((std::thread::current().id(), global));
        }
        self.levels[level][index as usize].lock()
    }

    fn unlock_note(&self) {
        HELD.with(|held| {
            held.borrow_mut().pop();
        });
    }

    /// Read the level-1 node of a data set.
    pub fn level1(&self, data_set: u64) -> Node {
        let guard = self.lock_node(0, data_set);
        let node = *guard;
        drop(guard);
        self.unlock_note();
        node
    }

    /// Write-path synchronous update of a data set's level-1 node.
    pub fn set_level1(&self, data_set: u64, node: Node) {
        let mut guard = self.lock_node(0, data_set);
        *guard = node;
        drop(guard);
        self.unlock_note();
    }

    pub fn root(&self) -> Node {
        let top = self.levels.len() - 1;
        let guard = self.lock_node(top, 0);
        let node = *guard;
        drop(guard);
        self.unlock_note();
        node
    }

    /// Recompute every ancestor of a level-1 node up to the root. Per step
    /// the child range is locked in ascending order, then the parent.
    pub fn propagate(&self, data_set: u64) {
        let mut index = data_set;
        for level in 1..self.levels.len() {
            let parent = index / self.branching as u64;
            let child_base = parent * self.branching as u64;
            let child_end =
                (child_base + self.branching as u64).min(self.levels[level - 1].len() as u64);
            let mut child_guards = Vec::with_capacity((child_end - child_base) as usize);
            for child in child_base..child_end {
                child_guards.push(self.lock_node(level - 1, child));
            }
            let mut parent_guard = self.lock_node(level, parent);
            let children: Vec<Node> = child_guards.iter().map(|g| **g).collect();
            *parent_guard = node_hash_children(&self.suite, &children, self.branching);
            drop(parent_guard);
            self.unlock_note();
            drop(child_guards);
            for _ in child_base..child_end {
                self.unlock_note();
            }
            index = parent;
        }
    }

    /// Copy of every level, for drain-equality checks.
    pub fn snapshot_levels(&self) -> Vec<Vec<Node>> {
        let mut out = Vec::with_capacity(self.levels.len());
        for (level_idx, level) in self.levels.iter().enumerate() {
            let mut nodes = Vec::with_capacity(level.len());
            for index in 0..level.len() as u64 {
                let guard = self.lock_node(level_idx, index);
                nodes.push(*guard);
                drop(guard);
                self.unlock_note();
            }
            out.push(nodes);
        }
        out
    }
}

/// In-memory footprint of a tree over `data_sets` leaves: all levels from
/// level 1 to the root, 16 bytes per node.
pub fn in_memory_size_bytes(data_sets: u64, branching: u32) -> u128 {
    assert!(branching >= 2);
    let mut total: u128 = 0;
    let mut level = data_sets.max(1);
    loop {
        total += level as u128 * NODE_HASH_LEN as u128;
        if level == 1 {
            break;
        }
        level = level.div_ceil(branching as u64);
    }
    total
}
