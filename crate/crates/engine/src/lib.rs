//! Host- and storage-side engines over the simulated fabric: counter-pool
//! sealing on the host, and anti-replay, freshness-tree, IV-cache, journal,
//! and crash-recovery machinery on the storage node.

pub mod config;
pub mod ivcache;
pub mod local;
pub mod nv;
pub mod pool;
pub mod remote;
pub mod service;
pub mod stack;
pub mod stats;
pub mod tree;
pub mod window;

pub use local::{Backend, LocalConfig, LocalEngine, LocalError, ReadOutcome, RemoteBackend};
pub use nv::{EntryStatus, JournalEntry, NvStore};
pub use remote::{
    rebuild_tree_from_disk, recover, RemoteConfig, RemoteEngine, RemoteError, RequestReject,
};
pub use service::RemoteService;
pub use stack::{Stack, StackOptions};
pub use stats::EngineStats;
pub use tree::{in_memory_size_bytes, FreshnessTree};
pub use window::ReplayWindow;
