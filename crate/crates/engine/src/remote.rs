//! Storage-node engine: anti-replay windows, the freshness tree with
//! eventually consistent updates, the IV write-back cache, the NV journal,
//! fast/full read verification, and crash recovery.
//!
//! Write handling is decoupled from upper-level tree propagation: the write
//! path synchronously refreshes only the written data set's level-1 node
//! (so the freshness tag stored with the sector verifies immediately) and
//! acknowledges once data and journal are down. A hasher pool recomputes
//! levels two and up. The NV root is committed together with the
//! TREE_UPDATED status flips at propagation-quiescent moments, keeping the
//! root equal to the tree with exactly the TREE_UPDATED entries applied.
//!
//! Lock families nest writer-lock -> cache-entry -> (tree node | nv); the
//! hashers take tree nodes in ascending global order and touch the NV store
//! only after releasing them.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use sealstor_blockdev::{DeviceError, SectorRecord, SimDevice};
use sealstor_core::crypto::{
    ct_eq, freshness_tag, network_mac, node_hash_ivs, CipherSuite, FreshnessKey, NetworkKey,
};
use sealstor_core::layout::{MetadataSector, SectorMetadata64, METADATA64_LEN, NET_COUNTER_MAX};
use sealstor_core::DeviceGeometry;
use sealstor_transport::{RejectCode, SessionState};

use crate::ivcache::{CacheEntry, IvCache};
use crate::nv::{EntryStatus, NvError, NvStore};
use crate::stats::EngineStats;
use crate::tree::FreshnessTree;
use crate::window::ReplayWindow;

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("device error: {0}")]
    Device(#[from] DeviceError),
    #[error("nv store error: {0}")]
    Nv(#[from] NvError),
    #[error("freshness violation: {0}")]
    FreshnessViolation(String),
    #[error("engine requires 64-byte metadata, device has {0}")]
    UnsupportedMetadata(u32),
}

/// Why a request was refused. Rejection is a value, not a fault.
#[derive(Debug, Error)]
pub enum RequestReject {
    #[error("network counter outside the replay window")]
    Window,
    #[error("network freshness mac mismatch on sector {sector}")]
    NetworkMac { sector: u64 },
    #[error("freshness check failed on sector {sector}: {detail}")]
    Freshness { sector: u64, detail: &'static str },
    #[error("journal full")]
    JournalFull,
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error("network counter space exhausted; session must roll")]
    SessionExpired,
    #[error("malformed request: {0}")]
    Protocol(&'static str),
    #[error("device failure: {0}")]
    Device(String),
}

impl RequestReject {
    pub fn code(&self) -> RejectCode {
        match self {
            Self::Window => RejectCode::Window,
            Self::NetworkMac { .. } => RejectCode::NetworkMac,
            Self::Freshness { .. } => RejectCode::Freshness,
            Self::JournalFull => RejectCode::JournalFull,
            Self::SessionExpired | Self::UnknownSession(_) | Self::Protocol(_) => {
                RejectCode::Protocol
            }
            Self::Device(_) => RejectCode::Device,
        }
    }

    pub fn sector(&self) -> u64 {
        match self {
            Self::NetworkMac { sector } | Self::Freshness { sector, .. } => *sector,
            _ => u64::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub tree_branching: u32,
    pub hashers: usize,
    pub cache_capacity: usize,
    pub journal_capacity: u32,
    /// Eventual consistency: acknowledge before upper-level propagation.
    pub ec: bool,
    pub window_size: u32,
    /// Rewrite a sector's freshness tag after a successful full-path check.
    pub refresh_on_full_path: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            tree_branching: 16,
            hashers: 3,
            cache_capacity: 1024,
            journal_capacity: crate::nv::DEFAULT_JOURNAL_CAPACITY,
            ec: true,
            window_size: 1024,
            refresh_on_full_path: false,
        }
    }
}

/// One borrowed wire sector of a write request.
pub struct WireSector<'a> {
    pub data: &'a [u8],
    pub meta: SectorMetadata64,
}

struct SectorLocks {
    held: Mutex<HashSet<u64>>,
    released: Condvar,
}

impl SectorLocks {
    fn new() -> Self {
        Self {
            held: Mutex::new(HashSet::new()),
            released: Condvar::new(),
        }
    }

    fn try_acquire(&self, sector: u64) -> bool {
        self.held.lock().insert(sector)
    }

    fn release(&self, sector: u64) {
        self.held.lock().remove(&sector);
        self.released.notify_all();
    }

    fn wait_released(&self, timeout: Duration) {
        let mut held = self.held.lock();
        self.released.wait_for(&mut held, timeout);
    }
}

struct HasherTask {
    data_set: u64,
    seqs: Vec<u64>,
}

#[derive(Default)]
struct PropagationQueue {
    inflight: u64,
    done: Vec<u64>,
}

struct Shared {
    device: Arc<SimDevice>,
    geom: DeviceGeometry,
    suite: CipherSuite,
    cfg: RemoteConfig,
    tree: FreshnessTree,
    cache: IvCache,
    nv: Arc<NvStore>,
    freshness_key: FreshnessKey,
    writers: SectorLocks,
    prop: Mutex<PropagationQueue>,
    stats: Arc<EngineStats>,
}

struct RemoteSession {
    window: Mutex<ReplayWindow>,
    send_counter: AtomicU64,
    net_key: NetworkKey,
}

pub struct RemoteEngine {
    shared: Arc<Shared>,
    device_id: String,
    sessions: Mutex<HashMap<u64, Arc<RemoteSession>>>,
    hasher_txs: Vec<Sender<HasherTask>>,
    next_hasher: AtomicU64,
    hasher_handles: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

impl RemoteEngine {
    /// Open the engine over a device and its NV store. Runs recovery: the
    /// tree is rebuilt from disk (with journal overlay), authenticated
    /// against the persisted root, and the journal retired. A fresh NV
    /// store is provisioned with `bootstrap_key`.
    pub fn start(
        device: Arc<SimDevice>,
        suite: CipherSuite,
        cfg: RemoteConfig,
        nv: Arc<NvStore>,
        device_id: &str,
        bootstrap_key: FreshnessKey,
    ) -> Result<Arc<Self>, RemoteError> {
        let geom = device.geometry();
        if geom.metadata_bytes() != METADATA64_LEN as u32 {
            return Err(RemoteError::UnsupportedMetadata(geom.metadata_bytes()));
        }
        if !nv.is_provisioned() {
            let zero_tree = FreshnessTree::new_zeroed(
                suite,
                geom.data_set_count(),
                geom.data_set_size(),
                cfg.tree_branching,
            );
            nv.provision(&bootstrap_key, zero_tree.root());
        }
        let tree = recover(&device, &geom, suite, cfg.tree_branching, &nv)?;
        let freshness_key = nv.freshness_key();
        let shared = Arc::new(Shared {
            cache: IvCache::new(cfg.cache_capacity),
            device,
            geom,
            suite,
            tree,
            nv,
            freshness_key,
            writers: SectorLocks::new(),
            prop: Mutex::new(PropagationQueue::default()),
            stats: Arc::new(EngineStats::default()),
            cfg: cfg.clone(),
        });
        let mut hasher_txs = Vec::new();
        let mut handles = Vec::new();
        if cfg.ec {
            for _ in 0..cfg.hashers.max(1) {
                let (tx, rx): (Sender<HasherTask>, Receiver<HasherTask>) =
                    std::sync::mpsc::channel();
                let shared = Arc::clone(&shared);
                handles.push(std::thread::spawn(move || {
                    while let Ok(task) = rx.recv() {
                        run_propagation(&shared, task);
                    }
                }));
                hasher_txs.push(tx);
            }
        }
        Ok(Arc::new(Self {
            shared,
            device_id: device_id.to_string(),
            sessions: Mutex::new(HashMap::new()),
            hasher_txs,
            next_hasher: AtomicU64::new(0),
            hasher_handles: Mutex::new(handles),
        }))
    }

    pub fn stats(&self) -> Arc<EngineStats> {
        Arc::clone(&self.shared.stats)
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn geometry(&self) -> DeviceGeometry {
        self.shared.geom
    }

    pub fn nv(&self) -> Arc<NvStore> {
        Arc::clone(&self.shared.nv)
    }

    pub fn journal_len(&self) -> usize {
        self.shared.nv.journal_len()
    }

    pub fn hasher_backlog(&self) -> u64 {
        self.shared.prop.lock().inflight
    }

    /// Block until no propagation task is in flight. After a device crash
    /// this quiesces the hashers (which touch only tree and NV state)
    /// before recovery takes over.
    pub fn wait_propagation_idle(&self) {
        while self.shared.prop.lock().inflight > 0 {
            std::thread::sleep(Duration::from_micros(100));
        }
    }

    pub fn cache_len(&self) -> usize {
        self.shared.cache.len()
    }

    /// Register the server half of a handshaken session.
    pub fn attach_session(&self, session: &SessionState) {
        let mut sessions = self.sessions.lock();
        sessions
            .entry(session.session_id)
            .or_insert_with(|| {
                Arc::new(RemoteSession {
                    window: Mutex::new(ReplayWindow::new(
                        session.recv_start,
                        self.shared.cfg.window_size,
                    )),
                    send_counter: AtomicU64::new(session.send_start),
                    net_key: session.net_key.clone(),
                })
            });
    }

    fn session(&self, session_id: u64) -> Result<Arc<RemoteSession>, RequestReject> {
        self.sessions
            .lock()
            .get(&session_id)
            .cloned()
            .ok_or(RequestReject::UnknownSession(session_id))
    }

    /// Admit, journal, persist, and acknowledge one write request. Tree
    /// propagation above level 1 runs asynchronously under EC.
    pub fn handle_write(
        &self,
        session_id: u64,
        start: u64,
        sectors: &[WireSector<'_>],
    ) -> Result<(), RequestReject> {
        let shared = &self.shared;
        let count = sectors.len() as u64;
        if count == 0 {
            return Err(RequestReject::Protocol("empty write"));
        }
        if start + count > shared.geom.data_sector_count() {
            return Err(RequestReject::Protocol("write beyond device"));
        }
        for ws in sectors {
            if ws.data.len() != shared.geom.sector_bytes() as usize {
                return Err(RequestReject::Protocol("bad sector payload length"));
            }
            if ws.meta.iv_counter == 0 {
                return Err(RequestReject::Protocol("iv counter zero is reserved"));
            }
        }

        // Network freshness: MACs first, then all-or-nothing window entry.
        let session = self.session(session_id)?;
        for (i, ws) in sectors.iter().enumerate() {
            let expected = network_mac(
                &shared.suite,
                &session.net_key,
                ws.meta.iv_counter,
                ws.meta.net_counter,
            )
            .map_err(|_| RequestReject::Protocol("counter out of range"))?;
            if !ct_eq(&expected, &ws.meta.net_mac) {
                EngineStats::bump(&shared.stats.mac_rejects);
                return Err(RequestReject::NetworkMac {
                    sector: start + i as u64,
                });
            }
        }
        let counters: Vec<u64> = sectors.iter().map(|ws| ws.meta.net_counter).collect();
        if !session.window.lock().accept_batch(&counters) {
            EngineStats::bump(&shared.stats.window_rejects);
            return Err(RequestReject::Window);
        }

        self.write_admitted(start, sectors)
    }

    fn acquire_writer(&self, sector: u64) {
        let shared = &self.shared;
        loop {
            if shared.writers.try_acquire(sector) {
                return;
            }
            // The holder may be a retirable journal entry waiting for its
            // aggregated sector to flush; nudge that along.
            self.reclaim_sector(sector);
            if shared.writers.try_acquire(sector) {
                return;
            }
            shared.writers.wait_released(Duration::from_micros(500));
        }
    }

    fn write_admitted(&self, start: u64, sectors: &[WireSector<'_>]) -> Result<(), RequestReject> {
        let shared = &self.shared;

        // Phase A: admission and cache residency; record prior IVs. The
        // writer lock is held from here until the journal entry retires, so
        // the recorded IV slot cannot move underneath us.
        let mut lines: Vec<Arc<CacheEntry>> = Vec::with_capacity(sectors.len());
        let mut old_ivs: Vec<u64> = Vec::with_capacity(sectors.len());
        for i in 0..sectors.len() {
            let sector = start + i as u64;
            self.acquire_writer(sector);
            let (set, offset) = shared.geom.metadata_location(sector).expect("range checked");
            match self.load_cache_line(set) {
                Ok(entry) => {
                    old_ivs.push(entry.state.lock().ivs[offset as usize]);
                    lines.push(entry);
                }
                Err(err) => {
                    for released in 0..=i {
                        shared.writers.release(start + released as u64);
                    }
                    return Err(self.map_load_error(sector, err));
                }
            }
        }

        // Phase B: journal every sector with backpressure; roll back the
        // appended prefix if space cannot be found.
        let mut seqs: Vec<u64> = Vec::with_capacity(sectors.len());
        for (i, ws) in sectors.iter().enumerate() {
            let sector = start + i as u64;
            match self.append_with_backpressure(ws.meta.key_id, sector, old_ivs[i], ws.meta.iv_counter)
            {
                Ok(seq) => seqs.push(seq),
                Err(()) => {
                    for seq in &seqs {
                        let _ = shared.nv.abort(*seq);
                    }
                    for released in 0..sectors.len() {
                        shared.writers.release(start + released as u64);
                    }
                    return Err(RequestReject::JournalFull);
                }
            }
        }

        // Phase C: apply the whole batch to the cache and level-1 nodes, so
        // tags computed below are fresh for every sector of this request.
        for (i, ws) in sectors.iter().enumerate() {
            let sector = start + i as u64;
            let (set, offset) = shared.geom.metadata_location(sector).expect("range checked");
            let mut state = lines[i].state.lock();
            state.ivs[offset as usize] = ws.meta.iv_counter;
            state.dirty = true;
            let node = node_hash_ivs(&shared.suite, &state.ivs, shared.geom.data_set_size());
            shared.tree.set_level1(set, node);
        }

        // Phase D: seal the freshness tag into the persisted metadata and
        // write each sector atomically with it. On a device failure the
        // unpersisted suffix is unjournaled and unlocked; persisted sectors
        // keep their entries (and writer locks) for recovery.
        for (i, ws) in sectors.iter().enumerate() {
            let sector = start + i as u64;
            let (set, _) = shared.geom.metadata_location(sector).expect("range checked");
            let parent = shared.tree.level1(set);
            let mut meta = ws.meta.stripped();
            meta.freshness_tag = freshness_tag(
                &shared.suite,
                &shared.freshness_key,
                sector,
                meta.iv_counter,
                &parent,
            );
            let record = SectorRecord {
                data: ws.data.to_vec(),
                metadata: meta.encode().expect("validated ranges").to_vec(),
            };
            let physical = shared.geom.data_to_physical(sector).expect("range checked");
            if let Err(e) = shared
                .device
                .write_sectors(physical, std::slice::from_ref(&record))
            {
                for undone in i..sectors.len() {
                    let _ = shared.nv.abort(seqs[undone]);
                    shared.writers.release(start + undone as u64);
                }
                return Err(RequestReject::Device(e.to_string()));
            }
            shared.nv.mark_data_persisted(seqs[i]).expect("entry exists");
        }
        EngineStats::bump(&shared.stats.writes);
        EngineStats::add(&shared.stats.sectors_written, sectors.len() as u64);

        // Phase E: hand the affected data sets to the hashers (inline
        // without EC).
        let mut tasks: Vec<HasherTask> = Vec::new();
        for i in 0..sectors.len() {
            let sector = start + i as u64;
            let set = sector / shared.geom.data_set_size() as u64;
            match tasks.iter_mut().find(|t| t.data_set == set) {
                Some(task) => task.seqs.push(seqs[i]),
                None => tasks.push(HasherTask {
                    data_set: set,
                    seqs: vec![seqs[i]],
                }),
            }
        }
        for task in tasks {
            self.dispatch(task);
        }
        for seq in &seqs {
            shared.nv.mark_acked(*seq);
        }
        Ok(())
    }

    fn map_load_error(&self, sector: u64, err: LineLoadError) -> RequestReject {
        match err {
            LineLoadError::Device(e) => RequestReject::Device(e.to_string()),
            LineLoadError::Stale(detail) => {
                EngineStats::bump(&self.shared.stats.freshness_errors);
                RequestReject::Freshness { sector, detail }
            }
        }
    }

    fn append_with_backpressure(
        &self,
        key_id: u32,
        sector: u64,
        old_iv: u64,
        new_iv: u64,
    ) -> Result<u64, ()> {
        let shared = &self.shared;
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            match shared.nv.append(0, key_id, sector, old_iv, new_iv) {
                Ok(seq) => return Ok(seq),
                Err(NvError::JournalFull(_)) => {
                    EngineStats::bump(&shared.stats.journal_reclaims);
                    self.reclaim_retirable();
                    if Instant::now() > deadline {
                        return Err(());
                    }
                    shared.nv.wait_for_space(Duration::from_micros(500));
                }
                Err(_) => return Err(()),
            }
        }
    }

    fn dispatch(&self, task: HasherTask) {
        let shared = &self.shared;
        {
            let mut prop = shared.prop.lock();
            prop.inflight += 1;
            shared.stats.note_backlog(prop.inflight);
        }
        if shared.cfg.ec {
            let idx = self.next_hasher.fetch_add(1, Ordering::Relaxed) as usize
                % self.hasher_txs.len();
            self.hasher_txs[idx].send(task).expect("hashers alive");
        } else {
            run_propagation(shared, task);
        }
    }

    /// Flush-and-retire every TREE_UPDATED journal entry.
    fn reclaim_retirable(&self) {
        let shared = &self.shared;
        let retirable: Vec<(u64, u64)> = shared
            .nv
            .entries()
            .iter()
            .filter(|e| e.status == EntryStatus::TreeUpdated)
            .map(|e| (e.seq, e.data_set))
            .collect();
        let sets: HashSet<u64> = retirable.iter().map(|(_, ds)| *ds).collect();
        for set in sets {
            self.flush_line(set);
        }
        for (seq, _) in retirable {
            if let Ok((sector, _)) = shared.nv.retire(seq) {
                shared.writers.release(sector);
            }
        }
    }

    /// Nudge retirement of whatever journal entry holds `sector`.
    fn reclaim_sector(&self, sector: u64) {
        let shared = &self.shared;
        let entry = shared
            .nv
            .entries()
            .into_iter()
            .find(|e| e.sector == sector && e.status == EntryStatus::TreeUpdated);
        if let Some(entry) = entry {
            self.flush_line(entry.data_set);
            if let Ok((sector, _)) = shared.nv.retire(entry.seq) {
                shared.writers.release(sector);
            }
        }
    }

    /// Write back a dirty cache line; no-op when absent or clean.
    fn flush_line(&self, set: u64) {
        if let Some(entry) = self.shared.cache.get(set) {
            self.flush_line_entry(&entry);
        }
    }

    fn flush_line_entry(&self, entry: &CacheEntry) {
        let shared = &self.shared;
        let mut state = entry.state.lock();
        if !state.dirty {
            return;
        }
        let sector = MetadataSector {
            data_set: entry.data_set,
            iv_array: state.ivs.clone(),
        };
        let record = SectorRecord {
            data: sector.encode(&shared.geom),
            metadata: vec![0u8; METADATA64_LEN],
        };
        if shared
            .device
            .write_sectors(entry.data_set, std::slice::from_ref(&record))
            .is_ok()
        {
            state.dirty = false;
            EngineStats::bump(&shared.stats.cache_writebacks);
        }
    }

    /// Ensure the aggregated-IV line for `set` is resident, loading (and
    /// verifying against the tree) from disk on a miss.
    fn load_cache_line(&self, set: u64) -> Result<Arc<CacheEntry>, LineLoadError> {
        let shared = &self.shared;
        if let Some(entry) = shared.cache.get(set) {
            EngineStats::bump(&shared.stats.cache_hits);
            return Ok(entry);
        }
        let guard = shared.cache.miss_lock.lock();
        if let Some(entry) = shared.cache.get(set) {
            EngineStats::bump(&shared.stats.cache_hits);
            return Ok(entry);
        }
        EngineStats::bump(&shared.stats.cache_misses);
        let record = shared
            .device
            .read_sectors(set, 1)
            .map_err(LineLoadError::Device)?
            .pop()
            .expect("one record");
        let decoded = MetadataSector::decode(set, &record.data, &shared.geom)
            .map_err(|_| LineLoadError::Stale("aggregated sector undecodable"))?;
        // A freshly loaded line must agree with the in-memory tree.
        let node = node_hash_ivs(&shared.suite, &decoded.iv_array, shared.geom.data_set_size());
        if node != shared.tree.level1(set) {
            return Err(LineLoadError::Stale("aggregated sector stale against tree"));
        }
        let entry = Arc::new(CacheEntry::new(set, decoded.iv_array));
        let victim = shared.cache.insert(Arc::clone(&entry));
        drop(guard);
        if let Some(victim) = victim {
            self.flush_line_entry(&victim);
            self.retire_clean_set(victim.data_set);
        }
        Ok(entry)
    }

    /// Retire TREE_UPDATED entries of a data set whose line is clean or
    /// evicted.
    fn retire_clean_set(&self, set: u64) {
        retire_if_clean(&self.shared, set);
    }

    /// Serve a read request straight into a response buffer laid out as
    /// `count` records of `sector_bytes + 64`, stored tags included and
    /// transport freshness fields freshly attached.
    pub fn handle_read(
        &self,
        session_id: u64,
        start: u64,
        count: u32,
        out: &mut [u8],
    ) -> Result<(), RequestReject> {
        let shared = &self.shared;
        if count == 0 {
            return Err(RequestReject::Protocol("empty read"));
        }
        if start + count as u64 > shared.geom.data_sector_count() {
            return Err(RequestReject::Protocol("read beyond device"));
        }
        let record_len = shared.geom.record_bytes() as usize;
        assert_eq!(out.len(), record_len * count as usize);
        let session = self.session(session_id)?;
        let physical = shared.geom.data_to_physical(start).expect("range checked");
        shared
            .device
            .read_raw_into(physical, count, out)
            .map_err(|e| RequestReject::Device(e.to_string()))?;

        let sector_len = shared.geom.sector_bytes() as usize;
        for i in 0..count as usize {
            let sector = start + i as u64;
            let record = &mut out[i * record_len..(i + 1) * record_len];
            let (_data, meta_bytes) = record.split_at_mut(sector_len);
            let meta = SectorMetadata64::decode(meta_bytes).map_err(|_| {
                EngineStats::bump(&shared.stats.freshness_errors);
                RequestReject::Freshness {
                    sector,
                    detail: "persisted metadata undecodable",
                }
            })?;
            if meta.is_zero() {
                self.verify_unwritten(sector)?;
                EngineStats::bump(&shared.stats.unwritten_reads);
            } else {
                self.verify_freshness(sector, &meta)?;
            }
            // Attach network freshness for the response direction.
            let j = session.send_counter.fetch_add(1, Ordering::Relaxed);
            if j > NET_COUNTER_MAX {
                return Err(RequestReject::SessionExpired);
            }
            let mac = network_mac(&shared.suite, &session.net_key, meta.iv_counter, j)
                .expect("ranges checked");
            meta_bytes[44..52].copy_from_slice(&mac);
            meta_bytes[52..58].copy_from_slice(&j.to_le_bytes()[..6]);
        }
        EngineStats::bump(&shared.stats.reads);
        EngineStats::add(&shared.stats.sectors_read, count as u64);
        Ok(())
    }

    /// An all-zero metadata block claims "never written"; the claim must
    /// match the authoritative IV state.
    fn verify_unwritten(&self, sector: u64) -> Result<(), RequestReject> {
        let shared = &self.shared;
        let (set, offset) = shared.geom.metadata_location(sector).expect("range checked");
        let entry = self
            .load_cache_line(set)
            .map_err(|e| self.map_load_error(sector, e))?;
        let iv = entry.state.lock().ivs[offset as usize];
        if iv != 0 {
            EngineStats::bump(&shared.stats.freshness_errors);
            return Err(RequestReject::Freshness {
                sector,
                detail: "written sector presented as unwritten",
            });
        }
        Ok(())
    }

    /// Fast path: the stored tag still verifies against the current level-1
    /// node. Full path: compare the IV against the aggregated state and the
    /// aggregated state against the tree.
    fn verify_freshness(&self, sector: u64, meta: &SectorMetadata64) -> Result<(), RequestReject> {
        let shared = &self.shared;
        let (set, offset) = shared.geom.metadata_location(sector).expect("range checked");
        let parent = shared.tree.level1(set);
        let expected = freshness_tag(
            &shared.suite,
            &shared.freshness_key,
            sector,
            meta.iv_counter,
            &parent,
        );
        if ct_eq(&expected, &meta.freshness_tag) {
            EngineStats::bump(&shared.stats.fast_path_hits);
            return Ok(());
        }
        EngineStats::bump(&shared.stats.full_path_checks);
        let entry = self
            .load_cache_line(set)
            .map_err(|e| self.map_load_error(sector, e))?;
        {
            let state = entry.state.lock();
            let node = node_hash_ivs(&shared.suite, &state.ivs, shared.geom.data_set_size());
            if node != shared.tree.level1(set) {
                EngineStats::bump(&shared.stats.freshness_errors);
                return Err(RequestReject::Freshness {
                    sector,
                    detail: "iv cache diverges from tree",
                });
            }
            if state.ivs[offset as usize] != meta.iv_counter {
                EngineStats::bump(&shared.stats.freshness_errors);
                return Err(RequestReject::Freshness {
                    sector,
                    detail: "iv does not match aggregated state",
                });
            }
        }
        if shared.cfg.refresh_on_full_path {
            self.refresh_sector_tag(sector);
        }
        Ok(())
    }

    /// Rewrite one sector's stored freshness tag from the current level-1
    /// node. Opportunistic callers skip when a writer holds the sector;
    /// blocking callers nudge retirement and wait.
    fn refresh_sector_tag(&self, sector: u64) -> bool {
        self.refresh_sector_tag_inner(sector, false)
    }

    fn refresh_sector_tag_inner(&self, sector: u64, blocking: bool) -> bool {
        let shared = &self.shared;
        if blocking {
            self.acquire_writer(sector);
        } else if !shared.writers.try_acquire(sector) {
            return false;
        }
        let refreshed = (|| -> Result<bool, RemoteError> {
            let physical = shared.geom.data_to_physical(sector).expect("in range");
            let mut records = shared.device.read_sectors(physical, 1)?;
            let record = records.pop().expect("one record");
            let mut meta = match SectorMetadata64::decode(&record.metadata) {
                Ok(m) if !m.is_zero() => m,
                _ => return Ok(false),
            };
            let (set, _) = shared.geom.metadata_location(sector).expect("in range");
            let parent = shared.tree.level1(set);
            let tag = freshness_tag(
                &shared.suite,
                &shared.freshness_key,
                sector,
                meta.iv_counter,
                &parent,
            );
            if tag == meta.freshness_tag {
                return Ok(true);
            }
            meta.freshness_tag = tag;
            let record = SectorRecord {
                data: record.data,
                metadata: meta.encode().expect("valid").to_vec(),
            };
            shared
                .device
                .write_sectors(physical, std::slice::from_ref(&record))?;
            Ok(true)
        })()
        .unwrap_or(false);
        shared.writers.release(sector);
        if refreshed {
            EngineStats::bump(&shared.stats.refreshed_tags);
        }
        refreshed
    }

    /// Rewrite freshness tags for every written sector of the data sets in
    /// `[set_start, set_end)`, restoring the fast path.
    pub fn refresh_tags(&self, set_start: u64, set_end: u64) -> Result<u64, RemoteError> {
        let shared = &self.shared;
        let end = set_end.min(shared.geom.data_set_count());
        let mut refreshed = 0u64;
        for set in set_start..end {
            let width = shared.geom.sectors_in_set(set) as u64;
            for slot in 0..width {
                let sector = set * shared.geom.data_set_size() as u64 + slot;
                if self.refresh_sector_tag_inner(sector, true) {
                    refreshed += 1;
                }
            }
        }
        Ok(refreshed)
    }

    /// Wait for the journal to empty and all dirty lines to flush; flushes
    /// the device. At drain the in-memory tree equals a full rebuild from
    /// disk.
    pub fn drain(&self) -> Result<(), RemoteError> {
        let shared = &self.shared;
        loop {
            self.reclaim_retirable();
            let busy = { shared.prop.lock().inflight > 0 } || shared.nv.journal_len() > 0;
            if !busy {
                break;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        for entry in shared.cache.resident() {
            self.flush_line_entry(&entry);
        }
        shared.device.flush()?;
        Ok(())
    }

    /// Drain, then authenticate the on-disk state against the persisted
    /// root. Exposed over the transport as the RECOVER admin command.
    pub fn recover_check(&self) -> Result<[u8; 16], RemoteError> {
        let shared = &self.shared;
        self.drain()?;
        let rebuilt = rebuild_tree_from_disk(
            &shared.device,
            &shared.geom,
            shared.suite,
            shared.cfg.tree_branching,
        )?;
        let root = rebuilt.root();
        if root != shared.nv.root() {
            return Err(RemoteError::FreshnessViolation(
                "disk state diverges from persisted root".into(),
            ));
        }
        Ok(root)
    }

    /// Copy of all tree levels, for equality checks against a rebuild.
    pub fn tree_levels(&self) -> Vec<Vec<[u8; 16]>> {
        self.shared.tree.snapshot_levels()
    }

    pub fn tree_root(&self) -> [u8; 16] {
        self.shared.tree.root()
    }

    /// Join the hasher pool (used by tests that need a quiet shutdown).
    pub fn shutdown(&self) {
        let handles = std::mem::take(&mut *self.hasher_handles.lock());
        // Hashers exit when their channels close; the engine must be the
        // last sender.
        drop(handles);
    }
}

enum LineLoadError {
    Device(DeviceError),
    Stale(&'static str),
}

fn run_propagation(shared: &Arc<Shared>, task: HasherTask) {
    shared.tree.propagate(task.data_set);
    for seq in &task.seqs {
        let _ = shared.nv.set_tree_done(*seq);
    }
    // Commit at propagation-quiescence so the persisted root always equals
    // the tree with exactly the TREE_UPDATED entries applied.
    let committed = {
        let mut prop = shared.prop.lock();
        prop.done.extend_from_slice(&task.seqs);
        prop.inflight -= 1;
        if prop.inflight == 0 {
            let root = shared.tree.root();
            let done = std::mem::take(&mut prop.done);
            let committed = shared.nv.commit_tree_updates(root, &done);
            EngineStats::bump(&shared.stats.nv_commits);
            Some(committed)
        } else {
            None
        }
    };
    if let Some(committed) = committed {
        let mut sets: Vec<u64> = committed.iter().map(|(_, ds, _)| *ds).collect();
        sets.sort_unstable();
        sets.dedup();
        for set in sets {
            retire_if_clean(shared, set);
        }
    }
}

fn retire_if_clean(shared: &Arc<Shared>, set: u64) {
    if let Some(entry) = shared.cache.get(set) {
        if entry.is_dirty() {
            return;
        }
    }
    let retirable: Vec<u64> = shared
        .nv
        .entries()
        .iter()
        .filter(|e| e.data_set == set && e.status == EntryStatus::TreeUpdated)
        .map(|e| e.seq)
        .collect();
    for seq in retirable {
        if let Ok((sector, _)) = shared.nv.retire(seq) {
            shared.writers.release(sector);
        }
    }
}

/// Bottom-up tree construction from the on-disk aggregated sectors alone.
pub fn rebuild_tree_from_disk(
    device: &SimDevice,
    geom: &DeviceGeometry,
    suite: CipherSuite,
    branching: u32,
) -> Result<FreshnessTree, RemoteError> {
    let mut leaves = Vec::with_capacity(geom.data_set_count() as usize);
    for set in 0..geom.data_set_count() {
        let record = device.read_sectors(set, 1)?.pop().expect("one record");
        let decoded = MetadataSector::decode(set, &record.data, geom)
            .map_err(|e| RemoteError::FreshnessViolation(e.to_string()))?;
        leaves.push(node_hash_ivs(&suite, &decoded.iv_array, geom.data_set_size()));
    }
    Ok(FreshnessTree::from_leaf_hashes(
        suite,
        leaves,
        geom.data_set_size(),
        branching,
    ))
}

/// Crash recovery: reconstruct the tree from the aggregated sectors with
/// the journal's per-sector ground truth overlaid, authenticate the
/// pre-crash state against the persisted root, then commit the recovered
/// root and retire the journal.
pub fn recover(
    device: &SimDevice,
    geom: &DeviceGeometry,
    suite: CipherSuite,
    branching: u32,
    nv: &NvStore,
) -> Result<FreshnessTree, RemoteError> {
    // (1) Aggregated IVs with per-sector overlay for non-retired entries;
    // per-sector metadata persists atomically with its data and is the
    // ground truth.
    let mut leaf_ivs: Vec<Vec<u64>> = Vec::with_capacity(geom.data_set_count() as usize);
    for set in 0..geom.data_set_count() {
        let record = device.read_sectors(set, 1)?.pop().expect("one record");
        let decoded = MetadataSector::decode(set, &record.data, geom)
            .map_err(|e| RemoteError::FreshnessViolation(e.to_string()))?;
        leaf_ivs.push(decoded.iv_array);
    }
    let entries = nv.entries();
    for entry in &entries {
        let physical = geom
            .data_to_physical(entry.sector)
            .map_err(|e| RemoteError::FreshnessViolation(e.to_string()))?;
        let record = device.read_sectors(physical, 1)?.pop().expect("one record");
        let meta = SectorMetadata64::decode(&record.metadata).map_err(|_| {
            RemoteError::FreshnessViolation("journaled sector metadata undecodable".into())
        })?;
        let (set, offset) = geom.metadata_location(entry.sector).expect("journal in range");
        leaf_ivs[set as usize][offset as usize] = meta.iv_counter;
    }

    // (2) Scratch leaves with incomplete writes reverted.
    let mut scratch = leaf_ivs.clone();
    for entry in &entries {
        if entry.status < EntryStatus::TreeUpdated {
            let (set, offset) = geom.metadata_location(entry.sector).expect("journal in range");
            scratch[set as usize][offset as usize] = entry.old_iv;
        }
    }

    // (3) The reverted state must authenticate against the persisted root.
    let scratch_leaves: Vec<[u8; 16]> = scratch
        .iter()
        .map(|ivs| node_hash_ivs(&suite, ivs, geom.data_set_size()))
        .collect();
    let scratch_tree =
        FreshnessTree::from_leaf_hashes(suite, scratch_leaves, geom.data_set_size(), branching);
    if scratch_tree.root() != nv.root() {
        return Err(RemoteError::FreshnessViolation(
            "recovered state does not authenticate against the persisted root".into(),
        ));
    }

    // (4) Adopt the overlay: write corrected aggregated sectors back, build
    // the live tree, persist its root, and retire the journal.
    let touched: HashSet<u64> = entries.iter().map(|e| e.data_set).collect();
    for &set in &touched {
        let sector = MetadataSector {
            data_set: set,
            iv_array: leaf_ivs[set as usize].clone(),
        };
        let record = SectorRecord {
            data: sector.encode(geom),
            metadata: vec![0u8; METADATA64_LEN],
        };
        device.write_sectors(set, std::slice::from_ref(&record))?;
    }
    let leaves: Vec<[u8; 16]> = leaf_ivs
        .iter()
        .map(|ivs| node_hash_ivs(&suite, ivs, geom.data_set_size()))
        .collect();
    let tree = FreshnessTree::from_leaf_hashes(suite, leaves, geom.data_set_size(), branching);
    nv.complete_recovery(tree.root());
    Ok(tree)
}
