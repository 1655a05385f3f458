//! Crash-protected non-volatile state: the tree root, the freshness key,
//! and the write journal ring.
//!
//! The live store models battery-backed SRAM: every mutation is immediately
//! durable with respect to simulated crashes (the in-memory state survives
//! a device crash and is what recovery reads). `save`/`load` serialize the
//! same state to a file with atomic replace, for restarts and the recover
//! command; the byte layout is documented in `docs/formats.md`.
//!
//! Invariant: the persisted root always corresponds to the tree with
//! exactly the TREE_UPDATED-or-later entries applied, which is why root
//! updates and status flips happen in one commit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use parking_lot::{Condvar, Mutex};
use sealstor_core::crypto::FreshnessKey;
use thiserror::Error;

pub const NV_MAGIC: [u8; 4] = *b"SDNV";
pub const NV_VERSION: u8 = 1;
pub const JOURNAL_ENTRY_LEN: usize = 32;
pub const NV_HEADER_LEN: usize = 4 + 1 + 1 + 2 + 16 + 32 + 8 + 4 + 4;
/// Default journal ring capacity.
pub const DEFAULT_JOURNAL_CAPACITY: u32 = 512;

#[derive(Debug, Error)]
pub enum NvError {
    #[error("journal full ({0} entries)")]
    JournalFull(u32),
    #[error("unknown journal entry {0}")]
    UnknownEntry(u64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("nv image corrupt: {0}")]
    Corrupt(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum EntryStatus {
    Pending = 1,
    DataPersisted = 2,
    TreeUpdated = 3,
}

impl EntryStatus {
    fn from_u8(v: u8) -> Result<Self, NvError> {
        Ok(match v {
            1 => Self::Pending,
            2 => Self::DataPersisted,
            3 => Self::TreeUpdated,
            _ => return Err(NvError::Corrupt("entry status")),
        })
    }
}

/// One eventual-consistency write record. Retirement removes the entry from
/// the ring, so everything present is in one of the three live states.
#[derive(Debug, Clone)]
pub struct JournalEntry {
    pub seq: u64,
    pub status: EntryStatus,
    pub device: u8,
    pub key_id: u32,
    /// Data-sector index.
    pub sector: u64,
    pub old_iv: u64,
    pub new_iv: u64,
    /// Derived bookkeeping, not persisted.
    pub data_set: u64,
    /// Upper-level propagation finished but not yet committed.
    pub tree_done: bool,
    pub acked_at: Option<Instant>,
    pub tree_updated_at: Option<Instant>,
}

impl JournalEntry {
    fn encode(&self) -> [u8; JOURNAL_ENTRY_LEN] {
        let mut out = [0u8; JOURNAL_ENTRY_LEN];
        out[0] = self.status as u8;
        out[1] = self.device;
        out[4..8].copy_from_slice(&self.key_id.to_le_bytes());
        out[8..16].copy_from_slice(&self.sector.to_le_bytes());
        out[16..24].copy_from_slice(&self.old_iv.to_le_bytes());
        out[24..32].copy_from_slice(&self.new_iv.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8], seq: u64, data_set_size: u32) -> Result<Self, NvError> {
        if bytes.len() != JOURNAL_ENTRY_LEN {
            return Err(NvError::Corrupt("entry length"));
        }
        if bytes[2..4] != [0, 0] {
            return Err(NvError::Corrupt("entry reserved bytes"));
        }
        let status = EntryStatus::from_u8(bytes[0])?;
        let sector = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        Ok(Self {
            seq,
            status,
            device: bytes[1],
            key_id: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            sector,
            old_iv: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            new_iv: u64::from_le_bytes(bytes[24..32].try_into().unwrap()),
            data_set: sector / data_set_size as u64,
            tree_done: status == EntryStatus::TreeUpdated,
            acked_at: None,
            tree_updated_at: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NvState {
    pub provisioned: bool,
    pub root: [u8; 16],
    pub freshness_key: [u8; 32],
    pub seq: u64,
    pub capacity: u32,
    pub entries: Vec<JournalEntry>,
}

pub struct NvStore {
    inner: Mutex<NvState>,
    space_freed: Condvar,
    path: Mutex<Option<PathBuf>>,
    data_set_size: u32,
}

impl NvStore {
    pub fn new(capacity: u32, data_set_size: u32) -> Self {
        Self {
            inner: Mutex::new(NvState {
                provisioned: false,
                root: [0; 16],
                freshness_key: [0; 32],
                seq: 0,
                capacity,
                entries: Vec::new(),
            }),
            space_freed: Condvar::new(),
            path: Mutex::new(None),
            data_set_size,
        }
    }

    /// Rehydrate a store from a state snapshot (crash harnesses clone the
    /// surviving NV contents this way).
    pub fn from_state(state: NvState, data_set_size: u32) -> Self {
        let store = Self::new(state.capacity, data_set_size);
        *store.inner.lock() = state;
        store
    }

    /// Load a previously saved image; a missing file yields a fresh store.
    pub fn load(path: &Path, capacity: u32, data_set_size: u32) -> Result<Self, NvError> {
        let store = Self::new(capacity, data_set_size);
        if path.exists() {
            let bytes = std::fs::read(path)?;
            let state = Self::decode_state(&bytes, data_set_size)?;
            *store.inner.lock() = state;
        }
        *store.path.lock() = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn set_path(&self, path: Option<PathBuf>) {
        *self.path.lock() = path;
    }

    pub fn provision(&self, freshness_key: &FreshnessKey, root: [u8; 16]) {
        let mut state = self.inner.lock();
        state.provisioned = true;
        state.freshness_key = *freshness_key.as_bytes();
        state.root = root;
        self.persist(&state);
    }

    pub fn is_provisioned(&self) -> bool {
        self.inner.lock().provisioned
    }

    pub fn root(&self) -> [u8; 16] {
        self.inner.lock().root
    }

    pub fn freshness_key(&self) -> FreshnessKey {
        FreshnessKey::from_bytes(self.inner.lock().freshness_key)
    }

    pub fn journal_len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn capacity(&self) -> u32 {
        self.inner.lock().capacity
    }

    pub fn snapshot(&self) -> NvState {
        self.inner.lock().clone()
    }

    /// Append a PENDING record; fails when the ring is full.
    pub fn append(
        &self,
        device: u8,
        key_id: u32,
        sector: u64,
        old_iv: u64,
        new_iv: u64,
    ) -> Result<u64, NvError> {
        let mut state = self.inner.lock();
        if state.entries.len() as u32 >= state.capacity {
            return Err(NvError::JournalFull(state.capacity));
        }
        state.seq += 1;
        let seq = state.seq;
        let data_set = sector / self.data_set_size as u64;
        state.entries.push(JournalEntry {
            seq,
            status: EntryStatus::Pending,
            device,
            key_id,
            sector,
            old_iv,
            new_iv,
            data_set,
            tree_done: false,
            acked_at: None,
            tree_updated_at: None,
        });
        self.persist(&state);
        Ok(seq)
    }

    /// Block until the ring has room, up to `timeout`. Returns false on
    /// timeout.
    pub fn wait_for_space(&self, timeout: std::time::Duration) -> bool {
        let mut state = self.inner.lock();
        if (state.entries.len() as u32) < state.capacity {
            return true;
        }
        !self
            .space_freed
            .wait_for(&mut state, timeout)
            .timed_out()
    }

    pub fn mark_data_persisted(&self, seq: u64) -> Result<(), NvError> {
        let mut state = self.inner.lock();
        let entry = Self::entry_mut(&mut state, seq)?;
        entry.status = EntryStatus::DataPersisted;
        self.persist(&state);
        Ok(())
    }

    pub fn mark_acked(&self, seq: u64) {
        let mut state = self.inner.lock();
        if let Ok(entry) = Self::entry_mut(&mut state, seq) {
            entry.acked_at = Some(Instant::now());
        }
    }

    pub fn set_tree_done(&self, seq: u64) -> Result<(), NvError> {
        let mut state = self.inner.lock();
        let entry = Self::entry_mut(&mut state, seq)?;
        entry.tree_done = true;
        entry.tree_updated_at = Some(Instant::now());
        Ok(())
    }

    /// Atomic commit of a new root together with the TREE_UPDATED flips for
    /// `seqs`. Returns `(seq, data_set, sector)` for retirement checks.
    pub fn commit_tree_updates(
        &self,
        root: [u8; 16],
        seqs: &[u64],
    ) -> Vec<(u64, u64, u64)> {
        let mut state = self.inner.lock();
        state.root = root;
        let mut committed = Vec::with_capacity(seqs.len());
        for &seq in seqs {
            if let Ok(entry) = Self::entry_mut(&mut state, seq) {
                entry.status = EntryStatus::TreeUpdated;
                committed.push((entry.seq, entry.data_set, entry.sector));
            }
        }
        self.persist(&state);
        committed
    }

    /// Back out an entry whose write never happened (journal-full or device
    /// failure before persist).
    pub fn abort(&self, seq: u64) -> Result<(), NvError> {
        let mut state = self.inner.lock();
        let idx = state
            .entries
            .iter()
            .position(|e| e.seq == seq)
            .ok_or(NvError::UnknownEntry(seq))?;
        state.entries.remove(idx);
        self.persist(&state);
        self.space_freed.notify_all();
        Ok(())
    }

    /// Recovery epilogue: adopt the rebuilt root and clear the journal in
    /// one commit.
    pub fn complete_recovery(&self, root: [u8; 16]) {
        let mut state = self.inner.lock();
        state.root = root;
        state.entries.clear();
        self.persist(&state);
        self.space_freed.notify_all();
    }

    /// Remove a TREE_UPDATED entry whose aggregated sector reached the disk.
    pub fn retire(&self, seq: u64) -> Result<(u64, u64), NvError> {
        let mut state = self.inner.lock();
        let idx = state
            .entries
            .iter()
            .position(|e| e.seq == seq)
            .ok_or(NvError::UnknownEntry(seq))?;
        debug_assert_eq!(state.entries[idx].status, EntryStatus::TreeUpdated);
        let entry = state.entries.remove(idx);
        self.persist(&state);
        self.space_freed.notify_all();
        Ok((entry.sector, entry.data_set))
    }

    pub fn entries(&self) -> Vec<JournalEntry> {
        self.inner.lock().entries.clone()
    }

    /// Count of entries whose write was acknowledged before its tree update
    /// committed (the latency hiding EC buys).
    pub fn overlap_evidence(&self) -> u64 {
        let state = self.inner.lock();
        state
            .entries
            .iter()
            .filter(|e| match (e.acked_at, e.tree_updated_at) {
                (Some(a), Some(t)) => a < t,
                (Some(_), None) => true,
                _ => false,
            })
            .count() as u64
    }

    fn entry_mut<'a>(state: &'a mut NvState, seq: u64) -> Result<&'a mut JournalEntry, NvError> {
        state
            .entries
            .iter_mut()
            .find(|e| e.seq == seq)
            .ok_or(NvError::UnknownEntry(seq))
    }

    fn persist(&self, state: &NvState) {
        let path = self.path.lock();
        if let Some(path) = path.as_ref() {
            let _ = Self::write_atomic(path, state);
        }
    }

    /// Serialize to `path` with atomic replace-on-commit.
    pub fn save(&self, path: &Path) -> Result<(), NvError> {
        let state = self.inner.lock();
        Self::write_atomic(path, &state)
    }

    fn write_atomic(path: &Path, state: &NvState) -> Result<(), NvError> {
        let mut out = Vec::with_capacity(NV_HEADER_LEN + state.entries.len() * JOURNAL_ENTRY_LEN);
        out.extend_from_slice(&NV_MAGIC);
        out.push(NV_VERSION);
        out.push(state.provisioned as u8);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&state.root);
        out.extend_from_slice(&state.freshness_key);
        out.extend_from_slice(&state.seq.to_le_bytes());
        out.extend_from_slice(&state.capacity.to_le_bytes());
        out.extend_from_slice(&(state.entries.len() as u32).to_le_bytes());
        for entry in &state.entries {
            out.extend_from_slice(&entry.encode());
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn decode_state(bytes: &[u8], data_set_size: u32) -> Result<NvState, NvError> {
        if bytes.len() < NV_HEADER_LEN {
            return Err(NvError::Corrupt("short header"));
        }
        if bytes[0..4] != NV_MAGIC {
            return Err(NvError::Corrupt("magic"));
        }
        if bytes[4] != NV_VERSION {
            return Err(NvError::Corrupt("version"));
        }
        let provisioned = bytes[5] != 0;
        let root: [u8; 16] = bytes[8..24].try_into().unwrap();
        let freshness_key: [u8; 32] = bytes[24..56].try_into().unwrap();
        let seq = u64::from_le_bytes(bytes[56..64].try_into().unwrap());
        let capacity = u32::from_le_bytes(bytes[64..68].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[68..72].try_into().unwrap()) as usize;
        if bytes.len() != NV_HEADER_LEN + count * JOURNAL_ENTRY_LEN {
            return Err(NvError::Corrupt("length"));
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let at = NV_HEADER_LEN + i * JOURNAL_ENTRY_LEN;
            // Ring order encodes recency; synthesize ascending seqs below the
            // persisted high-water mark.
            let entry_seq = seq.saturating_sub((count - i) as u64) + 1;
            entries.push(JournalEntry::decode(
                &bytes[at..at + JOURNAL_ENTRY_LEN],
                entry_seq,
                data_set_size,
            )?);
        }
        Ok(NvState {
            provisioned,
            root,
            freshness_key,
            seq,
            capacity,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_transitions_and_retire() {
        let nv = NvStore::new(4, 340);
        let seq = nv.append(0, 1, 700, 0, 9).unwrap();
        assert_eq!(nv.entries()[0].status, EntryStatus::Pending);
        assert_eq!(nv.entries()[0].data_set, 2);
        nv.mark_data_persisted(seq).unwrap();
        assert_eq!(nv.entries()[0].status, EntryStatus::DataPersisted);
        let committed = nv.commit_tree_updates([7; 16], &[seq]);
        assert_eq!(committed, vec![(seq, 2, 700)]);
        assert_eq!(nv.root(), [7; 16]);
        nv.retire(seq).unwrap();
        assert_eq!(nv.journal_len(), 0);
    }

    #[test]
    fn full_ring_rejects_appends() {
        let nv = NvStore::new(2, 340);
        nv.append(0, 1, 0, 0, 1).unwrap();
        nv.append(0, 1, 1, 0, 1).unwrap();
        assert!(matches!(
            nv.append(0, 1, 2, 0, 1),
            Err(NvError::JournalFull(2))
        ));
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nv.bin");
        let nv = NvStore::new(8, 340);
        nv.provision(&FreshnessKey::from_bytes([3; 32]), [5; 16]);
        let s1 = nv.append(0, 2, 10, 0, 11).unwrap();
        let _s2 = nv.append(0, 2, 350, 4, 12).unwrap();
        nv.mark_data_persisted(s1).unwrap();
        nv.save(&path).unwrap();

        let loaded = NvStore::load(&path, 8, 340).unwrap();
        let state = loaded.snapshot();
        assert!(state.provisioned);
        assert_eq!(state.root, [5; 16]);
        assert_eq!(state.freshness_key, [3; 32]);
        assert_eq!(state.entries.len(), 2);
        assert_eq!(state.entries[0].status, EntryStatus::DataPersisted);
        assert_eq!(state.entries[0].sector, 10);
        assert_eq!(state.entries[1].status, EntryStatus::Pending);
        assert_eq!(state.entries[1].data_set, 1);

        // Byte-identical resave.
        let path2 = dir.path().join("nv2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nv.bin");
        let nv = NvStore::new(8, 340);
        nv.provision(&FreshnessKey::from_bytes([3; 32]), [5; 16]);
        nv.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(NvStore::load(&path, 8, 340).is_err());
    }
}
