//! Host-side engine: seals writes with leased counters, verifies and opens
//! reads, rolls data keys, and attaches network-freshness protection.
//!
//! Two backends share the sealing logic: `Remote` frames requests to a
//! storage-node engine (full freshness), `Direct` writes sealed sectors
//! straight to a local device (confidentiality and integrity only).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use sealstor_blockdev::{DeviceError, SectorRecord, SimDevice};
use sealstor_core::crypto::{
    ct_eq, derive_data_key, network_mac, CipherSuite, CryptoError, DeviceKey, SectorSealer,
};
use sealstor_core::layout::{SectorMetadata64, NET_COUNTER_MAX};
use sealstor_core::DeviceGeometry;
use sealstor_kbs::{KbsClient, LeaseRange};
use sealstor_transport::{
    BodyReader, BodyWriter, Frame, FrameType, RejectCode, RpcClient, TransportError,
};

use crate::pool::{CounterPool, PoolError};
use crate::stats::EngineStats;
use crate::window::ReplayWindow;

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("counter pool exhausted: {0}")]
    Exhausted(#[from] PoolError),
    #[error("integrity failure on sector {sector}")]
    Integrity { sector: u64 },
    #[error("network freshness failure{}", sector.map(|s| format!(" on sector {s}")).unwrap_or_default())]
    NetworkFreshness { sector: Option<u64> },
    #[error("request rejected ({code:?}) on sector {sector}: {message}")]
    Rejected {
        code: RejectCode,
        sector: u64,
        message: String,
    },
    #[error("transport failure: {0}")]
    Transport(#[from] TransportError),
    #[error("device failure: {0}")]
    Device(#[from] DeviceError),
    #[error("session counter space exhausted; session must roll")]
    SessionExpired,
    #[error("bad request: {0}")]
    BadRequest(&'static str),
    #[error("crypto failure: {0}")]
    Crypto(#[from] CryptoError),
}

pub struct RemoteBackend {
    pub rpc: RpcClient,
    pub recv_window: Mutex<ReplayWindow>,
    pub j_send: AtomicU64,
}

pub enum Backend {
    Remote(RemoteBackend),
    Direct(Arc<SimDevice>),
}

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub device_id: String,
    pub lessee_id: String,
    /// Refill when the pool drops below this many counters.
    pub watermark: u64,
    /// Units requested per lease.
    pub lease_units: u64,
    /// Writes per data key before automatic rolling.
    pub key_write_budget: u64,
    /// Record (key_id, sector, counter) for every seal, for uniqueness
    /// audits.
    pub record_nonce_trace: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            device_id: "dev0".to_string(),
            lessee_id: "local-0".to_string(),
            watermark: 1024,
            lease_units: sealstor_kbs::LEASE_UNITS_1TB,
            key_write_budget: u64::MAX,
            record_nonce_trace: false,
        }
    }
}

struct KeyState {
    key_id: u32,
    writes_with_key: u64,
    sealers: HashMap<u32, Arc<SectorSealer>>,
}

/// Per-sector outcome of a read: unwritten sectors come back zero-filled.
#[derive(Debug)]
pub struct ReadOutcome {
    pub data: Vec<u8>,
    pub unwritten: Vec<bool>,
}

pub struct LocalEngine {
    suite: CipherSuite,
    geom: DeviceGeometry,
    cfg: LocalConfig,
    device_key: DeviceKey,
    keys: Mutex<KeyState>,
    pool: CounterPool,
    kbs: Option<Arc<KbsClient>>,
    backend: Backend,
    stats: Arc<EngineStats>,
    nonce_trace: Mutex<Vec<(u32, u64, u64)>>,
}

impl LocalEngine {
    pub fn new(
        suite: CipherSuite,
        geom: DeviceGeometry,
        cfg: LocalConfig,
        device_key: DeviceKey,
        kbs: Option<Arc<KbsClient>>,
        backend: Backend,
    ) -> Self {
        let pool = CounterPool::new(cfg.watermark, cfg.lease_units);
        Self {
            suite,
            geom,
            cfg,
            device_key,
            keys: Mutex::new(KeyState {
                key_id: 0,
                writes_with_key: 0,
                sealers: HashMap::new(),
            }),
            pool,
            kbs,
            backend,
            stats: Arc::new(EngineStats::default()),
        nonce_trace: Mutex::new(Vec::new()),
        }
    }

    pub fn stats(&self) -> Arc<EngineStats> {
        Arc::clone(&self.stats)
    }

    pub fn pool(&self) -> &CounterPool {
        &self.pool
    }

    pub fn geometry(&self) -> DeviceGeometry {
        self.geom
    }

    pub fn current_key_id(&self) -> u32 {
        self.keys.lock().key_id
    }

    /// Roll to the next data key; older key ids remain readable.
    pub fn roll_key(&self) {
        let mut keys = self.keys.lock();
        keys.key_id += 1;
        keys.writes_with_key = 0;
    }

    pub fn nonce_trace(&self) -> Vec<(u32, u64, u64)> {
        self.nonce_trace.lock().clone()
    }

    fn sealer_for(&self, key_id: u32) -> Arc<SectorSealer> {
        let mut keys = self.keys.lock();
        Arc::clone(keys.sealers.entry(key_id).or_insert_with(|| {
            let data_key = derive_data_key(&self.suite, &self.device_key, key_id);
            Arc::new(SectorSealer::new(&self.suite, &data_key))
        }))
    }

    fn take_counters(&self, count: u64) -> Result<Vec<u64>, LocalError> {
        let kbs = self.kbs.clone();
        let device_id = self.cfg.device_id.clone();
        let lessee_id = self.cfg.lessee_id.clone();
        let mut refill = move |units: u64| -> Option<Vec<LeaseRange>> {
            let kbs = kbs.as_ref()?;
            kbs.lease(&device_id, &lessee_id, units).ok()
        };
        Ok(self.pool.take(count, &mut refill)?)
    }

    /// Seal and submit `payload` (a multiple of the sector size) at
    /// `start`. Completion means the remote acknowledged every sector; on
    /// any earlier failure nothing was transmitted.
    pub fn write(&self, start: u64, payload: &[u8]) -> Result<(), LocalError> {
        let sector_len = self.geom.sector_bytes() as usize;
        if payload.is_empty() || payload.len() % sector_len != 0 {
            return Err(LocalError::BadRequest("payload must be whole sectors"));
        }
        let count = (payload.len() / sector_len) as u64;
        if start + count > self.geom.data_sector_count() {
            return Err(LocalError::BadRequest("write beyond device"));
        }
        let counters = self.take_counters(count)?;
        let key_id = {
            let mut keys = self.keys.lock();
            if keys.writes_with_key.saturating_add(count) > self.cfg.key_write_budget {
                keys.key_id += 1;
                keys.writes_with_key = 0;
            }
            keys.writes_with_key += count;
            keys.key_id
        };
        let sealer = self.sealer_for(key_id);

        let mut sealed: Vec<(Vec<u8>, SectorMetadata64)> = Vec::with_capacity(count as usize);
        for (i, chunk) in payload.chunks_exact(sector_len).enumerate() {
            let sector = start + i as u64;
            let counter = counters[i];
            let (ciphertext, tag) = sealer.seal(sector, counter, chunk)?;
            if self.cfg.record_nonce_trace {
                self.nonce_trace.lock().push((key_id, sector, counter));
            }
            sealed.push((
                ciphertext,
                SectorMetadata64 {
                    iv_counter: counter,
                    key_id,
                    aead_tag: tag,
                    freshness_tag: [0; 16],
                    net_mac: [0; 8],
                    net_counter: 0,
                },
            ));
        }

        match &self.backend {
            Backend::Remote(remote) => {
                // Attach network freshness; j issuance is totally ordered.
                let base_j = remote.j_send.fetch_add(count, Ordering::Relaxed);
                if base_j + count > NET_COUNTER_MAX {
                    return Err(LocalError::SessionExpired);
                }
                for (i, (_, meta)) in sealed.iter_mut().enumerate() {
                    let j = base_j + i as u64;
                    meta.net_counter = j;
                    meta.net_mac =
                        network_mac(&self.suite, &remote.rpc.session().net_key, meta.iv_counter, j)?;
                }
                let device_id = self.cfg.device_id.clone();
                let record_len = self.geom.record_bytes() as usize;
                let reply = remote.rpc.call(FrameType::Write, |request_id| {
                    let mut body = BodyWriter::with_capacity(
                        26 + device_id.len() + sealed.len() * record_len,
                    );
                    body.put_u64(request_id)
                        .put_bytes(device_id.as_bytes())
                        .put_u64(start)
                        .put_u32(sealed.len() as u32);
                    for (data, meta) in &sealed {
                        body.put_raw(data);
                        body.put_raw(&meta.encode().expect("valid fields"));
                    }
                    body.finish()
                })?;
                self.expect_ack(reply)?;
            }
            Backend::Direct(device) => {
                let records: Vec<SectorRecord> = sealed
                    .iter()
                    .map(|(data, meta)| SectorRecord {
                        data: data.clone(),
                        metadata: meta.stripped().encode().expect("valid fields").to_vec(),
                    })
                    .collect();
                let physical = self
                    .geom
                    .data_to_physical(start)
                    .map_err(|_| LocalError::BadRequest("write beyond device"))?;
                device.write_sectors(physical, &records)?;
            }
        }
        EngineStats::bump(&self.stats.writes);
        EngineStats::add(&self.stats.sectors_written, count);
        Ok(())
    }

    /// Read and verify `count` sectors from `start`. Delivers plaintext
    /// only when every check passes; unwritten sectors come back zeroed and
    /// flagged.
    pub fn read(&self, start: u64, count: u32) -> Result<ReadOutcome, LocalError> {
        if count == 0 {
            return Err(LocalError::BadRequest("empty read"));
        }
        if start + count as u64 > self.geom.data_sector_count() {
            return Err(LocalError::BadRequest("read beyond device"));
        }
        match &self.backend {
            Backend::Remote(remote) => self.read_remote(remote, start, count),
            Backend::Direct(device) => self.read_direct(device, start, count),
        }
    }

    fn read_remote(
        &self,
        remote: &RemoteBackend,
        start: u64,
        count: u32,
    ) -> Result<ReadOutcome, LocalError> {
        let device_id = self.cfg.device_id.clone();
        let reply = remote.rpc.call(FrameType::Read, |request_id| {
            let mut body = BodyWriter::new();
            body.put_u64(request_id)
                .put_bytes(device_id.as_bytes())
                .put_u64(start)
                .put_u32(count);
            body.finish()
        })?;
        let body = match reply.frame_type {
            FrameType::ReadResp => reply.body,
            FrameType::Reject => return Err(self.reject_error(&reply.body)),
            _ => {
                return Err(LocalError::Transport(TransportError::Protocol(
                    "unexpected response type".into(),
                )))
            }
        };
        let mut reader = BodyReader::new(&body);
        let _request_id = reader.u64().map_err(TransportError::Frame)?;
        let got = reader.u32().map_err(TransportError::Frame)?;
        if got != count {
            return Err(LocalError::Transport(TransportError::Protocol(
                "short read response".into(),
            )));
        }
        let sector_len = self.geom.sector_bytes() as usize;
        let record_len = self.geom.record_bytes() as usize;
        let records = reader
            .fixed(record_len * count as usize)
            .map_err(TransportError::Frame)?;
        reader.expect_end().map_err(TransportError::Frame)?;

        // Parse metadata and apply the response replay window atomically.
        let mut metas = Vec::with_capacity(count as usize);
        for i in 0..count as usize {
            let meta_bytes = &records[i * record_len + sector_len..(i + 1) * record_len];
            let meta = SectorMetadata64::decode(meta_bytes)
                .map_err(|_| LocalError::NetworkFreshness {
                    sector: Some(start + i as u64),
                })?;
            metas.push(meta);
        }
        let counters: Vec<u64> = metas.iter().map(|m| m.net_counter).collect();
        if !remote.recv_window.lock().accept_batch(&counters) {
            EngineStats::bump(&self.stats.window_rejects);
            return Err(LocalError::NetworkFreshness { sector: None });
        }

        let mut data = vec![0u8; sector_len * count as usize];
        let mut unwritten = vec![false; count as usize];
        let net_key = &remote.rpc.session().net_key;
        for (i, meta) in metas.iter().enumerate() {
            let sector = start + i as u64;
            let expected = network_mac(&self.suite, net_key, meta.iv_counter, meta.net_counter)?;
            if !ct_eq(&expected, &meta.net_mac) {
                EngineStats::bump(&self.stats.mac_rejects);
                return Err(LocalError::NetworkFreshness {
                    sector: Some(sector),
                });
            }
            let record = &records[i * record_len..(i + 1) * record_len];
            if meta.stripped().is_zero() {
                unwritten[i] = true;
                EngineStats::bump(&self.stats.unwritten_reads);
                continue;
            }
            let sealer = self.sealer_for(meta.key_id);
            let plain = sealer
                .open(sector, meta.iv_counter, &record[..sector_len], &meta.aead_tag)
                .map_err(|_| LocalError::Integrity { sector })?;
            data[i * sector_len..(i + 1) * sector_len].copy_from_slice(&plain);
        }
        EngineStats::bump(&self.stats.reads);
        EngineStats::add(&self.stats.sectors_read, count as u64);
        Ok(ReadOutcome { data, unwritten })
    }

    fn read_direct(
        &self,
        device: &SimDevice,
        start: u64,
        count: u32,
    ) -> Result<ReadOutcome, LocalError> {
        let physical = self
            .geom
            .data_to_physical(start)
            .map_err(|_| LocalError::BadRequest("read beyond device"))?;
        let records = device.read_sectors(physical, count)?;
        let sector_len = self.geom.sector_bytes() as usize;
        let mut data = vec![0u8; sector_len * count as usize];
        let mut unwritten = vec![false; count as usize];
        for (i, record) in records.iter().enumerate() {
            let sector = start + i as u64;
            let meta = SectorMetadata64::decode(&record.metadata)
                .map_err(|_| LocalError::Integrity { sector })?;
            if meta.is_zero() {
                unwritten[i] = true;
                EngineStats::bump(&self.stats.unwritten_reads);
                continue;
            }
            let sealer = self.sealer_for(meta.key_id);
            let plain = sealer
                .open(sector, meta.iv_counter, &record.data, &meta.aead_tag)
                .map_err(|_| LocalError::Integrity { sector })?;
            data[i * sector_len..(i + 1) * sector_len].copy_from_slice(&plain);
        }
        EngineStats::bump(&self.stats.reads);
        EngineStats::add(&self.stats.sectors_read, count as u64);
        Ok(ReadOutcome { data, unwritten })
    }

    /// Flush: drain the remote (journal empty, caches written back) or sync
    /// the local device.
    pub fn flush(&self) -> Result<(), LocalError> {
        match &self.backend {
            Backend::Remote(remote) => {
                let device_id = self.cfg.device_id.clone();
                let reply = remote.rpc.call(FrameType::Drain, |request_id| {
                    let mut body = BodyWriter::new();
                    body.put_u64(request_id).put_bytes(device_id.as_bytes());
                    body.finish()
                })?;
                self.expect_ack(reply)
            }
            Backend::Direct(device) => {
                device.flush()?;
                Ok(())
            }
        }
    }

    /// Shutdown step: hand unissued counter ranges back to the broker.
    pub fn return_leases(&self) -> Result<(), LocalError> {
        let ranges = self.pool.drain_ranges();
        if ranges.is_empty() {
            return Ok(());
        }
        if let Some(kbs) = &self.kbs {
            kbs.give_back(&self.cfg.device_id, &self.cfg.lessee_id, &ranges)
                .map_err(|_| LocalError::BadRequest("lease return failed"))?;
        }
        Ok(())
    }

    fn expect_ack(&self, reply: Frame) -> Result<(), LocalError> {
        match reply.frame_type {
            FrameType::Ack => Ok(()),
            FrameType::Reject => Err(self.reject_error(&reply.body)),
            _ => Err(LocalError::Transport(TransportError::Protocol(
                "unexpected response type".into(),
            ))),
        }
    }

    fn reject_error(&self, body: &[u8]) -> LocalError {
        let mut reader = BodyReader::new(body);
        let mut parse = || -> Result<(RejectCode, u64, String), sealstor_transport::FrameError> {
            let _request_id = reader.u64()?;
            let code = RejectCode::from_u8(reader.u8()?)
                .ok_or(sealstor_transport::FrameError::MalformedBody)?;
            let sector = reader.u64()?;
            let message = String::from_utf8_lossy(reader.bytes()?).into_owned();
            Ok((code, sector, message))
        };
        match parse() {
            Ok((code, sector, message)) => LocalError::Rejected {
                code,
                sector,
                message,
            },
            Err(e) => LocalError::Transport(TransportError::Frame(e)),
        }
    }
}
