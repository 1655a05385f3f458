//! File-backed simulated NVMe device with extended LBAs.
//!
//! The backing file is `B` records of `sector_bytes + metadata_bytes`, the
//! metadata inline after each payload. Each record is persisted in a single
//! positioned write, so a sector and its metadata are always all-old or
//! all-new. A crash schedule drops every write after the Nth persisted
//! record and severs completions until the device is reopened.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::Mutex;
use sealstor_core::DeviceGeometry;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("physical sector {index} out of range (device has {limit})")]
    OutOfRange { index: u64, limit: u64 },
    #[error("record has {got} bytes, expected {expected}")]
    BadRecordLength { expected: usize, got: usize },
    #[error("device crashed after persisting {persisted} of {submitted} records")]
    Crashed { persisted: usize, submitted: usize },
    #[error("unknown snapshot handle {0}")]
    UnknownSnapshot(u64),
}

/// One extended-LBA record: payload plus raw inline metadata bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorRecord {
    pub data: Vec<u8>,
    pub metadata: Vec<u8>,
}

impl SectorRecord {
    pub fn zeroed(geom: &DeviceGeometry) -> Self {
        Self {
            data: vec![0; geom.sector_bytes() as usize],
            metadata: vec![0; geom.metadata_bytes() as usize],
        }
    }
}

/// Which part of a record a partial snapshot restore touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreParts {
    Data,
    Metadata,
    Both,
}

#[derive(Debug, Default)]
struct CrashState {
    /// Drop everything after this many persisted records.
    crash_after: Option<u64>,
    crashed: bool,
}

struct Inner {
    file: File,
    crash: CrashState,
    persisted_writes: u64,
    snapshots: Vec<(u64, Vec<u8>)>,
    next_snapshot: u64,
}

/// Thread-safe simulated device. Record persistence is serialized
/// internally; per-record writes are atomic with respect to crashes.
pub struct SimDevice {
    geom: DeviceGeometry,
    path: PathBuf,
    inner: Mutex<Inner>,
    /// Optional fixed service delay per sector processed, for benchmarks.
    delay: Mutex<Option<Duration>>,
}

impl SimDevice {
    /// Create a zero-filled device file.
    pub fn create(path: &Path, geom: DeviceGeometry) -> Result<Self, DeviceError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(geom.device_bytes())?;
        Ok(Self::wrap(file, path, geom))
    }

    /// Open an existing device file created with the same geometry.
    pub fn open(path: &Path, geom: DeviceGeometry) -> Result<Self, DeviceError> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len != geom.device_bytes() {
            return Err(DeviceError::BadRecordLength {
                expected: geom.device_bytes() as usize,
                got: len as usize,
            });
        }
        Ok(Self::wrap(file, path, geom))
    }

    fn wrap(file: File, path: &Path, geom: DeviceGeometry) -> Self {
        Self {
            geom,
            path: path.to_path_buf(),
            inner: Mutex::new(Inner {
                file,
                crash: CrashState::default(),
                persisted_writes: 0,
                snapshots: Vec::new(),
                next_snapshot: 1,
            }),
            delay: Mutex::new(None),
        }
    }

    pub fn geometry(&self) -> DeviceGeometry {
        self.geom
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn set_sector_delay(&self, delay: Option<Duration>) {
        *self.delay.lock() = delay;
    }

    pub fn persisted_writes(&self) -> u64 {
        self.inner.lock().persisted_writes
    }

    /// Drop every write after the `nth` persisted record (counted from the
    /// current total) until `reopen`.
    pub fn schedule_crash_after(&self, nth: u64) {
        let mut inner = self.inner.lock();
        let base = inner.persisted_writes;
        inner.crash.crash_after = Some(base + nth);
    }

    pub fn is_crashed(&self) -> bool {
        self.inner.lock().crash.crashed
    }

    /// Power-cycle: clears the crash state, keeping persisted content.
    pub fn reopen(&self) {
        let mut inner = self.inner.lock();
        inner.crash = CrashState::default();
    }

    fn apply_delay(&self, sectors: u32) {
        let delay = *self.delay.lock();
        if let Some(d) = delay {
            std::thread::sleep(d * sectors);
        }
    }

    /// Persist records starting at a physical sector, in submission order.
    /// On a scheduled crash, records before the crash point are persisted
    /// and the rest are dropped.
    pub fn write_sectors(
        &self,
        start_physical: u64,
        records: &[SectorRecord],
    ) -> Result<(), DeviceError> {
        self.check_range(start_physical, records.len() as u64)?;
        self.apply_delay(records.len() as u32);
        let record_len = self.geom.record_bytes() as usize;
        let mut inner = self.inner.lock();
        for (i, record) in records.iter().enumerate() {
            if record.data.len() != self.geom.sector_bytes() as usize
                || record.metadata.len() != self.geom.metadata_bytes() as usize
            {
                return Err(DeviceError::BadRecordLength {
                    expected: record_len,
                    got: record.data.len() + record.metadata.len(),
                });
            }
            if inner.crash.crashed
                || inner
                    .crash
                    .crash_after
                    .is_some_and(|limit| inner.persisted_writes >= limit)
            {
                inner.crash.crashed = true;
                return Err(DeviceError::Crashed {
                    persisted: i,
                    submitted: records.len(),
                });
            }
            let mut buf = Vec::with_capacity(record_len);
            buf.extend_from_slice(&record.data);
            buf.extend_from_slice(&record.metadata);
            let offset = (start_physical + i as u64) * record_len as u64;
            inner.file.write_all_at(&buf, offset)?;
            inner.persisted_writes += 1;
        }
        Ok(())
    }

    /// Read the last atomically persisted content.
    pub fn read_sectors(
        &self,
        start_physical: u64,
        count: u32,
    ) -> Result<Vec<SectorRecord>, DeviceError> {
        self.check_range(start_physical, count as u64)?;
        self.apply_delay(count);
        let record_len = self.geom.record_bytes() as usize;
        let sector_len = self.geom.sector_bytes() as usize;
        let mut buf = vec![0u8; record_len * count as usize];
        {
            let inner = self.inner.lock();
            if inner.crash.crashed {
                return Err(DeviceError::Crashed {
                    persisted: 0,
                    submitted: 0,
                });
            }
            inner
                .file
                .read_exact_at(&mut buf, start_physical * record_len as u64)?;
        }
        Ok(buf
            .chunks_exact(record_len)
            .map(|chunk| SectorRecord {
                data: chunk[..sector_len].to_vec(),
                metadata: chunk[sector_len..].to_vec(),
            })
            .collect())
    }

    /// Read a record's raw bytes straight into `buf` (payload then
    /// metadata). Hot-path variant of `read_sectors` that skips per-record
    /// allocation.
    pub fn read_raw_into(
        &self,
        start_physical: u64,
        count: u32,
        buf: &mut [u8],
    ) -> Result<(), DeviceError> {
        self.check_range(start_physical, count as u64)?;
        let record_len = self.geom.record_bytes() as usize;
        assert_eq!(buf.len(), record_len * count as usize);
        self.apply_delay(count);
        let inner = self.inner.lock();
        if inner.crash.crashed {
            return Err(DeviceError::Crashed {
                persisted: 0,
                submitted: 0,
            });
        }
        inner
            .file
            .read_exact_at(buf, start_physical * record_len as u64)?;
        Ok(())
    }

    pub fn flush(&self) -> Result<(), DeviceError> {
        let inner = self.inner.lock();
        inner.file.sync_data()?;
        Ok(())
    }

    /// Capture a byte-identical copy of the device state.
    pub fn snapshot(&self) -> Result<u64, DeviceError> {
        let mut inner = self.inner.lock();
        let mut buf = vec![0u8; self.geom.device_bytes() as usize];
        inner.file.read_exact_at(&mut buf, 0)?;
        let id = inner.next_snapshot;
        inner.next_snapshot += 1;
        inner.snapshots.push((id, buf));
        Ok(id)
    }

    /// Restore the full device image from a snapshot.
    pub fn restore(&self, id: u64) -> Result<(), DeviceError> {
        let inner = self.inner.lock();
        let image = Self::find_snapshot(&inner, id)?;
        inner.file.write_all_at(&image, 0)?;
        Ok(())
    }

    /// Adversarially restore one physical sector (or parts of it) from a
    /// snapshot, leaving the rest of the device untouched.
    pub fn restore_sector(
        &self,
        id: u64,
        physical: u64,
        parts: RestoreParts,
    ) -> Result<(), DeviceError> {
        self.check_range(physical, 1)?;
        let record_len = self.geom.record_bytes() as usize;
        let sector_len = self.geom.sector_bytes() as usize;
        let inner = self.inner.lock();
        let image = Self::find_snapshot(&inner, id)?;
        let base = physical as usize * record_len;
        let (offset, bytes) = match parts {
            RestoreParts::Data => (base, &image[base..base + sector_len]),
            RestoreParts::Metadata => (
                base + sector_len,
                &image[base + sector_len..base + record_len],
            ),
            RestoreParts::Both => (base, &image[base..base + record_len]),
        };
        inner.file.write_all_at(bytes, offset as u64)?;
        Ok(())
    }

    /// Flip bits at an absolute byte offset in the backing file (tamper
    /// harness).
    pub fn corrupt(&self, offset: u64, xor_mask: u8) -> Result<(), DeviceError> {
        let inner = self.inner.lock();
        let mut byte = [0u8];
        inner.file.read_exact_at(&mut byte, offset)?;
        byte[0] ^= xor_mask;
        inner.file.write_all_at(&byte, offset)?;
        Ok(())
    }

    /// Raw backing-file bytes, for harness inspection.
    pub fn raw_image(&self) -> Result<Vec<u8>, DeviceError> {
        let inner = self.inner.lock();
        let mut buf = vec![0u8; self.geom.device_bytes() as usize];
        inner.file.read_exact_at(&mut buf, 0)?;
        Ok(buf)
    }

    fn find_snapshot(inner: &Inner, id: u64) -> Result<Vec<u8>, DeviceError> {
        inner
            .snapshots
            .iter()
            .find(|(sid, _)| *sid == id)
            .map(|(_, image)| image.clone())
            .ok_or(DeviceError::UnknownSnapshot(id))
    }

    fn check_range(&self, start: u64, count: u64) -> Result<(), DeviceError> {
        let limit = self.geom.total_sectors();
        if start.checked_add(count).is_none_or(|end| end > limit) {
            return Err(DeviceError::OutOfRange {
                index: start + count.saturating_sub(1),
                limit,
            });
        }
        Ok(())
    }
}
