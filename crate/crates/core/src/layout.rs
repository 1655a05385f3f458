//! Addressing math for data sets and the bit-exact per-sector metadata codecs.
//!
//! A device of `B` sectors is split into a metadata region of `D` sectors at
//! the front and `B - D` data sectors behind it. Every group of `S`
//! consecutive data sectors (a *data set*) shares one metadata sector that
//! aggregates their IV counters. `D` is the minimal count satisfying
//! `B - D <= D * S`, i.e. `D = ceil(B / (S + 1))`.
//!
//! The byte layouts produced here are normative for both the backing file and
//! the wire; see `docs/formats.md`.

use thiserror::Error;

/// Default sector payload size in bytes. Other sizes are rejected.
pub const SECTOR_BYTES: u32 = 4096;
/// Extended per-sector metadata size for the full format.
pub const METADATA64_LEN: usize = 64;
/// Extended per-sector metadata size for the legacy format.
pub const METADATA16_LEN: usize = 16;
/// Default number of data sectors per data set (how many 8-byte IV slots fit
/// in a 4096-byte sector with room to spare for a 12-byte AEAD IV's worth of
/// alignment; 340 * 8 = 2720 bytes).
pub const DEFAULT_DATA_SET_SIZE: u32 = 340;
/// IV counters are 58-bit values.
pub const IV_COUNTER_MAX: u64 = (1 << 58) - 1;
/// Network freshness counters are 48-bit values.
pub const NET_COUNTER_MAX: u64 = (1 << 48) - 1;
/// Legacy 16-byte metadata stores a 40-bit IV counter.
pub const IV_COUNTER16_MAX: u64 = (1 << 40) - 1;
/// Legacy 16-byte metadata stores a 24-bit key id.
pub const KEY_ID16_MAX: u32 = (1 << 24) - 1;
/// Sector indices must fit the 38 nonce bits reserved for them.
pub const SECTOR_INDEX_MAX: u64 = (1 << 38) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("device too small: {total_sectors} sectors cannot hold a data set of {data_set_size}")]
    GeometryTooSmall {
        total_sectors: u64,
        data_set_size: u32,
    },
    #[error("unsupported sector size {0} (only 4096-byte sectors are supported)")]
    UnsupportedSectorSize(u32),
    #[error("unsupported metadata size {0} (must be 16 or 64)")]
    UnsupportedMetadataSize(u32),
    #[error("data set size {0} does not fit a metadata sector")]
    DataSetSizeTooLarge(u32),
    #[error("device of {0} sectors exceeds the 38-bit sector address space")]
    DeviceTooLarge(u64),
    #[error("data sector index {index} out of range (device has {limit} data sectors)")]
    SectorOutOfRange { index: u64, limit: u64 },
    #[error("metadata buffer has {got} bytes, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("reserved metadata bytes are not zero")]
    NonzeroReserved,
    #[error("field {field} value {value} exceeds its {bits}-bit range")]
    FieldOverflow {
        field: &'static str,
        value: u64,
        bits: u32,
    },
}

/// Immutable layout description of one simulated device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceGeometry {
    total_sectors: u64,
    sector_bytes: u32,
    metadata_bytes: u32,
    data_set_size: u32,
    data_set_count: u64,
}

impl DeviceGeometry {
    pub fn new(
        total_sectors: u64,
        sector_bytes: u32,
        metadata_bytes: u32,
        data_set_size: u32,
    ) -> Result<Self, LayoutError> {
        if sector_bytes != SECTOR_BYTES {
            return Err(LayoutError::UnsupportedSectorSize(sector_bytes));
        }
        if metadata_bytes != METADATA64_LEN as u32 && metadata_bytes != METADATA16_LEN as u32 {
            return Err(LayoutError::UnsupportedMetadataSize(metadata_bytes));
        }
        if data_set_size == 0 || data_set_size as u64 * 8 > sector_bytes as u64 {
            return Err(LayoutError::DataSetSizeTooLarge(data_set_size));
        }
        if total_sectors > SECTOR_INDEX_MAX + 1 {
            return Err(LayoutError::DeviceTooLarge(total_sectors));
        }
        let data_set_count = compute_data_sets(total_sectors, data_set_size)?;
        Ok(Self {
            total_sectors,
            sector_bytes,
            metadata_bytes,
            data_set_size,
            data_set_count,
        })
    }

    /// Geometry with the default 4096-byte sectors, 64-byte metadata, and
    /// 340-sector data sets.
    pub fn with_defaults(total_sectors: u64) -> Result<Self, LayoutError> {
        Self::new(
            total_sectors,
            SECTOR_BYTES,
            METADATA64_LEN as u32,
            DEFAULT_DATA_SET_SIZE,
        )
    }

    pub fn total_sectors(&self) -> u64 {
        self.total_sectors
    }

    pub fn sector_bytes(&self) -> u32 {
        self.sector_bytes
    }

    pub fn metadata_bytes(&self) -> u32 {
        self.metadata_bytes
    }

    pub fn data_set_size(&self) -> u32 {
        self.data_set_size
    }

    /// Number of metadata sectors (= number of data sets), `D`.
    pub fn data_set_count(&self) -> u64 {
        self.data_set_count
    }

    /// Number of data sectors, `B - D`.
    pub fn data_sector_count(&self) -> u64 {
        self.total_sectors - self.data_set_count
    }

    /// Bytes of one on-disk record: sector payload plus inline metadata.
    pub fn record_bytes(&self) -> u32 {
        self.sector_bytes + self.metadata_bytes
    }

    /// Total backing-file size in bytes.
    pub fn device_bytes(&self) -> u64 {
        self.total_sectors * self.record_bytes() as u64
    }

    /// Physical sector holding data sector `i`.
    pub fn data_to_physical(&self, index: u64) -> Result<u64, LayoutError> {
        if index >= self.data_sector_count() {
            return Err(LayoutError::SectorOutOfRange {
                index,
                limit: self.data_sector_count(),
            });
        }
        Ok(self.data_set_count + index)
    }

    /// Metadata sector and in-sector IV slot for data sector `i`:
    /// `(i / S, i mod S)`.
    pub fn metadata_location(&self, index: u64) -> Result<(u64, u32), LayoutError> {
        if index >= self.data_sector_count() {
            return Err(LayoutError::SectorOutOfRange {
                index,
                limit: self.data_sector_count(),
            });
        }
        let set = index / self.data_set_size as u64;
        let offset = (index % self.data_set_size as u64) as u32;
        Ok((set, offset))
    }

    /// Data sectors covered by data set `set`; the trailing set may be
    /// partial.
    pub fn sectors_in_set(&self, set: u64) -> u32 {
        let start = set * self.data_set_size as u64;
        let end = self.data_sector_count().min(start + self.data_set_size as u64);
        end.saturating_sub(start) as u32
    }

    /// Fraction of the device spent on metadata sectors, `D / B`.
    pub fn metadata_overhead(&self) -> f64 {
        self.data_set_count as f64 / self.total_sectors as f64
    }
}

/// Minimal number of data sets `D` such that `B - D <= D * S`.
pub fn compute_data_sets(total_sectors: u64, data_set_size: u32) -> Result<u64, LayoutError> {
    let s = data_set_size as u64;
    if data_set_size == 0 || total_sectors <= s {
        return Err(LayoutError::GeometryTooSmall {
            total_sectors,
            data_set_size,
        });
    }
    // ceil(B / (S + 1)); B <= 2^38 so the addition cannot overflow.
    Ok((total_sectors + s) / (s + 1))
}

/// Full 64-byte per-sector metadata.
///
/// Offsets (little-endian): 0..8 `iv_counter`, 8..12 `key_id`,
/// 12..28 `aead_tag`, 28..44 `freshness_tag`, 44..52 `net_mac`,
/// 52..58 `net_counter`, 58..64 reserved (zero). The persisted form carries
/// `net_mac`/`net_counter` zeroed; they are transport-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SectorMetadata64 {
    pub iv_counter: u64,
    pub key_id: u32,
    pub aead_tag: [u8; 16],
    pub freshness_tag: [u8; 16],
    pub net_mac: [u8; 8],
    pub net_counter: u64,
}

impl SectorMetadata64 {
    pub fn encode(&self) -> Result<[u8; METADATA64_LEN], LayoutError> {
        if self.iv_counter > IV_COUNTER_MAX {
            return Err(LayoutError::FieldOverflow {
                field: "iv_counter",
                value: self.iv_counter,
                bits: 58,
            });
        }
        if self.net_counter > NET_COUNTER_MAX {
            return Err(LayoutError::FieldOverflow {
                field: "net_counter",
                value: self.net_counter,
                bits: 48,
            });
        }
        let mut out = [0u8; METADATA64_LEN];
        out[0..8].copy_from_slice(&self.iv_counter.to_le_bytes());
        out[8..12].copy_from_slice(&self.key_id.to_le_bytes());
        out[12..28].copy_from_slice(&self.aead_tag);
        out[28..44].copy_from_slice(&self.freshness_tag);
        out[44..52].copy_from_slice(&self.net_mac);
        out[52..58].copy_from_slice(&self.net_counter.to_le_bytes()[..6]);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LayoutError> {
        if bytes.len() != METADATA64_LEN {
            return Err(LayoutError::BadLength {
                expected: METADATA64_LEN,
                got: bytes.len(),
            });
        }
        if bytes[58..64] != [0u8; 6] {
            return Err(LayoutError::NonzeroReserved);
        }
        let iv_counter = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        if iv_counter > IV_COUNTER_MAX {
            return Err(LayoutError::FieldOverflow {
                field: "iv_counter",
                value: iv_counter,
                bits: 58,
            });
        }
        let mut net_counter_bytes = [0u8; 8];
        net_counter_bytes[..6].copy_from_slice(&bytes[52..58]);
        Ok(Self {
            iv_counter,
            key_id: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            aead_tag: bytes[12..28].try_into().unwrap(),
            freshness_tag: bytes[28..44].try_into().unwrap(),
            net_mac: bytes[44..52].try_into().unwrap(),
            net_counter: u64::from_le_bytes(net_counter_bytes),
        })
    }

    /// Persisted form: transport fields zeroed.
    pub fn stripped(&self) -> Self {
        Self {
            net_mac: [0u8; 8],
            net_counter: 0,
            ..*self
        }
    }

    /// All-zero metadata marks a sector that has never been written.
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// Legacy 16-byte per-sector metadata for drives without 64-byte support.
///
/// Offsets (little-endian): 0..5 `iv_counter` (40-bit), 5..8 `key_id`
/// (24-bit), 8..16 truncated AEAD tag. There is no freshness tag, so devices
/// in this format cannot serve the fast read path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SectorMetadata16 {
    pub iv_counter: u64,
    pub key_id: u32,
    pub aead_tag_trunc: [u8; 8],
}

impl SectorMetadata16 {
    pub fn encode(&self) -> Result<[u8; METADATA16_LEN], LayoutError> {
        if self.iv_counter > IV_COUNTER16_MAX {
            return Err(LayoutError::FieldOverflow {
                field: "iv_counter",
                value: self.iv_counter,
                bits: 40,
            });
        }
        if self.key_id > KEY_ID16_MAX {
            return Err(LayoutError::FieldOverflow {
                field: "key_id",
                value: self.key_id as u64,
                bits: 24,
            });
        }
        let mut out = [0u8; METADATA16_LEN];
        out[0..5].copy_from_slice(&self.iv_counter.to_le_bytes()[..5]);
        out[5..8].copy_from_slice(&self.key_id.to_le_bytes()[..3]);
        out[8..16].copy_from_slice(&self.aead_tag_trunc);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LayoutError> {
        if bytes.len() != METADATA16_LEN {
            return Err(LayoutError::BadLength {
                expected: METADATA16_LEN,
                got: bytes.len(),
            });
        }
        let mut iv = [0u8; 8];
        iv[..5].copy_from_slice(&bytes[0..5]);
        let mut key = [0u8; 4];
        key[..3].copy_from_slice(&bytes[5..8]);
        Ok(Self {
            iv_counter: u64::from_le_bytes(iv),
            key_id: u32::from_le_bytes(key),
            aead_tag_trunc: bytes[8..16].try_into().unwrap(),
        })
    }

    /// Downconvert wire metadata for a legacy drive, truncating the AEAD tag
    /// and dropping the freshness and transport fields.
    pub fn from_wire(full: &SectorMetadata64) -> Result<Self, LayoutError> {
        if full.iv_counter > IV_COUNTER16_MAX {
            return Err(LayoutError::FieldOverflow {
                field: "iv_counter",
                value: full.iv_counter,
                bits: 40,
            });
        }
        if full.key_id > KEY_ID16_MAX {
            return Err(LayoutError::FieldOverflow {
                field: "key_id",
                value: full.key_id as u64,
                bits: 24,
            });
        }
        Ok(Self {
            iv_counter: full.iv_counter,
            key_id: full.key_id,
            aead_tag_trunc: full.aead_tag[..8].try_into().unwrap(),
        })
    }
}

/// Decoded aggregated-IV metadata sector.
///
/// The on-disk form is `S` little-endian 8-byte IV counters followed by zero
/// padding up to the sector size; slot `i` belongs to data sector
/// `set * S + i`. The data-set index is positional (metadata sector `d`
/// serves data set `d`) and is not serialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataSector {
    pub data_set: u64,
    pub iv_array: Vec<u64>,
}

impl MetadataSector {
    pub fn new_empty(data_set: u64, entries: u32) -> Self {
        Self {
            data_set,
            iv_array: vec![0; entries as usize],
        }
    }

    pub fn encode(&self, geom: &DeviceGeometry) -> Vec<u8> {
        let mut out = vec![0u8; geom.sector_bytes() as usize];
        for (i, iv) in self.iv_array.iter().enumerate() {
            debug_assert!(*iv <= IV_COUNTER_MAX);
            out[i * 8..(i + 1) * 8].copy_from_slice(&iv.to_le_bytes());
        }
        out
    }

    pub fn decode(data_set: u64, bytes: &[u8], geom: &DeviceGeometry) -> Result<Self, LayoutError> {
        if bytes.len() != geom.sector_bytes() as usize {
            return Err(LayoutError::BadLength {
                expected: geom.sector_bytes() as usize,
                got: bytes.len(),
            });
        }
        let entries = geom.sectors_in_set(data_set) as usize;
        let mut iv_array = Vec::with_capacity(entries);
        for i in 0..entries {
            iv_array.push(u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap()));
        }
        Ok(Self { data_set, iv_array })
    }
}
