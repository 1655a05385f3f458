//! TOML configuration for the engines, the broker, and the simulated
//! device.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use sealstor_core::crypto::{CipherSuite, CryptoError};
use sealstor_core::layout::{DEFAULT_DATA_SET_SIZE, METADATA64_LEN, SECTOR_BYTES};
use sealstor_core::{DeviceGeometry, LayoutError};

use crate::local::LocalConfig;
use crate::remote::RemoteConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad geometry: {0}")]
    Layout(#[from] LayoutError),
    #[error("bad cipher suite: {0}")]
    Crypto(#[from] CryptoError),
    #[error("bad field {field}: {reason}")]
    Invalid {
        field: &'static str,
        reason: String,
    },
}

fn default_sector_bytes() -> u32 {
    SECTOR_BYTES
}

fn default_metadata_bytes() -> u32 {
    METADATA64_LEN as u32
}

fn default_data_set_size() -> u32 {
    DEFAULT_DATA_SET_SIZE
}

#[derive(Debug, Clone, Deserialize)]
pub struct DeviceSection {
    pub path: Option<PathBuf>,
    pub sectors: u64,
    #[serde(default = "default_sector_bytes")]
    pub sector_bytes: u32,
    #[serde(default = "default_metadata_bytes")]
    pub metadata_bytes: u32,
    #[serde(default = "default_data_set_size")]
    pub data_set_size: u32,
    /// Fixed per-sector service delay in microseconds (benchmarks).
    #[serde(default)]
    pub delay_us: u64,
}

impl DeviceSection {
    pub fn geometry(&self) -> Result<DeviceGeometry, ConfigError> {
        Ok(DeviceGeometry::new(
            self.sectors,
            self.sector_bytes,
            self.metadata_bytes,
            self.data_set_size,
        )?)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CryptoSection {
    #[serde(default = "default_aead")]
    pub aead: String,
    #[serde(default = "default_hash")]
    pub hash: String,
}

fn default_aead() -> String {
    "aes-gcm".into()
}

fn default_hash() -> String {
    "blake3".into()
}

impl Default for CryptoSection {
    fn default() -> Self {
        Self {
            aead: default_aead(),
            hash: default_hash(),
        }
    }
}

impl CryptoSection {
    pub fn suite(&self) -> Result<CipherSuite, ConfigError> {
        Ok(CipherSuite::from_ids(&self.aead, &self.hash)?)
    }
}

/// Pre-shared session credentials for the mocked attestation handshake.
#[derive(Debug, Clone, Deserialize)]
pub struct SessionSection {
    pub psk_hex: String,
    pub measurement: String,
    #[serde(default)]
    pub peer_measurement: Option<String>,
}

impl SessionSection {
    pub fn credentials(&self) -> Result<sealstor_transport::Credentials, ConfigError> {
        let psk_vec = hex_decode(&self.psk_hex).map_err(|reason| ConfigError::Invalid {
            field: "session.psk_hex",
            reason,
        })?;
        let psk: [u8; 32] = psk_vec.try_into().map_err(|_| ConfigError::Invalid {
            field: "session.psk_hex",
            reason: "expected 32 bytes".into(),
        })?;
        let peer = self
            .peer_measurement
            .clone()
            .unwrap_or_else(|| self.measurement.clone());
        Ok(sealstor_transport::Credentials {
            measurement: self.measurement.clone().into_bytes(),
            peer_measurement: peer.into_bytes(),
            psk,
        })
    }
}

fn hex_decode(s: &str) -> Result<Vec<u8>, String> {
    if s.len() % 2 != 0 {
        return Err("odd hex length".into());
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| e.to_string()))
        .collect()
}

#[derive(Debug, Clone, Deserialize, Default)]
pub struct LocalSection {
    #[serde(default)]
    pub device_id: Option<String>,
    #[serde(default)]
    pub lessee_id: Option<String>,
    #[serde(default)]
    pub watermark: Option<u64>,
    #[serde(default)]
    pub lease_units: Option<u64>,
    #[serde(default)]
    pub key_write_budget: Option<u64>,
    #[serde(default)]
    pub record_nonce_trace: bool,
}

impl LocalSection {
    pub fn to_config(&self) -> LocalConfig {
        let mut cfg = LocalConfig::default();
        if let Some(v) = &self.device_id {
            cfg.device_id = v.clone();
        }
        if let Some(v) = &self.lessee_id {
            cfg.lessee_id = v.clone();
        }
        if let Some(v) = self.watermark {
            cfg.watermark = v;
        }
        if let Some(v) = self.lease_units {
            cfg.lease_units = v;
        }
        if let Some(v) = self.key_write_budget {
            cfg.key_write_budget = v;
        }
        cfg.record_nonce_trace = self.record_nonce_trace;
        cfg
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
pub struct RemoteSection {
    #[serde(default)]
    pub tree_branching: Option<u32>,
    #[serde(default)]
    pub hashers: Option<usize>,
    #[serde(default)]
    pub cache_capacity: Option<usize>,
    #[serde(default)]
    pub journal_capacity: Option<u32>,
    #[serde(default)]
    pub ec: Option<bool>,
    #[serde(default)]
    pub window_size: Option<u32>,
    #[serde(default)]
    pub refresh_on_full_path: Option<bool>,
    #[serde(default)]
    pub nv_path: Option<PathBuf>,
}

impl RemoteSection {
    pub fn to_config(&self) -> RemoteConfig {
        let mut cfg = RemoteConfig::default();
        if let Some(v) = self.tree_branching {
            cfg.tree_branching = v;
        }
        if let Some(v) = self.hashers {
            cfg.hashers = v;
        }
        if let Some(v) = self.cache_capacity {
            cfg.cache_capacity = v;
        }
        if let Some(v) = self.journal_capacity {
            cfg.journal_capacity = v;
        }
        if let Some(v) = self.ec {
            cfg.ec = v;
        }
        if let Some(v) = self.window_size {
            cfg.window_size = v;
        }
        if let Some(v) = self.refresh_on_full_path {
            cfg.refresh_on_full_path = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
pub struct KbsSection {
    #[serde(default)]
    pub state_path: Option<PathBuf>,
    #[serde(default)]
    pub listen: Option<String>,
    #[serde(default)]
    pub counter_space: Option<u64>,
}

/// Root of the engine TOML config file.
#[derive(Debug, Clone, Deserialize)]
pub struct StackConfig {
    pub device: DeviceSection,
    #[serde(default)]
    pub crypto: CryptoSection,
    pub session: SessionSection,
    #[serde(default)]
    pub local: LocalSection,
    #[serde(default)]
    pub remote: RemoteSection,
    #[serde(default)]
    pub kbs: KbsSection,
}

impl StackConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}
