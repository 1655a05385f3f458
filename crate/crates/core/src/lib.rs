//! Core layout and cryptography for the sealstor stack: sector addressing,
//! the bit-exact metadata codecs, the key-derivation chain, AEAD sealing with
//! the split nonce, and the write-capacity calculator.

pub mod capacity;
pub mod crypto;
pub mod layout;

pub use layout::{DeviceGeometry, LayoutError, SectorMetadata16, SectorMetadata64};

/// Ciphertext plus metadata: the unit that travels between host and storage
/// node and is persisted to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedSector {
    pub data: Vec<u8>,
    pub metadata: SectorMetadata64,
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::PathBuf;

    /// Load a hex golden vector from the repository `testdata/` tree.
    pub fn read_golden(rel: &str) -> Vec<u8> {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../testdata")
            .join(rel);
        let text = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("missing golden vector {}: {e}", path.display()));
        let hex_str: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .collect::<Vec<_>>()
            .join("");
        let hex_str: String = hex_str.chars().filter(|c| !c.is_whitespace()).collect();
        hex::decode(hex_str).expect("golden vector is valid hex")
    }
}
