//! Safe write-capacity calculator for a single key.
//!
//! Sequential counters exhaust the IV space exactly: `2^d * block_bytes`.
//! Random IVs are birthday-bounded; the number of safe encryptions for a
//! collision probability `p` is `n ~= sqrt(-2 * 2^d * ln(1 - p))`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CapacityError {
    #[error("collision probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error("IV width {0} bits not supported (max 256)")]
    UnsupportedIvWidth(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteMode {
    Random,
    Sequential,
}

/// Capacities can exceed u128; results are f64 bytes, saturating here.
pub const CAPACITY_SATURATION_BYTES: f64 = f64::MAX;

/// Bytes safely writable under one key.
pub fn safe_write_capacity(
    block_bytes: u64,
    iv_bits: u32,
    mode: WriteMode,
    p: f64,
) -> Result<f64, CapacityError> {
    if iv_bits > 256 {
        return Err(CapacityError::UnsupportedIvWidth(iv_bits));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(CapacityError::InvalidProbability(p));
    }
    let encryptions = match mode {
        WriteMode::Sequential => (iv_bits as f64).exp2(),
        WriteMode::Random => (-2.0 * (iv_bits as f64).exp2() * (1.0 - p).ln()).sqrt(),
    };
    let bytes = encryptions * block_bytes as f64;
    if bytes.is_finite() {
        Ok(bytes)
    } else {
        Ok(CAPACITY_SATURATION_BYTES)
    }
}
