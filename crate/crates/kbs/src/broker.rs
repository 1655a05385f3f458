//! The broker proper: tenant key custody, device registration, leasing, and
//! single-writer persistence with atomic replace-on-write. Tenant storage
//! keys never leave this module; only derived device keys do.

use std::collections::BTreeMap;
use std::path::PathBuf;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sealstor_core::crypto::{derive_device_key, CipherSuite, DeviceKey, TenantStorageKey};

use crate::ledger::{DeviceLedger, LeaseRange, LedgerError};

#[derive(Debug, Error)]
pub enum KbsError {
    #[error("device {0:?} already registered")]
    DuplicateDevice(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("unknown tenant {0:?}")]
    UnknownTenant(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("state persistence failed: {0}")]
    Persist(#[from] std::io::Error),
    #[error("state file corrupt: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize, Default)]
struct BrokerState {
    /// tenant id -> hex-encoded k_s.
    tenants: BTreeMap<String, String>,
    devices: BTreeMap<String, DeviceLedger>,
}

/// Key broker. Ledger mutations are serialized per broker; queries clone
/// out of the lock.
pub struct KeyBroker {
    suite: CipherSuite,
    state: Mutex<BrokerState>,
    state_path: Option<PathBuf>,
    counter_space: u64,
}

impl KeyBroker {
    pub fn new(suite: CipherSuite) -> Self {
        Self {
            suite,
            state: Mutex::new(BrokerState::default()),
            state_path: None,
            counter_space: crate::ledger::COUNTER_SPACE_END,
        }
    }

    /// Desk-scale broker whose fresh ledgers span `[0, space_end)`.
    pub fn with_counter_space(suite: CipherSuite, space_end: u64) -> Self {
        let mut broker = Self::new(suite);
        broker.counter_space = space_end;
        broker
    }

    /// Persist to `path` on every mutation (atomic temp-file replace),
    /// loading existing state first.
    pub fn with_state_file(mut self, path: PathBuf) -> Result<Self, KbsError> {
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let state: BrokerState =
                serde_json::from_str(&text).map_err(|e| KbsError::Corrupt(e.to_string()))?;
            for ledger in state.devices.values() {
                ledger
                    .validate()
                    .map_err(KbsError::Corrupt)?;
            }
            *self.state.lock() = state;
        }
        self.state_path = Some(path);
        Ok(self)
    }

    fn persist(&self, state: &BrokerState) -> Result<(), KbsError> {
        let Some(path) = &self.state_path else {
            return Ok(());
        };
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string_pretty(state).expect("state serializes");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn register_tenant(&self, tenant_id: &str, key: TenantStorageKey) -> Result<(), KbsError> {
        let mut state = self.state.lock();
        state
            .tenants
            .insert(tenant_id.to_string(), hex::encode(key.as_bytes()));
        self.persist(&state)
    }

    /// Initialize a fresh full-range ledger for a newly discovered device.
    pub fn register_device(&self, device_id: &str) -> Result<(), KbsError> {
        let mut state = self.state.lock();
        if state.devices.contains_key(device_id) {
            return Err(KbsError::DuplicateDevice(device_id.to_string()));
        }
        state.devices.insert(
            device_id.to_string(),
            DeviceLedger::with_space(self.counter_space),
        );
        self.persist(&state)
    }

    pub fn lease_counters(
        &self,
        device_id: &str,
        lessee_id: &str,
        units: u64,
    ) -> Result<Vec<LeaseRange>, KbsError> {
        let mut state = self.state.lock();
        let ledger = state
            .devices
            .get_mut(device_id)
            .ok_or_else(|| KbsError::UnknownDevice(device_id.to_string()))?;
        let granted = ledger.lease(lessee_id, units)?;
        self.persist(&state)?;
        Ok(granted)
    }

    pub fn return_counters(
        &self,
        device_id: &str,
        lessee_id: &str,
        ranges: &[LeaseRange],
    ) -> Result<(), KbsError> {
        let mut state = self.state.lock();
        let ledger = state
            .devices
            .get_mut(device_id)
            .ok_or_else(|| KbsError::UnknownDevice(device_id.to_string()))?;
        ledger.give_back(lessee_id, ranges)?;
        self.persist(&state)
    }

    /// Derive `k_d = HMAC(k_s, device_id)` for an authenticated session.
    /// `k_s` itself never leaves the broker.
    pub fn provision_device_key(
        &self,
        tenant_id: &str,
        device_id: &str,
    ) -> Result<DeviceKey, KbsError> {
        let state = self.state.lock();
        if !state.devices.contains_key(device_id) {
            return Err(KbsError::UnknownDevice(device_id.to_string()));
        }
        let key_hex = state
            .tenants
            .get(tenant_id)
            .ok_or_else(|| KbsError::UnknownTenant(tenant_id.to_string()))?;
        let bytes: [u8; 32] = hex::decode(key_hex)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| KbsError::Corrupt("tenant key".into()))?;
        let tenant_key = TenantStorageKey::from_bytes(bytes);
        Ok(derive_device_key(&self.suite, &tenant_key, device_id.as_bytes())
            .expect("device id nonempty"))
    }

    pub fn ledger_snapshot(&self, device_id: &str) -> Result<DeviceLedger, KbsError> {
        let state = self.state.lock();
        state
            .devices
            .get(device_id)
            .cloned()
            .ok_or_else(|| KbsError::UnknownDevice(device_id.to_string()))
    }
}
