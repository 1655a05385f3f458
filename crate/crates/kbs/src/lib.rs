//! Key Broker Service: tenant key custody, on-demand device-key derivation,
//! and per-device counter-range leasing with compaction.

pub mod broker;
pub mod ledger;
pub mod service;

pub use broker::{KbsError, KeyBroker};
pub use ledger::{DeviceLedger, LeaseRange, LedgerError, COUNTER_SPACE_END, LEASE_UNITS_1TB};
pub use service::{KbsClient, KbsClientError, KbsService};
