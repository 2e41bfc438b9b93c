//! End-to-end encrypted trigger-action rule engine.
//!
//! Rules and device readings are only ever plaintext inside a simulated
//! trusted boundary ([`enclave::TrustedBoundary`]). Everything in transit is an
//! AES-256-GCM [`envelope::Envelope`]; rules at rest are sealed per device.

pub mod attestation;
pub mod bench;
pub mod broker;
pub mod config;
pub mod device;
pub mod enclave;
pub mod envelope;
pub mod error;
pub mod hub;
pub mod node;
pub mod rule;
pub mod trace;

pub use error::{Error, Result};
