//! Minimal publish/subscribe broker over TCP.
//!
//! Topics are `evt/<device>`, `cmd/<device>`, `prov/rules` and
//! `attest/<enclave_id>`; subscribers may use the `evt/+` and `cmd/+`
//! wildcards. Delivery is at-least-once with per-connection FIFO order;
//! nothing is retained.

pub mod client;
pub mod frame;
pub mod server;
pub mod topic;

pub use client::BrokerClient;
pub use frame::WireMessage;
pub use server::{bind, BrokerConfig, BrokerHandle};
pub use topic::{Topic, TopicPattern};
