//! Deterministic engine and adversarial simulator for vault-based bitcoin
//! custody built on pre-signed covenant transactions (or template hashes),
//! watchtowers, and threshold multisig wallets.

pub mod chain;
pub mod covenant;
pub mod fleet;
pub mod orchestrator;
pub mod script;
pub mod threat;
pub mod txkit;
pub mod watchtower;
