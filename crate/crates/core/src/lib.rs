//! Simulator of a derived eID token held in a phone's secure element.
//!
//! The crate models every party of the system (issuer, TSM, service
//! provider, eID server, offerer, host, TEE, SE) as deterministic state
//! machines exchanging bytes over a single transport, so that whole runs can
//! be replayed and inspected by an adversary model.

pub mod actors;
pub mod config;
pub mod crypto;
pub mod eac;
pub mod host;
pub mod pki;
pub mod scenario;
pub mod secure_element;
pub mod tee;
pub mod token;
pub mod transport;
pub mod wire;
pub mod world;
