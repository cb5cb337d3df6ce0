//! Replicated rollback-resistant virtual block device.
//!
//! The crate splits into an executable formal model of block-device crash
//! consistency (`model`) and the device itself: storage with integrity
//! metadata, the replication protocol, a deterministic simulation world and
//! the recovery path. The harness drives simulated clusters, records every
//! application-visible event as a history, and hands that history to the
//! model's checker.

pub mod harness;
pub mod model;
pub mod recovery;
pub mod replica;
pub mod storage;
pub mod transport;
