//! Simulated block device with realistic persistence semantics, page
//! encryption, and the Merkle integrity store shared by primary and backups.
//!
//! The disk is a passive state machine: `submit` registers an operation and
//! the caller (normally the simulation clock) later applies it with
//! `complete`. Completed unflagged writes sit in a per-block volatile log
//! until a PREFLUSH completion or a crash decides their fate.

mod cipher;
mod disk;
mod image;
mod integrity;
mod superblock;

pub use cipher::{AuthFailure, CipherContext, PAGE_TAG_LEN};
pub use disk::{IoId, IoKind, IoLatency, IoResult, OutOfRange, VirtualDisk};
pub use image::{DiskImage, ImageError};
pub use integrity::{meta_pages, IntegrityFault, IntegrityStore, Leaf, MERKLE_ARITY, NODE_PAGE};
pub use superblock::Superblock;
