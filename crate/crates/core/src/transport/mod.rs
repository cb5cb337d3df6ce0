//! Node-to-node messaging: signed frames, deployment membership, the
//! trusted configuration service, and the fault schedule grammar the
//! simulation's adversary executes. Link scheduling itself (latency,
//! delivery order, interposition) lives with the simulation clock in the
//! harness; this module owns everything about what travels on a link.

mod config;
mod schedule;
mod wire;

pub use config::{ConfigError, ConfigService, Configuration, MatchB, NodeId};
pub use schedule::{FaultAction, FaultEntry, FaultSchedule, Link, ScheduleError};
pub use wire::{MsgType, WireError, WireMessage, HEADER_LEN, MAC_LEN};
