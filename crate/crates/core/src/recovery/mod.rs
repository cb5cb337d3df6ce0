//! Recovery: fencing the old configuration, choosing the node whose state
//! the cluster adopts, and rebuilding everyone else against it.
//!
//! The coordinator runs on the recovering machine. It registers a new
//! configuration with the trusted service at a ballot above every prior
//! one, pings every member of every configuration it learned about, and
//! proceeds only if at least one node from each prior configuration and
//! enough nodes from the latest one answered; the promise those answers
//! carry is what makes the old configuration unable to complete further
//! flagged writes behind its back. Among the answers it picks the node
//! with the lexicographically largest (ballot, write index) claim that
//! still holds a verified metadata anchor, transfers that node's per-block
//! authentication state, and pulls only the pages its own disk cannot
//! authenticate. Members rebuild the same way when told about the new
//! configuration, usually pulling next to nothing.

mod coordinator;
mod member;
mod transfer;

pub use coordinator::{
    Coordinator, Outcome, Recovered, RecoveryReport, P1B_TIMEOUT_US, TRANSFER_TIMEOUT_US,
};
pub use member::{MemberOutcome, MemberResync, MemberStart};
pub use transfer::TRANSFER_WINDOW;

use crate::transport::{Configuration, NodeId, WireMessage};

/// Timer and message effects a recovery state machine hands back to its
/// driver. Timer tokens come back through `on_timeout`; stale tokens are
/// ignored, so drivers never need to cancel anything.
#[derive(Debug, PartialEq, Eq)]
pub enum RecoveryEffect {
    Send { to: NodeId, msg: WireMessage },
    Timer { at: u64, token: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    /// Another coordinator registered the ballot first; retry later.
    LostRace,
    /// Some prior configuration has no reachable member, so nothing can be
    /// said about what it might have completed.
    InsufficientQuorum { conf_ballot: u64 },
    /// Nobody reachable holds a verified anchor to adopt state from.
    NoWarmCandidate,
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AbortReason::LostRace => write!(f, "lost the registration race"),
            AbortReason::InsufficientQuorum { conf_ballot } => {
                write!(f, "no reachable member of configuration {conf_ballot}")
            }
            AbortReason::NoWarmCandidate => write!(f, "no responder holds a verified anchor"),
        }
    }
}

/// Body of a reconfiguration frame; ballot and the adopted write index ride
/// in the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconfigBody {
    pub epoch_next: u32,
    pub designated: NodeId,
    pub conf: Configuration,
}

impl ReconfigBody {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.conf.members.len() * 4);
        out.extend_from_slice(&self.epoch_next.to_le_bytes());
        out.extend_from_slice(&self.designated.to_le_bytes());
        out.extend_from_slice(&self.conf.f.to_le_bytes());
        out.extend_from_slice(&(self.conf.members.len() as u32).to_le_bytes());
        for m in &self.conf.members {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    pub fn decode(ballot: u64, payload: &[u8]) -> Option<ReconfigBody> {
        if payload.len() < 16 {
            return None;
        }
        let word = |i: usize| u32::from_le_bytes(payload[i..i + 4].try_into().unwrap());
        let n = word(12) as usize;
        if payload.len() != 16 + n * 4 {
            return None;
        }
        let members = (0..n).map(|i| word(16 + i * 4)).collect();
        let conf = Configuration::new(ballot, members, word(8)).ok()?;
        Some(ReconfigBody {
            epoch_next: word(0),
            designated: word(4),
            conf,
        })
    }
}
