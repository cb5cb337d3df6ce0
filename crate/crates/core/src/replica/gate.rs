//! The conflict gate: a map of operations currently at the disk keyed by
//! block, and a FIFO of operations blocked behind them. The primary uses it
//! to serialize same-block operations; backups reuse it to let
//! non-conflicting replicated writes run concurrently while keeping
//! per-block order.

use std::collections::{BTreeMap, VecDeque};

pub type OpToken = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateOp {
    pub token: OpToken,
    pub block: u64,
}

#[derive(Debug, Default)]
pub struct ConflictGate {
    /// block -> operation currently submitted to the disk
    invoked: BTreeMap<u64, OpToken>,
    pending: VecDeque<GateOp>,
    /// blocks with at least one queued op; arrivals must queue behind these
    /// too, or same-block submission order would break
    pending_blocks: BTreeMap<u64, u32>,
}

impl ConflictGate {
    pub fn new() -> ConflictGate {
        ConflictGate::default()
    }

    /// True: the op holds the block and must be submitted to the disk now.
    /// False: queued; it will come back out of `complete`.
    pub fn admit(&mut self, op: GateOp) -> bool {
        if self.invoked.contains_key(&op.block) || self.pending_blocks.contains_key(&op.block) {
            *self.pending_blocks.entry(op.block).or_insert(0) += 1;
            self.pending.push_back(op);
            false
        } else {
            self.invoked.insert(op.block, op.token);
            true
        }
    }

    /// Disk finished the op holding `block`. Releases the longest
    /// non-conflicting prefix of the FIFO; the caller submits each returned
    /// op to the disk. Strict prefix order: one blocked op blocks everything
    /// behind it, which is what keeps releases starvation-free and ordered.
    pub fn complete(&mut self, block: u64, token: OpToken) -> Vec<GateOp> {
        let held = self.invoked.remove(&block);
        assert_eq!(held, Some(token), "completion for an op the gate never admitted");
        let mut released = Vec::new();
        while let Some(front) = self.pending.front() {
            if self.invoked.contains_key(&front.block) {
                break;
            }
            let op = self.pending.pop_front().unwrap();
            match self.pending_blocks.get_mut(&op.block) {
                Some(1) => {
                    self.pending_blocks.remove(&op.block);
                }
                Some(n) => *n -= 1,
                None => unreachable!("pending op not counted"),
            }
            self.invoked.insert(op.block, op.token);
            released.push(op);
        }
        released
    }

    pub fn invoked_len(&self) -> usize {
        self.invoked.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_idle(&self) -> bool {
        self.invoked.is_empty() && self.pending.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(token: OpToken, block: u64) -> GateOp {
        GateOp { token, block }
    }

    #[test]
    fn non_conflicting_ops_run_concurrently() {
        let mut g = ConflictGate::new();
        assert!(g.admit(op(1, 7)));
        assert!(g.admit(op(2, 9)));
        assert_eq!(g.invoked_len(), 2);
        assert_eq!(g.complete(7, 1), vec![]);
        assert_eq!(g.complete(9, 2), vec![]);
        assert!(g.is_idle());
    }

    #[test]
    fn same_block_serializes_in_arrival_order() {
        let mut g = ConflictGate::new();
        assert!(g.admit(op(1, 4)));
        assert!(!g.admit(op(2, 4)));
        assert!(!g.admit(op(3, 4)));
        assert_eq!(g.complete(4, 1), vec![op(2, 4)]);
        assert_eq!(g.complete(4, 2), vec![op(3, 4)]);
        assert_eq!(g.complete(4, 3), vec![]);
        assert!(g.is_idle());
    }

    #[test]
    fn arrival_queues_behind_pending_op_on_same_block() {
        let mut g = ConflictGate::new();
        assert!(g.admit(op(1, 4)));
        assert!(g.admit(op(2, 5)));
        assert!(!g.admit(op(3, 5))); // pending behind 2
        // block 5 has a pending op; a new block-5 arrival must not pass it
        // even at a moment when only block 4 frees up
        assert!(!g.admit(op(4, 5)));
        assert_eq!(g.complete(5, 2), vec![op(3, 5)]);
        assert_eq!(g.complete(5, 3), vec![op(4, 5)]);
        assert_eq!(g.complete(5, 4), vec![]);
        assert_eq!(g.complete(4, 1), vec![]);
        assert!(g.is_idle());
    }

    #[test]
    fn release_is_a_prefix_not_a_scan() {
        let mut g = ConflictGate::new();
        assert!(g.admit(op(1, 1)));
        assert!(g.admit(op(2, 2)));
        assert!(!g.admit(op(3, 1))); // blocked by 1
        assert!(!g.admit(op(4, 2))); // blocked by 2
        // an op on an untouched block is not held back by the queue
        assert!(g.admit(op(5, 3)));
        assert_eq!(g.invoked_len(), 3);
        assert_eq!(g.pending_len(), 2);
        // completing 2 frees block 2 but the front of the queue still
        // conflicts, so nothing moves: release stops at the first blocked op
        assert_eq!(g.complete(2, 2), vec![]);
        // completing 1 releases the whole prefix: 3 takes block 1, 4 takes 2
        assert_eq!(g.complete(1, 1), vec![op(3, 1), op(4, 2)]);
    }

    #[test]
    fn chained_release_stops_at_next_conflict() {
        let mut g = ConflictGate::new();
        assert!(g.admit(op(1, 1)));
        assert!(!g.admit(op(2, 1)));
        assert!(!g.admit(op(3, 1)));
        assert_eq!(g.complete(1, 1), vec![op(2, 1)]); // 3 still behind 2
        assert_eq!(g.pending_len(), 1);
    }

    #[test]
    #[should_panic(expected = "never admitted")]
    fn completing_a_foreign_op_panics() {
        let mut g = ConflictGate::new();
        g.admit(op(1, 1));
        g.complete(1, 99);
    }
}
