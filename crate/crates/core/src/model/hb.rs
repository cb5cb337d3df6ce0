//! Happens-before over history events.
//!
//! For events at positions i < j, a direct edge i -> j exists when:
//!   (1) i is a response and j an invocation on the same block;
//!   (2) i or j is a crash;
//!   (3) i is any response and j is a write invocation carrying PREFLUSH.
//! The relation is the transitive closure of these edges. Note that an
//! invocation is never ordered before its own response by (1)-(3): edges end
//! at invocations (or crashes), so in a crash-free history every
//! happens-before path is a single response -> invocation edge.

use super::Event;

/// Direct-edge adjacency for one slice. Queries run a forward scan; the
/// relation is a DAG because edges always point to later positions.
pub struct HbIndex<'a> {
    events: &'a [Event],
}

impl<'a> HbIndex<'a> {
    pub fn new(events: &'a [Event]) -> HbIndex<'a> {
        HbIndex { events }
    }

    pub fn direct(&self, i: usize, j: usize) -> bool {
        if i >= j {
            return false;
        }
        let a = &self.events[i];
        let b = &self.events[j];
        if a.is_crash() || b.is_crash() {
            return true;
        }
        if a.is_response() && b.is_invocation() && a.block() == b.block() {
            return true;
        }
        a.is_response() && b.is_flagged_write_inv() && b.sync().preflush()
    }

    /// Transitive query. Worst case O(n^2) per call; histories handed to the
    /// checker are small enough that this never matters.
    pub fn query(&self, i: usize, j: usize) -> bool {
        if i >= j {
            return false;
        }
        if self.direct(i, j) {
            return true;
        }
        // BFS over intermediate positions, forward only
        let mut reached = vec![false; j + 1];
        let mut stack = vec![i];
        while let Some(k) = stack.pop() {
            for m in (k + 1)..=j {
                if !reached[m] && self.direct(k, m) {
                    if m == j {
                        return true;
                    }
                    reached[m] = true;
                    stack.push(m);
                }
            }
        }
        false
    }

    /// All pairs (i, j) with i happens-before j. Quadratic output; intended
    /// for small histories and the oracle comparison tests.
    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.events.len();
        // reach[i] = set of j > i reachable from i, as a bitset
        let words = n.div_ceil(64);
        let mut reach: Vec<Vec<u64>> = vec![vec![0; words]; n];
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                if self.direct(i, j) {
                    reach[i][j / 64] |= 1 << (j % 64);
                    let (head, tail) = reach.split_at_mut(j);
                    for w in 0..words {
                        head[i][w] |= tail[0][w];
                    }
                }
            }
        }
        let mut out = Vec::new();
        for (i, row) in reach.iter().enumerate() {
            for j in (i + 1)..n {
                if row[j / 64] & (1 << (j % 64)) != 0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// One-off transitive happens-before query on a slice.
pub fn happens_before(events: &[Event], i: usize, j: usize) -> bool {
    HbIndex::new(events).query(i, j)
}

#[cfg(test)]
mod tests {
    use super::super::{BlockId, SyncFlags, ThreadId, ValueId};
    use super::*;

    fn wi(t: ThreadId, b: BlockId, v: ValueId, s: SyncFlags) -> Event {
        Event::WriteInv {
            thread: t,
            block: b,
            value: v,
            sync: s,
        }
    }
    fn wr(t: ThreadId, b: BlockId) -> Event {
        Event::WriteRes {
            thread: t,
            block: b,
        }
    }
    fn ri(t: ThreadId, b: BlockId) -> Event {
        Event::ReadInv {
            thread: t,
            block: b,
        }
    }

    #[test]
    fn same_block_response_to_invocation() {
        let h = [wi(0, 0, 1, SyncFlags::NONE), wr(0, 0), ri(1, 0)];
        assert!(happens_before(&h, 1, 2));
        // invocation is not ordered before its own response
        assert!(!happens_before(&h, 0, 1));
        // different blocks, no flags: unordered
        let h = [wi(0, 0, 1, SyncFlags::NONE), wr(0, 0), ri(1, 1)];
        assert!(!happens_before(&h, 1, 2));
    }

    #[test]
    fn crash_orders_everything() {
        let h = [wi(0, 0, 1, SyncFlags::NONE), Event::Crash, ri(0, 1)];
        assert!(happens_before(&h, 0, 1));
        assert!(happens_before(&h, 1, 2));
        // and transitively across the crash
        assert!(happens_before(&h, 0, 2));
    }

    #[test]
    fn preflush_pulls_in_prior_responses_cross_block() {
        // read response on block 0 precedes a PREFLUSH write to block 1
        let h = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(0, 1, 2, SyncFlags::PREFLUSH),
        ];
        assert!(happens_before(&h, 1, 2));
        // FUA alone does not create the cross-block edge
        let h = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(0, 1, 2, SyncFlags::FUA),
        ];
        assert!(!happens_before(&h, 1, 2));
    }

    #[test]
    fn strict_partial_order_axioms_on_samples() {
        let h = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(1, 1, 2, SyncFlags::PREFLUSH),
            wr(1, 1),
            Event::Crash,
            ri(0, 1),
        ];
        let idx = HbIndex::new(&h);
        let pairs = idx.all_pairs();
        for &(a, b) in &pairs {
            assert!(a < b, "order embeds in sequence order");
            assert!(!pairs.contains(&(b, a)), "antisymmetric");
        }
        // transitivity: closure is closed
        for &(a, b) in &pairs {
            for &(c, d) in &pairs {
                if b == c {
                    assert!(pairs.contains(&(a, d)));
                }
            }
        }
        // all_pairs agrees with query
        for a in 0..h.len() {
            for b in 0..h.len() {
                assert_eq!(pairs.contains(&(a, b)), idx.query(a, b));
            }
        }
    }
}
