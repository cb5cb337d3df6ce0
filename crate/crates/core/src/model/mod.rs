//! Formal model of block-device histories.
//!
//! A history is a finite sequence of invocation/response/crash events over
//! single-block reads and writes. Everything downstream (the consistency
//! checker, the naive oracle, the trace format) works on these types.
//!
//! Values are opaque identifiers: the model never looks at page bytes, so
//! verdicts are independent of the encryption applied by the storage layer.

mod check;
pub mod gen;
mod hb;
pub mod oracle;
pub mod trace;

pub use check::{
    durable_cuts, is_crash_consistent, is_linearizable, Budget, CheckError, ConsistencyReport,
    CrashVerdict, Inconsistency,
};
pub use hb::{happens_before, HbIndex};

use std::fmt;

pub type ThreadId = u32;
pub type BlockId = u64;
pub type ValueId = u64;

/// Persistence flags carried by a write invocation.
///
/// FUA: this write's own payload is durable at completion.
/// PREFLUSH: all writes completed before this one are durable at completion.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct SyncFlags(u8);

impl SyncFlags {
    pub const NONE: SyncFlags = SyncFlags(0);
    pub const FUA: SyncFlags = SyncFlags(1);
    pub const PREFLUSH: SyncFlags = SyncFlags(2);
    pub const BOTH: SyncFlags = SyncFlags(3);

    pub fn from_bits(bits: u8) -> Option<SyncFlags> {
        (bits <= 3).then_some(SyncFlags(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn fua(self) -> bool {
        self.0 & 1 != 0
    }

    pub fn preflush(self) -> bool {
        self.0 & 2 != 0
    }

    /// Either flag set: the write is a durability barrier for the protocol.
    pub fn flagged(self) -> bool {
        self.0 != 0
    }
}

impl std::ops::BitOr for SyncFlags {
    type Output = SyncFlags;
    fn bitor(self, rhs: SyncFlags) -> SyncFlags {
        SyncFlags(self.0 | rhs.0)
    }
}

impl fmt::Debug for SyncFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => write!(f, "-"),
            1 => write!(f, "F"),
            2 => write!(f, "P"),
            _ => write!(f, "FP"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Event {
    WriteInv {
        thread: ThreadId,
        block: BlockId,
        value: ValueId,
        sync: SyncFlags,
    },
    WriteRes {
        thread: ThreadId,
        block: BlockId,
    },
    ReadInv {
        thread: ThreadId,
        block: BlockId,
    },
    ReadRes {
        thread: ThreadId,
        block: BlockId,
        value: ValueId,
    },
    Crash,
}

impl Event {
    pub fn thread(&self) -> Option<ThreadId> {
        match *self {
            Event::WriteInv { thread, .. }
            | Event::WriteRes { thread, .. }
            | Event::ReadInv { thread, .. }
            | Event::ReadRes { thread, .. } => Some(thread),
            Event::Crash => None,
        }
    }

    pub fn block(&self) -> Option<BlockId> {
        match *self {
            Event::WriteInv { block, .. }
            | Event::WriteRes { block, .. }
            | Event::ReadInv { block, .. }
            | Event::ReadRes { block, .. } => Some(block),
            Event::Crash => None,
        }
    }

    pub fn value(&self) -> Option<ValueId> {
        match *self {
            Event::WriteInv { value, .. } | Event::ReadRes { value, .. } => Some(value),
            _ => None,
        }
    }

    pub fn is_invocation(&self) -> bool {
        matches!(self, Event::WriteInv { .. } | Event::ReadInv { .. })
    }

    pub fn is_response(&self) -> bool {
        matches!(self, Event::WriteRes { .. } | Event::ReadRes { .. })
    }

    pub fn is_crash(&self) -> bool {
        matches!(self, Event::Crash)
    }

    pub fn sync(&self) -> SyncFlags {
        match *self {
            Event::WriteInv { sync, .. } => sync,
            _ => SyncFlags::NONE,
        }
    }

    /// True for a write invocation carrying FUA or PREFLUSH.
    pub fn is_flagged_write_inv(&self) -> bool {
        matches!(self, Event::WriteInv { sync, .. } if sync.flagged())
    }

    /// Does `res` complete `self` (same thread, same block, right kind)?
    pub fn matched_by(&self, res: &Event) -> bool {
        match (*self, *res) {
            (Event::WriteInv { thread: t, block: b, .. }, Event::WriteRes { thread, block }) => {
                t == thread && b == block
            }
            (Event::ReadInv { thread: t, block: b }, Event::ReadRes { thread, block, .. }) => {
                t == thread && b == block
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MalformedHistory {
    #[error("event {index}: response without an outstanding invocation on thread {thread}")]
    OrphanResponse { index: usize, thread: ThreadId },
    #[error("event {index}: response does not match the outstanding invocation on thread {thread}")]
    MismatchedResponse { index: usize, thread: ThreadId },
    #[error("event {index}: thread {thread} already has an outstanding invocation")]
    OverlappingInvocation { index: usize, thread: ThreadId },
    #[error("event {index}: thread {thread} completes an operation invoked before a crash")]
    ResponseAcrossCrash { index: usize, thread: ThreadId },
}

/// A validated history: per thread, invocations and matching responses
/// strictly alternate, so each thread has at most one outstanding operation.
/// Crashes may appear anywhere; total order is the vector order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct History {
    events: Vec<Event>,
}

impl History {
    pub fn from_events(events: Vec<Event>) -> Result<History, MalformedHistory> {
        validate(&events)?;
        Ok(History { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Maximal crash-free segments, in order. A crash-free history is one era;
    /// trailing crash yields a trailing empty era.
    pub fn eras(&self) -> Vec<&[Event]> {
        eras_of(&self.events)
    }

    pub fn crash_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_crash()).count()
    }
}

/// Era split over a raw slice.
pub fn eras_of(events: &[Event]) -> Vec<&[Event]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, e) in events.iter().enumerate() {
        if e.is_crash() {
            out.push(&events[start..i]);
            start = i + 1;
        }
    }
    out.push(&events[start..]);
    out
}

pub fn validate(events: &[Event]) -> Result<(), MalformedHistory> {
    // thread id -> (index of outstanding invocation, era it was made in).
    // An operation may never span a crash: the device instance that accepted
    // it is gone, and the consistency definitions leave a split operation
    // undefined.
    let mut outstanding: std::collections::BTreeMap<ThreadId, (usize, usize)> =
        std::collections::BTreeMap::new();
    let mut era = 0usize;
    for (i, e) in events.iter().enumerate() {
        match e {
            Event::WriteInv { thread, .. } | Event::ReadInv { thread, .. } => {
                if outstanding.insert(*thread, (i, era)).is_some() {
                    return Err(MalformedHistory::OverlappingInvocation {
                        index: i,
                        thread: *thread,
                    });
                }
            }
            Event::WriteRes { thread, .. } | Event::ReadRes { thread, .. } => {
                let (inv, inv_era) = outstanding.remove(thread).ok_or(
                    MalformedHistory::OrphanResponse {
                        index: i,
                        thread: *thread,
                    },
                )?;
                if inv_era != era {
                    return Err(MalformedHistory::ResponseAcrossCrash {
                        index: i,
                        thread: *thread,
                    });
                }
                if !events[inv].matched_by(e) {
                    return Err(MalformedHistory::MismatchedResponse {
                        index: i,
                        thread: *thread,
                    });
                }
            }
            Event::Crash => {
                era += 1;
            }
        }
    }
    Ok(())
}

/// One operation: an invocation plus its response, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Op {
    pub inv: usize,
    pub res: Option<usize>,
}

impl Op {
    pub fn completed(&self) -> bool {
        self.res.is_some()
    }
}

/// Pair up invocations and responses of a well-formed slice.
/// Returns the ops in invocation order and, for each event index, the op it
/// belongs to (None for crashes).
pub fn pair_ops(events: &[Event]) -> (Vec<Op>, Vec<Option<usize>>) {
    let mut ops: Vec<Op> = Vec::new();
    let mut of_event: Vec<Option<usize>> = vec![None; events.len()];
    let mut outstanding: std::collections::BTreeMap<ThreadId, usize> =
        std::collections::BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        match e {
            Event::WriteInv { thread, .. } | Event::ReadInv { thread, .. } => {
                let id = ops.len();
                ops.push(Op { inv: i, res: None });
                of_event[i] = Some(id);
                outstanding.insert(*thread, id);
            }
            Event::WriteRes { thread, .. } | Event::ReadRes { thread, .. } => {
                let id = outstanding
                    .remove(thread)
                    .expect("pair_ops called on malformed slice");
                ops[id].res = Some(i);
                of_event[i] = Some(id);
            }
            Event::Crash => {}
        }
    }
    (ops, of_event)
}

/// A history is sequential when every invocation is immediately followed by
/// its matching response; a single pending invocation may only sit at the
/// very end. Crashes may separate operations but never split one.
pub fn is_sequential(events: &[Event]) -> bool {
    let mut i = 0;
    while i < events.len() {
        let e = &events[i];
        if e.is_crash() {
            i += 1;
            continue;
        }
        if !e.is_invocation() {
            return false;
        }
        match events.get(i + 1) {
            Some(next) if e.matched_by(next) => i += 2,
            Some(_) => return false,
            // pending invocation at the end
            None => return true,
        }
    }
    true
}

/// Every read response must be explained: the latest write invocation to the
/// block strictly before the response must carry the value read, its response
/// must precede the read invocation, and no crash may fall anywhere between
/// that write's invocation and the read's response. A read with no preceding
/// write invocation to its block sees the initial contents, value 0, which
/// are persisted at genesis and so survive any crash.
pub fn reads_see_writes(events: &[Event]) -> bool {
    let (ops, of_event) = pair_ops(events);
    for (i, e) in events.iter().enumerate() {
        let Event::ReadRes { block, value, .. } = *e else {
            continue;
        };
        let r_inv = ops[of_event[i].unwrap()].inv;
        let witness = (0..i)
            .rev()
            .find(|&w| matches!(events[w], Event::WriteInv { block: wb, .. } if wb == block));
        let ok = match witness {
            None => value == 0,
            Some(w) => {
                let Event::WriteInv { value: wv, .. } = events[w] else {
                    unreachable!()
                };
                wv == value
                    && ops[of_event[w].unwrap()]
                        .res
                        .is_some_and(|w_res| w_res < r_inv)
                    && !events[w..=i].iter().any(Event::is_crash)
            }
        };
        if !ok {
            return false;
        }
    }
    true
}

/// All ways of completing pending *writes*: for every subset of pending write
/// invocations, append the matching responses at the end of the invocation's
/// era (before the next crash). Pending reads are never completed; a
/// fabricated read response could only constrain a witness, never enable one.
/// The order of appended responses within one era follows invocation order.
pub fn completions(events: &[Event]) -> Vec<Vec<Event>> {
    let (ops, _) = pair_ops(events);
    let pending_writes: Vec<usize> = ops
        .iter()
        .filter(|op| !op.completed() && matches!(events[op.inv], Event::WriteInv { .. }))
        .map(|op| op.inv)
        .collect();
    let era_of: Vec<usize> = {
        let mut v = Vec::with_capacity(events.len());
        let mut era = 0;
        for e in events {
            v.push(era);
            if e.is_crash() {
                era += 1;
            }
        }
        v
    };
    let mut out = Vec::with_capacity(1 << pending_writes.len());
    for mask in 0u32..(1 << pending_writes.len()) {
        // per era, responses to append (in invocation order)
        let mut extra: std::collections::BTreeMap<usize, Vec<Event>> =
            std::collections::BTreeMap::new();
        for (k, &inv) in pending_writes.iter().enumerate() {
            if mask & (1 << k) != 0 {
                let Event::WriteInv { thread, block, .. } = events[inv] else {
                    unreachable!()
                };
                extra
                    .entry(era_of[inv])
                    .or_default()
                    .push(Event::WriteRes { thread, block });
            }
        }
        let mut h = Vec::with_capacity(events.len() + pending_writes.len());
        let mut era = 0;
        for e in events {
            if e.is_crash() {
                if let Some(tail) = extra.remove(&era) {
                    h.extend(tail);
                }
                era += 1;
            }
            h.push(*e);
        }
        if let Some(tail) = extra.remove(&era) {
            h.extend(tail);
        }
        out.push(h);
    }
    out
}

/// Drop every pending invocation.
pub fn truncate(events: &[Event]) -> Vec<Event> {
    let (ops, of_event) = pair_ops(events);
    events
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            e.is_crash() || ops[of_event[*i].expect("non-crash event belongs to an op")].completed()
        })
        .map(|(_, e)| *e)
        .collect()
}
