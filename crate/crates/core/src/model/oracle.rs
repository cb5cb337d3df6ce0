//! Naive reference checker.
//!
//! Everything here is a direct transcription of the definitions: full
//! enumeration, no memoization, no pruning beyond the definitions themselves.
//! The optimized checker in `check` must agree with this module on every
//! history small enough to enumerate; the equivalence suite relies on that.
//! Keep this file independent of `check`: it may share the definitional
//! helpers (`completions`, `truncate`, `reads_see_writes`, `is_sequential`)
//! but none of the search machinery.

use super::{
    completions, eras_of, is_sequential, pair_ops, reads_see_writes, truncate, Event, ThreadId,
};
use std::collections::BTreeSet;

/// Literal transitive happens-before on a slice: direct criteria, then
/// Warshall closure. Quadratic memory, cubic time; only used on tiny inputs.
fn hb_closure(events: &[Event]) -> Vec<Vec<bool>> {
    let n = events.len();
    let mut rel = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &events[i];
            let b = &events[j];
            let direct = a.is_crash()
                || b.is_crash()
                || (a.is_response() && b.is_invocation() && a.block() == b.block())
                || (a.is_response() && matches!(b, Event::WriteInv { sync, .. } if sync.preflush()));
            rel[i][j] = direct;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if rel[i][k] {
                for j in 0..n {
                    if rel[k][j] {
                        rel[i][j] = true;
                    }
                }
            }
        }
    }
    rel
}

/// Enumerate every merge of the per-thread sequences (plus crash events) and
/// test each candidate against the definition. Returns a witness if one
/// exists.
pub fn lin_witness(events: &[Event]) -> Option<Vec<Event>> {
    for completed in completions(events) {
        let h = truncate(&completed);
        let hb_h = hb_closure(&h);
        // events of h tagged with their index, grouped into merge sources
        let mut sources: Vec<Vec<usize>> = Vec::new();
        {
            let mut by_thread: std::collections::BTreeMap<ThreadId, Vec<usize>> =
                Default::default();
            let mut crash_src = Vec::new();
            for (i, e) in h.iter().enumerate() {
                match e.thread() {
                    Some(t) => by_thread.entry(t).or_default().push(i),
                    None => crash_src.push(i),
                }
            }
            sources.extend(by_thread.into_values());
            if !crash_src.is_empty() {
                sources.push(crash_src);
            }
        }
        let mut pos = vec![0usize; sources.len()];
        let mut current: Vec<usize> = Vec::with_capacity(h.len());
        if merge_search(&h, &hb_h, &sources, &mut pos, &mut current) {
            return Some(current.iter().map(|&i| h[i]).collect());
        }
    }
    None
}

fn merge_search(
    h: &[Event],
    hb_h: &[Vec<bool>],
    sources: &[Vec<usize>],
    pos: &mut [usize],
    current: &mut Vec<usize>,
) -> bool {
    if current.len() == h.len() {
        let s: Vec<Event> = current.iter().map(|&i| h[i]).collect();
        return candidate_ok(h, hb_h, current, &s);
    }
    // a prefix of a sequential history is complete pairs with at most a
    // trailing open invocation; extensions violating that can never satisfy
    // the definition, so skip them (the invariant holds inductively, making
    // "last event is an invocation" equivalent to "one op is open")
    let open: Option<usize> = current.last().copied().filter(|&i| h[i].is_invocation());
    for src in 0..sources.len() {
        if pos[src] < sources[src].len() {
            let next = sources[src][pos[src]];
            let admissible = match open {
                Some(inv) => h[inv].matched_by(&h[next]),
                None => h[next].is_invocation() || h[next].is_crash(),
            };
            if !admissible {
                continue;
            }
            current.push(next);
            pos[src] += 1;
            if merge_search(h, hb_h, sources, pos, current) {
                return true;
            }
            pos[src] -= 1;
            current.pop();
        }
    }
    false
}

/// The three conditions on a candidate S: sequential with reads seeing
/// writes, equivalent per thread (guaranteed by merge construction), and
/// happens-before of H' preserved in S.
fn candidate_ok(h: &[Event], hb_h: &[Vec<bool>], order: &[usize], s: &[Event]) -> bool {
    if !is_sequential(s) || !reads_see_writes(s) {
        return false;
    }
    // where did event i of h end up in s?
    let mut pos_in_s = vec![0usize; h.len()];
    for (p, &i) in order.iter().enumerate() {
        pos_in_s[i] = p;
    }
    let hb_s = hb_closure(s);
    for i in 0..h.len() {
        for j in 0..h.len() {
            if hb_h[i][j] && !hb_s[pos_in_s[i]][pos_in_s[j]] {
                return false;
            }
        }
    }
    true
}

pub fn is_linearizable(events: &[Event]) -> bool {
    lin_witness(events).is_some()
}

/// All durable cuts of one era (a crash-free slice), as event sequences.
///
/// For every completion-resolved truncation H' and every subset of its
/// events, keep the subset iff:
///   (1) the response of every flagged write in H' is in it,
///   (2) it is closed under happens-before of H',
///   (3) it contains no pending invocation, and
///   it is itself a well-formed history (a kept response keeps its
///   invocation).
pub fn durable_cuts(era: &[Event]) -> Vec<Vec<Event>> {
    assert!(
        !era.iter().any(Event::is_crash),
        "durable cuts are defined per era"
    );
    let mut cuts: BTreeSet<Vec<Event>> = BTreeSet::new();
    for completed in completions(era) {
        let h = truncate(&completed);
        let hb_h = hb_closure(&h);
        let (ops, of_event) = pair_ops(&h);
        let n = h.len();
        assert!(n < 32, "oracle cut enumeration is for tiny eras");
        'subset: for mask in 0u32..(1 << n) {
            let keep = |i: usize| mask & (1 << i) != 0;
            for i in 0..n {
                // (1) flagged write responses are mandatory
                if h[i].is_flagged_write_inv() {
                    if let Some(res) = ops[of_event[i].unwrap()].res {
                        if !keep(res) {
                            continue 'subset;
                        }
                    }
                }
                if keep(i) {
                    // (2) happens-before closure
                    for j in 0..n {
                        if hb_h[j][i] && !keep(j) {
                            continue 'subset;
                        }
                    }
                    // (3) + well-formedness: operations kept whole
                    let op = &ops[of_event[i].unwrap()];
                    if !keep(op.inv) || op.res.is_none_or(|r| !keep(r)) {
                        continue 'subset;
                    }
                }
            }
            cuts.insert((0..n).filter(|&i| keep(i)).map(|i| h[i]).collect());
        }
    }
    cuts.into_iter().collect()
}

/// Definition 8, by exhaustion: a single assignment of durable cuts, one per
/// crashed era, such that every prefix-of-cuts plus next era is linearizable.
pub fn is_crash_consistent(events: &[Event]) -> bool {
    let eras = eras_of(events);
    let x = eras.len() - 1; // number of crashes
    if x == 0 {
        return is_linearizable(eras[0]);
    }
    let cut_sets: Vec<Vec<Vec<Event>>> = eras[..x].iter().map(|e| durable_cuts(e)).collect();
    let mut choice = vec![0usize; x];
    loop {
        let mut ok = true;
        let mut prefix: Vec<Event> = Vec::new();
        for i in 0..=x {
            let mut concat = prefix.clone();
            concat.extend_from_slice(eras[i]);
            if !is_linearizable(&concat) {
                ok = false;
                break;
            }
            if i < x {
                prefix.extend_from_slice(&cut_sets[i][choice[i]]);
            }
        }
        if ok {
            return true;
        }
        // next tuple
        let mut k = 0;
        loop {
            if k == x {
                return false;
            }
            choice[k] += 1;
            if choice[k] < cut_sets[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{BlockId, SyncFlags, ValueId};
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
    fn rr(t: ThreadId, b: BlockId, v: ValueId) -> Event {
        Event::ReadRes {
            thread: t,
            block: b,
            value: v,
        }
    }

    #[test]
    fn concurrent_read_linearizes_against_pending_write() {
        // read returns the value of a write whose response never arrived:
        // only a completion can explain it
        let h = [wi(0, 0, 1, SyncFlags::NONE), ri(1, 0), rr(1, 0, 1)];
        assert!(is_linearizable(&h));
        // but a value from nowhere is not linearizable
        let h = [wi(0, 0, 1, SyncFlags::NONE), ri(1, 0), rr(1, 0, 9)];
        assert!(!is_linearizable(&h));
    }

    #[test]
    fn overlapping_ops_may_reorder_but_sequenced_ops_may_not() {
        // two sequenced writes then a read of the first: stale
        let stale = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(0, 0, 2, SyncFlags::NONE),
            wr(0, 0),
            ri(0, 0),
            rr(0, 0, 1),
        ];
        assert!(!is_linearizable(&stale));
        // overlapping writes: either order works
        let racy = [
            wi(0, 0, 1, SyncFlags::NONE),
            wi(1, 0, 2, SyncFlags::NONE),
            wr(0, 0),
            wr(1, 0),
            ri(0, 0),
            rr(0, 0, 1),
        ];
        assert!(is_linearizable(&racy));
    }

    #[test]
    fn fua_write_is_forced_into_every_cut() {
        let era = [wi(0, 0, 1, SyncFlags::FUA), wr(0, 0)];
        let cuts = durable_cuts(&era);
        assert_eq!(cuts, vec![vec![era[0], era[1]]]);
    }

    #[test]
    fn unflagged_write_may_be_kept_or_dropped() {
        let era = [wi(0, 0, 1, SyncFlags::NONE), wr(0, 0)];
        let cuts = durable_cuts(&era);
        assert_eq!(cuts.len(), 2);
        assert!(cuts.contains(&vec![]));
        assert!(cuts.contains(&vec![era[0], era[1]]));
    }

    #[test]
    fn preflush_closure_pulls_prior_completed_write() {
        let era = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(0, 1, 2, SyncFlags::PREFLUSH),
            wr(0, 1),
        ];
        let cuts = durable_cuts(&era);
        // every cut contains the PREFLUSH write, hence (closure) the earlier
        // write as well; the only cut is the whole era
        assert_eq!(cuts, vec![era.to_vec()]);
    }

    #[test]
    fn pending_write_cut_depends_on_completion_choice() {
        let era = [wi(0, 0, 1, SyncFlags::FUA)];
        let cuts = durable_cuts(&era);
        // not completed -> truncated away -> empty cut; completed -> forced in
        assert_eq!(cuts.len(), 2);
        assert!(cuts.contains(&vec![]));
        assert_eq!(cuts[1].len(), 2);
    }

    #[test]
    fn fua_rollback_is_inconsistent() {
        // flagged write completes, crash, read returns the pre-write value:
        // the signature rollback trace
        let h = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(0, 0, 2, SyncFlags::FUA),
            wr(0, 0),
            Event::Crash,
            ri(0, 0),
            rr(0, 0, 1),
        ];
        assert!(!is_crash_consistent(&h));
    }

    #[test]
    fn benign_loss_of_unflagged_write_is_consistent() {
        // same shape without the flag: the cut may drop the second write
        let h = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(0, 0, 2, SyncFlags::NONE),
            wr(0, 0),
            Event::Crash,
            ri(0, 0),
            rr(0, 0, 1),
        ];
        assert!(is_crash_consistent(&h));
        // and keeping it is equally fine
        let h2 = [
            wi(0, 0, 1, SyncFlags::NONE),
            wr(0, 0),
            wi(0, 0, 2, SyncFlags::NONE),
            wr(0, 0),
            Event::Crash,
            ri(0, 0),
            rr(0, 0, 2),
        ];
        assert!(is_crash_consistent(&h2));
    }
}
