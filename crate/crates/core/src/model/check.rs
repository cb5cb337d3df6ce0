//! Optimized consistency checker.
//!
//! Linearizability runs as a backtracking scheduler over operations with
//! memoization on the search frontier (per-thread progress plus last written
//! value per block). Durable cuts are enumerated as downward-closed operation
//! sets over the forced closure of flagged writes. Crash consistency searches
//! cut assignments era by era, backtracking on linearization failure.
//!
//! Every verdict here must agree with `oracle`; the equivalence suite
//! enforces that on exhaustively enumerated small histories.

use super::{completions, eras_of, pair_ops, truncate, BlockId, Event, ThreadId, ValueId};
use std::collections::{BTreeMap, BTreeSet, HashSet};

/// Exploration budget shared across one check. Each expanded search state
/// costs one unit; exhausting the budget aborts with an error rather than a
/// verdict, so a blown limit is never mistaken for "inconsistent".
#[derive(Debug, Clone)]
pub struct Budget {
    pub limit: u64,
    pub used: u64,
}

impl Default for Budget {
    fn default() -> Budget {
        Budget {
            limit: 10_000_000,
            used: 0,
        }
    }
}

impl Budget {
    pub fn with_limit(limit: u64) -> Budget {
        Budget { limit, used: 0 }
    }

    fn spend(&mut self, n: u64) -> Result<(), CheckError> {
        self.used = self.used.saturating_add(n);
        if self.used > self.limit {
            Err(CheckError::SizeLimitExceeded { explored: self.used })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckError {
    #[error("search budget exhausted after {explored} states")]
    SizeLimitExceeded { explored: u64 },
    #[error("event {index}: read of block {block} which no write ever touched")]
    UnwrittenRead { index: usize, block: BlockId },
}

/// Why a history failed the crash-consistency check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inconsistency {
    /// Era whose linearization failed under every durable-cut assignment.
    pub era: usize,
    pub narrative: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistencyReport {
    /// Chosen durable cut per crashed era, in order.
    pub cuts: Vec<Vec<Event>>,
    /// Sequential witness for the final cut-prefix plus last era.
    pub witness: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CrashVerdict {
    Consistent(ConsistencyReport),
    Inconsistent(Inconsistency),
}

impl CrashVerdict {
    pub fn is_consistent(&self) -> bool {
        matches!(self, CrashVerdict::Consistent(_))
    }
}

/// Reads of blocks no write invocation ever touched are workload bugs, not
/// consistency signals; refuse them up front.
fn check_preconditions(events: &[Event]) -> Result<(), CheckError> {
    let mut written: BTreeSet<BlockId> = BTreeSet::new();
    for (i, e) in events.iter().enumerate() {
        match *e {
            Event::WriteInv { block, .. } => {
                written.insert(block);
            }
            Event::ReadInv { block, .. } => {
                if !written.contains(&block) {
                    return Err(CheckError::UnwrittenRead { index: i, block });
                }
            }
            _ => {}
        }
    }
    Ok(())
}

// ---- linearizability ----

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum OpKind {
    Write,
    Read,
}

/// One completed operation of a resolved history, prepared for scheduling.
struct SchedOp {
    kind: OpKind,
    block: BlockId,
    value: ValueId,
    era: u32,
    preds: Vec<u32>,
    inv: Event,
    res: Event,
}

struct LinProblem {
    ops: Vec<SchedOp>,
    by_thread: Vec<Vec<u32>>,
    era_count: u32,
    /// ops per era, for boundary detection
    era_sizes: Vec<u32>,
}

/// Build the scheduling problem for one resolved (all-complete) history.
/// Returns None when some operation spans a crash: such a history can never
/// be linearized because the crash is ordered strictly inside the operation.
fn build_problem(h: &[Event]) -> Option<LinProblem> {
    let (ops, _) = pair_ops(h);
    let era_of: Vec<u32> = {
        let mut v = Vec::with_capacity(h.len());
        let mut era = 0u32;
        for e in h {
            v.push(era);
            if e.is_crash() {
                era += 1;
            }
        }
        v
    };
    let era_count = h.iter().filter(|e| e.is_crash()).count() as u32 + 1;

    let mut sched: Vec<SchedOp> = Vec::with_capacity(ops.len());
    let mut threads: BTreeMap<ThreadId, usize> = BTreeMap::new();
    let mut by_thread: Vec<Vec<u32>> = Vec::new();
    for op in &ops {
        let res = op.res.expect("resolved history has no pending ops");
        if era_of[op.inv] != era_of[res] {
            return None;
        }
        let inv = h[op.inv];
        let (kind, block, value) = match inv {
            Event::WriteInv { block, value, .. } => (OpKind::Write, block, value),
            Event::ReadInv { block, .. } => {
                let Event::ReadRes { value, .. } = h[res] else {
                    unreachable!()
                };
                (OpKind::Read, block, value)
            }
            _ => unreachable!(),
        };
        let t = inv.thread().unwrap();
        let slot = *threads.entry(t).or_insert_with(|| {
            by_thread.push(Vec::new());
            by_thread.len() - 1
        });
        let id = sched.len() as u32;
        by_thread[slot].push(id);
        sched.push(SchedOp {
            kind,
            block,
            value,
            era: era_of[op.inv],
            preds: Vec::new(),
            inv,
            res: h[res],
        });
    }

    // happens-before edges between ops: a response ordered before an
    // invocation on the same block, or before any PREFLUSH write invocation.
    // Edges into the same op (a response preceding its own op's invocation
    // is impossible) cannot arise since res > inv positionally.
    for (j, op_j) in ops.iter().enumerate() {
        let inv_j = op_j.inv;
        let b_j = sched[j].block;
        let preflush = matches!(h[inv_j], Event::WriteInv { sync, .. } if sync.preflush());
        for (i, op_i) in ops.iter().enumerate() {
            if i == j {
                continue;
            }
            let res_i = op_i.res.unwrap();
            if res_i < inv_j && (sched[i].block == b_j || preflush) {
                sched[j].preds.push(i as u32);
            }
        }
    }

    let mut era_sizes = vec![0u32; era_count as usize];
    for op in &sched {
        era_sizes[op.era as usize] += 1;
    }

    Some(LinProblem {
        ops: sched,
        by_thread,
        era_count,
        era_sizes,
    })
}

struct LinSearch<'p> {
    p: &'p LinProblem,
    /// next unscheduled op index per thread
    frontier: Vec<u32>,
    /// op id -> scheduled?
    done: Vec<bool>,
    /// read-witness state per block: absent = never written, so a read sees
    /// the initial value 0; Some(None) = written only before the last crash,
    /// so no read of it can be scheduled this era; Some(Some(v)) = last wrote v
    lasts: BTreeMap<BlockId, Option<ValueId>>,
    remaining: Vec<u32>,
    current_era: u32,
    order: Vec<u32>,
    memo: HashSet<(Vec<u32>, Vec<(BlockId, Option<ValueId>)>)>,
}

impl<'p> LinSearch<'p> {
    fn run(p: &'p LinProblem, budget: &mut Budget) -> Result<Option<Vec<u32>>, CheckError> {
        let mut s = LinSearch {
            p,
            frontier: vec![0; p.by_thread.len()],
            done: vec![false; p.ops.len()],
            lasts: BTreeMap::new(),
            remaining: p.era_sizes.clone(),
            current_era: 0,
            order: Vec::with_capacity(p.ops.len()),
            memo: HashSet::new(),
        };
        // skip leading eras with no ops at all
        while (s.current_era as usize) < s.remaining.len() && s.remaining[s.current_era as usize] == 0
        {
            s.current_era += 1;
        }
        if s.dfs(budget)? {
            Ok(Some(s.order))
        } else {
            Ok(None)
        }
    }

    fn dfs(&mut self, budget: &mut Budget) -> Result<bool, CheckError> {
        if self.order.len() == self.p.ops.len() {
            return Ok(true);
        }
        budget.spend(1)?;
        let key = (
            self.frontier.clone(),
            self.lasts.iter().map(|(&b, &v)| (b, v)).collect::<Vec<_>>(),
        );
        if !self.memo.insert(key) {
            return Ok(false);
        }
        for t in 0..self.frontier.len() {
            let idx = self.frontier[t] as usize;
            if idx >= self.p.by_thread[t].len() {
                continue;
            }
            let id = self.p.by_thread[t][idx];
            let op = &self.p.ops[id as usize];
            if op.era != self.current_era {
                continue;
            }
            if op.preds.iter().any(|&pr| !self.done[pr as usize]) {
                continue;
            }
            let prev_last = self.lasts.get(&op.block).copied();
            match op.kind {
                OpKind::Read => {
                    let seen = match prev_last {
                        None => op.value == 0,
                        Some(None) => false,
                        Some(Some(v)) => v == op.value,
                    };
                    if !seen {
                        continue;
                    }
                }
                OpKind::Write => {
                    self.lasts.insert(op.block, Some(op.value));
                }
            }
            self.frontier[t] += 1;
            self.done[id as usize] = true;
            self.remaining[op.era as usize] -= 1;
            self.order.push(id);
            let saved_era = self.current_era;
            let mut saved_lasts: Option<BTreeMap<BlockId, Option<ValueId>>> = None;
            if self.remaining[self.current_era as usize] == 0 {
                // era exhausted: advance past it (and any empty eras). Every
                // written block turns stale because a write witness may not
                // span a crash; never-written blocks still read as 0.
                let mut e = self.current_era + 1;
                while (e as usize) < self.remaining.len() && self.remaining[e as usize] == 0 {
                    e += 1;
                }
                if e < self.p.era_count {
                    saved_lasts = Some(self.lasts.clone());
                    for v in self.lasts.values_mut() {
                        *v = None;
                    }
                    self.current_era = e;
                }
            }

            if self.dfs(budget)? {
                return Ok(true);
            }

            if let Some(l) = saved_lasts {
                self.lasts = l;
            }
            self.current_era = saved_era;
            self.order.pop();
            self.remaining[op.era as usize] += 1;
            self.done[id as usize] = false;
            self.frontier[t] -= 1;
            match op.kind {
                OpKind::Write => match prev_last {
                    Some(v) => {
                        self.lasts.insert(op.block, v);
                    }
                    None => {
                        self.lasts.remove(&op.block);
                    }
                },
                OpKind::Read => {}
            }
        }
        Ok(false)
    }
}

fn witness_events(p: &LinProblem, order: &[u32]) -> Vec<Event> {
    let mut out = Vec::with_capacity(order.len() * 2 + p.era_count as usize);
    let mut era = 0u32;
    for &id in order {
        let op = &p.ops[id as usize];
        while era < op.era {
            out.push(Event::Crash);
            era += 1;
        }
        out.push(op.inv);
        out.push(op.res);
    }
    while era + 1 < p.era_count {
        out.push(Event::Crash);
        era += 1;
    }
    out
}

fn lin_inner(events: &[Event], budget: &mut Budget) -> Result<Option<Vec<Event>>, CheckError> {
    for completed in completions(events) {
        budget.spend(1)?;
        let h = truncate(&completed);
        let Some(p) = build_problem(&h) else {
            // completed op spans a crash; no completion choice can fix that
            // because completions never insert across era boundaries
            continue;
        };
        if let Some(order) = LinSearch::run(&p, budget)? {
            return Ok(Some(witness_events(&p, &order)));
        }
    }
    Ok(None)
}

/// Sequential witness for `events` if one exists.
///
/// The witness preserves each thread's subsequence, the happens-before
/// relation, and satisfies reads-see-writes; pending writes may be completed
/// (at the end of their era) and remaining pending invocations dropped.
pub fn is_linearizable(
    events: &[Event],
    budget: &mut Budget,
) -> Result<Option<Vec<Event>>, CheckError> {
    check_preconditions(events)?;
    lin_inner(events, budget)
}

// ---- durable cuts ----

/// Ops of one resolved era with the cut partial order.
struct CutProblem {
    /// op id -> events (inv position, res position) in the resolved era
    ops: Vec<(usize, usize)>,
    preds: Vec<Vec<u32>>,
    forced: Vec<bool>,
    optional: Vec<u32>,
    resolved: Vec<Event>,
}

fn build_cut_problem(resolved: &[Event]) -> CutProblem {
    let (ops, _) = pair_ops(resolved);
    let n = ops.len();
    let mut preds: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (j, op_j) in ops.iter().enumerate() {
        let inv_j = op_j.inv;
        let b_j = resolved[inv_j].block();
        let preflush =
            matches!(resolved[inv_j], Event::WriteInv { sync, .. } if sync.preflush());
        for (i, op_i) in ops.iter().enumerate() {
            if i == j {
                continue;
            }
            let res_i = op_i.res.unwrap();
            if res_i < inv_j && (resolved[res_i].block() == b_j || preflush) {
                preds[j].push(i as u32);
            }
        }
    }
    let mut forced = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        if resolved[op.inv].is_flagged_write_inv() {
            forced[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        for &pr in &preds[i] {
            if !forced[pr as usize] {
                forced[pr as usize] = true;
                stack.push(pr as usize);
            }
        }
    }
    let optional = (0..n as u32).filter(|&i| !forced[i as usize]).collect();
    CutProblem {
        ops: ops.iter().map(|o| (o.inv, o.res.unwrap())).collect(),
        preds,
        forced,
        optional,
        resolved: resolved.to_vec(),
    }
}

fn cut_events(p: &CutProblem, include: &[bool]) -> Vec<Event> {
    let mut keep = vec![false; p.resolved.len()];
    for (i, &inc) in include.iter().enumerate() {
        if inc {
            keep[p.ops[i].0] = true;
            keep[p.ops[i].1] = true;
        }
    }
    p.resolved
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, e)| *e)
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CutMode {
    /// The full definitional family.
    Full,
    /// Skip cuts keeping a read no other kept op depends on. Such a read can
    /// be removed from any valid cut without invalidating it or any later
    /// linearization, so the reduced family is complete for the consistency
    /// search.
    NoDanglingReads,
}

/// Enumerate downward-closed supersets of the forced set: include/exclude
/// over optional ops in order, where include demands every predecessor be
/// forced or already included.
fn enumerate_cuts(
    p: &CutProblem,
    mode: CutMode,
    budget: &mut Budget,
    out: &mut BTreeSet<Vec<Event>>,
) -> Result<(), CheckError> {
    fn emit(
        p: &CutProblem,
        mode: CutMode,
        include: &[bool],
        out: &mut BTreeSet<Vec<Event>>,
    ) {
        if mode == CutMode::NoDanglingReads {
            for &r in &p.optional {
                let r = r as usize;
                if !include[r]
                    || matches!(p.resolved[p.ops[r].0], Event::WriteInv { .. })
                {
                    continue;
                }
                let needed = (0..p.ops.len()).any(|o| {
                    (p.forced[o] || include[o]) && p.preds[o].contains(&(r as u32))
                });
                if !needed {
                    return;
                }
            }
        }
        out.insert(cut_events(p, include));
    }
    fn rec(
        p: &CutProblem,
        mode: CutMode,
        k: usize,
        include: &mut Vec<bool>,
        budget: &mut Budget,
        out: &mut BTreeSet<Vec<Event>>,
    ) -> Result<(), CheckError> {
        budget.spend(1)?;
        if k == p.optional.len() {
            emit(p, mode, include, out);
            return Ok(());
        }
        let id = p.optional[k] as usize;
        rec(p, mode, k + 1, include, budget, out)?;
        let closed = p.preds[id]
            .iter()
            .all(|&pr| p.forced[pr as usize] || include[pr as usize]);
        if closed {
            include[id] = true;
            rec(p, mode, k + 1, include, budget, out)?;
            include[id] = false;
        }
        Ok(())
    }
    let mut include = vec![false; p.ops.len()];
    for (i, &f) in p.forced.iter().enumerate() {
        include[i] = f;
    }
    rec(p, mode, 0, &mut include, budget, out)
}

/// All durable cuts of one era, as event sequences, largest first.
pub fn durable_cuts(era: &[Event], budget: &mut Budget) -> Result<Vec<Vec<Event>>, CheckError> {
    durable_cuts_inner(era, CutMode::Full, budget)
}

fn durable_cuts_inner(
    era: &[Event],
    mode: CutMode,
    budget: &mut Budget,
) -> Result<Vec<Vec<Event>>, CheckError> {
    assert!(
        !era.iter().any(Event::is_crash),
        "durable cuts are defined per era"
    );
    let mut out: BTreeSet<Vec<Event>> = BTreeSet::new();
    for completed in completions(era) {
        budget.spend(1)?;
        let resolved = truncate(&completed);
        let p = build_cut_problem(&resolved);
        enumerate_cuts(&p, mode, budget, &mut out)?;
    }
    let mut cuts: Vec<Vec<Event>> = out.into_iter().collect();
    cuts.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    Ok(cuts)
}

// ---- crash consistency ----

/// Definition-8 search: one durable cut per crashed era such that every
/// cut-prefix plus next era linearizes.
pub fn is_crash_consistent(
    events: &[Event],
    budget: &mut Budget,
) -> Result<CrashVerdict, CheckError> {
    check_preconditions(events)?;
    let eras = eras_of(events);

    // cuts chosen so far, flattened prefix
    fn rec(
        eras: &[&[Event]],
        i: usize,
        prefix: &mut Vec<Event>,
        chosen: &mut Vec<Vec<Event>>,
        deepest_fail: &mut usize,
        budget: &mut Budget,
    ) -> Result<Option<Vec<Event>>, CheckError> {
        let mut concat = prefix.clone();
        concat.extend_from_slice(eras[i]);
        let witness = lin_inner(&concat, budget)?;
        let Some(witness) = witness else {
            *deepest_fail = (*deepest_fail).max(i);
            return Ok(None);
        };
        if i == eras.len() - 1 {
            return Ok(Some(witness));
        }
        for cut in durable_cuts_inner(eras[i], CutMode::NoDanglingReads, budget)? {
            let len_before = prefix.len();
            prefix.extend_from_slice(&cut);
            chosen.push(cut);
            if let Some(w) = rec(eras, i + 1, prefix, chosen, deepest_fail, budget)? {
                return Ok(Some(w));
            }
            chosen.pop();
            prefix.truncate(len_before);
        }
        Ok(None)
    }

    let mut prefix = Vec::new();
    let mut chosen = Vec::new();
    let mut deepest_fail = 0usize;
    match rec(&eras, 0, &mut prefix, &mut chosen, &mut deepest_fail, budget)? {
        Some(witness) => Ok(CrashVerdict::Consistent(ConsistencyReport {
            cuts: chosen,
            witness,
        })),
        None => Ok(CrashVerdict::Inconsistent(Inconsistency {
            era: deepest_fail,
            narrative: diagnose(&eras, deepest_fail),
        })),
    }
}

/// Best-effort explanation of a failed era: the obligations forced on the
/// preceding cut and the reads the era demanded.
fn diagnose(eras: &[&[Event]], era: usize) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = write!(s, "era {era}: no durable-cut assignment linearizes it");
    if era > 0 {
        // obligations are completed flagged writes; a flagged invocation the
        // crash cut off is droppable like any pending op
        let (ops, _) = crate::model::pair_ops(eras[era - 1]);
        let flagged: Vec<String> = ops
            .iter()
            .filter(|op| op.res.is_some())
            .map(|op| &eras[era - 1][op.inv])
            .filter(|e| e.is_flagged_write_inv())
            .map(|e| {
                format!(
                    "write block {} value {} ({:?})",
                    e.block().unwrap(),
                    e.value().unwrap(),
                    e.sync()
                )
            })
            .collect();
        if flagged.is_empty() {
            let _ = write!(s, "; era {} had no flagged writes", era - 1);
        } else {
            let _ = write!(
                s,
                "; era {} obligations that every cut must keep: {}",
                era - 1,
                flagged.join(", ")
            );
        }
    }
    let reads: Vec<String> = eras[era]
        .iter()
        .filter_map(|e| match e {
            Event::ReadRes { block, value, .. } => {
                Some(format!("read of block {block} returned {value}"))
            }
            _ => None,
        })
        .collect();
    if !reads.is_empty() {
        let _ = write!(s, "; {}", reads.join(", "));
    }
    s
}
