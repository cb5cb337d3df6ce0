//! History generators for validating the checker against the oracle.
//!
//! `for_each_history` walks every well-formed history up to a size bound;
//! `random_history` samples one. Write values are canonical (the i-th write
//! invocation carries value i+1; 0 is reserved for initial block contents),
//! so histories differ only in structure. Read responses choose among values
//! some earlier write invocation put on that block plus the initial value 0
//! (reachable when a crash drops every write to the block), optionally plus
//! one impossible value to exercise rejection paths. Reads of never-written
//! blocks are not generated; the checker treats those as precondition
//! violations, not verdicts.
//!
//! Sync flags range over NONE, FUA and PREFLUSH. FUA|PREFLUSH behaves
//! exactly like PREFLUSH at the model level (same forcing, same ordering
//! edge), so enumerating it would only repeat verdicts.

use super::{BlockId, Event, SyncFlags, ThreadId, ValueId};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub max_events: usize,
    pub threads: u32,
    pub blocks: u64,
    pub max_crashes: usize,
    /// Prune relabelings: thread 1 may not act before thread 0, block 1 may
    /// not be touched before block 0. Verdicts are invariant under
    /// relabeling, so this only removes duplicates.
    pub symmetry_reduce: bool,
}

impl GenConfig {
    pub fn small_exhaustive() -> GenConfig {
        GenConfig {
            max_events: 8,
            threads: 2,
            blocks: 2,
            max_crashes: 1,
            symmetry_reduce: true,
        }
    }
}

const FLAG_CHOICES: [SyncFlags; 3] = [SyncFlags::NONE, SyncFlags::FUA, SyncFlags::PREFLUSH];

struct Walk<'f, F> {
    cfg: GenConfig,
    events: Vec<Event>,
    /// block+value of the pending op per thread; None = idle,
    /// Some((block, Some(v))) = pending write, Some((block, None)) = pending read
    pending: Vec<Option<(BlockId, Option<ValueId>)>>,
    /// a thread whose op was cut off by a crash never acts again: the op can
    /// neither complete (it would span the crash) nor be superseded (the
    /// thread would have two outstanding invocations)
    dead: Vec<bool>,
    crashes: usize,
    next_value: ValueId,
    /// values written per block so far (invocation order)
    written: Vec<Vec<ValueId>>,
    threads_used: u32,
    blocks_used: u64,
    visit: &'f mut F,
}

impl<F: FnMut(&[Event])> Walk<'_, F> {
    fn go(&mut self) {
        (self.visit)(&self.events);
        if self.events.len() == self.cfg.max_events {
            return;
        }

        let thread_cap = if self.cfg.symmetry_reduce {
            (self.threads_used + 1).min(self.cfg.threads)
        } else {
            self.cfg.threads
        };
        let block_cap = if self.cfg.symmetry_reduce {
            (self.blocks_used + 1).min(self.cfg.blocks)
        } else {
            self.cfg.blocks
        };

        for t in 0..thread_cap {
            if self.dead[t as usize] {
                continue;
            }
            match self.pending[t as usize] {
                None => {
                    for b in 0..block_cap {
                        for sync in FLAG_CHOICES {
                            let v = self.next_value;
                            self.push_state(t, b);
                            self.pending[t as usize] = Some((b, Some(v)));
                            self.next_value += 1;
                            self.written[b as usize].push(v);
                            self.events.push(Event::WriteInv {
                                thread: t,
                                block: b,
                                value: v,
                                sync,
                            });
                            self.go();
                            self.events.pop();
                            self.written[b as usize].pop();
                            self.next_value -= 1;
                            self.pending[t as usize] = None;
                            self.pop_state();
                        }
                        if !self.written[b as usize].is_empty() {
                            self.push_state(t, b);
                            self.pending[t as usize] = Some((b, None));
                            self.events.push(Event::ReadInv { thread: t, block: b });
                            self.go();
                            self.events.pop();
                            self.pending[t as usize] = None;
                            self.pop_state();
                        }
                    }
                }
                Some((b, Some(v))) => {
                    self.pending[t as usize] = None;
                    self.events.push(Event::WriteRes { thread: t, block: b });
                    self.go();
                    self.events.pop();
                    self.pending[t as usize] = Some((b, Some(v)));
                }
                Some((b, None)) => {
                    let mut candidates: Vec<ValueId> = vec![0];
                    candidates.extend_from_slice(&self.written[b as usize]);
                    for v in candidates {
                        self.pending[t as usize] = None;
                        self.events.push(Event::ReadRes {
                            thread: t,
                            block: b,
                            value: v,
                        });
                        self.go();
                        self.events.pop();
                        self.pending[t as usize] = Some((b, None));
                    }
                }
            }
        }

        if self.crashes < self.cfg.max_crashes && !self.events.is_empty() {
            self.crashes += 1;
            let killed: Vec<usize> = (0..self.pending.len())
                .filter(|&t| self.pending[t].is_some() && !self.dead[t])
                .collect();
            for &t in &killed {
                self.dead[t] = true;
            }
            self.events.push(Event::Crash);
            self.go();
            self.events.pop();
            for &t in &killed {
                self.dead[t] = false;
            }
            self.crashes -= 1;
        }
    }

    fn push_state(&mut self, t: ThreadId, b: BlockId) {
        self.threads_used = self.threads_used.max(t + 1);
        self.blocks_used = self.blocks_used.max(b + 1);
    }

    fn pop_state(&mut self) {
        // threads_used/blocks_used only grow along a branch; recompute from
        // the remaining events on unwind
        self.threads_used = self
            .events
            .iter()
            .filter_map(Event::thread)
            .map(|t| t + 1)
            .max()
            .unwrap_or(0);
        self.blocks_used = self
            .events
            .iter()
            .filter_map(Event::block)
            .map(|b| b + 1)
            .max()
            .unwrap_or(0);
    }

}

/// Visit every well-formed history with at most `cfg.max_events` events,
/// including the empty one.
pub fn for_each_history<F: FnMut(&[Event])>(cfg: GenConfig, visit: &mut F) {
    let mut w = Walk {
        cfg,
        events: Vec::with_capacity(cfg.max_events),
        pending: vec![None; cfg.threads as usize],
        dead: vec![false; cfg.threads as usize],
        crashes: 0,
        next_value: 1,
        written: vec![Vec::new(); cfg.blocks as usize],
        threads_used: 0,
        blocks_used: 0,
        visit,
    };
    w.go();
}

/// One random well-formed history. `bogus_value_weight` is the denominator
/// for sampling an impossible read value (0 disables).
pub fn random_history<R: Rng>(rng: &mut R, cfg: GenConfig, bogus_value_weight: u32) -> Vec<Event> {
    let len = rng.gen_range(0..=cfg.max_events);
    let mut events: Vec<Event> = Vec::with_capacity(len);
    let mut pending: Vec<Option<(BlockId, bool)>> = vec![None; cfg.threads as usize];
    let mut dead: Vec<bool> = vec![false; cfg.threads as usize];
    let mut written: Vec<Vec<ValueId>> = vec![Vec::new(); cfg.blocks as usize];
    let mut crashes = 0usize;
    let mut next_value: ValueId = 1;

    while events.len() < len {
        let idle: Vec<u32> = (0..cfg.threads)
            .filter(|&t| pending[t as usize].is_none() && !dead[t as usize])
            .collect();
        let busy: Vec<u32> = (0..cfg.threads)
            .filter(|&t| pending[t as usize].is_some() && !dead[t as usize])
            .collect();
        // moves: 0 = invocation, 1 = response, 2 = crash
        let mut moves: Vec<u8> = Vec::new();
        if !idle.is_empty() {
            moves.push(0);
        }
        if !busy.is_empty() {
            moves.push(1);
        }
        if crashes < cfg.max_crashes && !events.is_empty() {
            moves.push(2);
        }
        if moves.is_empty() {
            break;
        }
        match moves[rng.gen_range(0..moves.len())] {
            0 => {
                let t = idle[rng.gen_range(0..idle.len())];
                let b = rng.gen_range(0..cfg.blocks);
                let can_read = !written[b as usize].is_empty();
                if can_read && rng.gen_bool(0.5) {
                    pending[t as usize] = Some((b, false));
                    events.push(Event::ReadInv { thread: t, block: b });
                } else {
                    let sync = FLAG_CHOICES[rng.gen_range(0..FLAG_CHOICES.len())];
                    let v = next_value;
                    next_value += 1;
                    written[b as usize].push(v);
                    pending[t as usize] = Some((b, true));
                    events.push(Event::WriteInv {
                        thread: t,
                        block: b,
                        value: v,
                        sync,
                    });
                }
            }
            1 => {
                let t = busy[rng.gen_range(0..busy.len())];
                let (b, is_write) = pending[t as usize].take().unwrap();
                if is_write {
                    events.push(Event::WriteRes { thread: t, block: b });
                } else {
                    let vals = &written[b as usize];
                    let v = if bogus_value_weight > 0 && rng.gen_range(0..bogus_value_weight) == 0 {
                        u64::MAX
                    } else {
                        // index len() picks the initial value 0
                        match rng.gen_range(0..=vals.len()) {
                            i if i == vals.len() => 0,
                            i => vals[i],
                        }
                    };
                    events.push(Event::ReadRes {
                        thread: t,
                        block: b,
                        value: v,
                    });
                }
            }
            _ => {
                crashes += 1;
                for t in 0..cfg.threads as usize {
                    if pending[t].is_some() {
                        dead[t] = true;
                    }
                }
                events.push(Event::Crash);
            }
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::History;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_generated_history_is_well_formed() {
        let cfg = GenConfig {
            max_events: 5,
            threads: 2,
            blocks: 2,
            max_crashes: 1,
            symmetry_reduce: true,
        };
        let mut count = 0usize;
        for_each_history(cfg, &mut |h| {
            History::from_events(h.to_vec()).expect("generator output must validate");
            count += 1;
        });
        // fixed point: catches accidental generator changes
        assert_eq!(count, 5_935);
    }

    #[test]
    fn symmetry_reduction_only_removes_relabelings() {
        let mut reduced = 0usize;
        let mut full = 0usize;
        let cfg = GenConfig {
            max_events: 4,
            threads: 2,
            blocks: 2,
            max_crashes: 1,
            symmetry_reduce: true,
        };
        for_each_history(cfg, &mut |_| reduced += 1);
        for_each_history(
            GenConfig {
                symmetry_reduce: false,
                ..cfg
            },
            &mut |_| full += 1,
        );
        assert!(reduced < full);
    }

    #[test]
    fn random_histories_are_well_formed() {
        let cfg = GenConfig {
            max_events: 12,
            threads: 3,
            blocks: 3,
            max_crashes: 2,
            symmetry_reduce: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let h = random_history(&mut rng, cfg, 8);
            History::from_events(h).expect("random history must validate");
        }
    }
}
