//! Disk self-consistency: every schedule of submissions, completions and
//! crashes against the virtual disk must yield a history the crash
//! consistency checker accepts. The disk's crash model (per-block suffix
//! retention behind flush barriers) is exactly as strong as a durable cut;
//! these tests drive randomized schedules and let the model be the judge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollshield_core::model::{self, Budget, Event, SyncFlags};
use rollshield_core::storage::{IoId, IoKind, IoResult, VirtualDisk};
use std::collections::BTreeSet;

const BLOCK_SIZE: u32 = 512;

fn page_for(value: u64, block: u64) -> Vec<u8> {
    let mut p = vec![0u8; BLOCK_SIZE as usize];
    p[..8].copy_from_slice(&value.to_le_bytes());
    p[8..16].copy_from_slice(&block.to_le_bytes());
    p
}

fn value_of(page: &[u8]) -> u64 {
    u64::from_le_bytes(page[..8].try_into().unwrap())
}

struct Pending {
    io: IoId,
    thread: u32,
    block: u64,
    /// Some(v) for writes, None for reads
    write: Option<u64>,
}

/// Drive one randomized schedule and record the submission-level history.
fn run_schedule(seed: u64) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: u64 = 3;
    let mut disk = VirtualDisk::new(BLOCK_SIZE, blocks, 0);
    let mut events: Vec<Event> = Vec::new();

    let mut next_value: u64 = 1;
    let mut next_thread: u32 = 0;
    let mut idle: Vec<u32> = Vec::new();
    for _ in 0..3 {
        idle.push(next_thread);
        next_thread += 1;
    }
    let mut inflight: Vec<Pending> = Vec::new();
    let mut ever_written: BTreeSet<u64> = BTreeSet::new();
    let mut crashes = 0usize;

    let flag_choices = [
        SyncFlags::NONE,
        SyncFlags::NONE,
        SyncFlags::FUA,
        SyncFlags::PREFLUSH,
        SyncFlags::BOTH,
    ];

    let steps = rng.gen_range(8..=16);
    for _ in 0..steps {
        // 0 = submit, 1 = complete, 2 = crash
        let mut moves: Vec<u8> = Vec::new();
        if !idle.is_empty() {
            moves.push(0);
        }
        if !inflight.is_empty() {
            moves.push(1);
        }
        if crashes < 2 && !events.is_empty() {
            moves.push(2);
        }
        match moves[rng.gen_range(0..moves.len())] {
            0 => {
                let t = idle.swap_remove(rng.gen_range(0..idle.len()));
                let b = rng.gen_range(0..blocks);
                let do_read = !ever_written.is_empty() && rng.gen_bool(0.4);
                if do_read {
                    // only ever-written blocks; reading a block no write ever
                    // touched is a checker precondition violation
                    let bs: Vec<u64> = ever_written.iter().copied().collect();
                    let b = bs[rng.gen_range(0..bs.len())];
                    let io = disk.submit(IoKind::Read { block: b }).unwrap();
                    events.push(Event::ReadInv { thread: t, block: b });
                    inflight.push(Pending {
                        io,
                        thread: t,
                        block: b,
                        write: None,
                    });
                } else {
                    let v = next_value;
                    next_value += 1;
                    let sync = flag_choices[rng.gen_range(0..flag_choices.len())];
                    let io = disk
                        .submit(IoKind::Write {
                            block: b,
                            payload: page_for(v, b),
                            sync,
                        })
                        .unwrap();
                    ever_written.insert(b);
                    events.push(Event::WriteInv {
                        thread: t,
                        block: b,
                        value: v,
                        sync,
                    });
                    inflight.push(Pending {
                        io,
                        thread: t,
                        block: b,
                        write: Some(v),
                    });
                }
            }
            1 => {
                let p = inflight.swap_remove(rng.gen_range(0..inflight.len()));
                match disk.complete(p.io) {
                    IoResult::Write => {
                        assert!(p.write.is_some());
                        events.push(Event::WriteRes {
                            thread: p.thread,
                            block: p.block,
                        });
                    }
                    IoResult::Read(page) => {
                        assert!(p.write.is_none());
                        events.push(Event::ReadRes {
                            thread: p.thread,
                            block: p.block,
                            value: value_of(&page),
                        });
                    }
                    IoResult::Dropped => panic!("no crash intervened, io must be live"),
                }
                idle.push(p.thread);
            }
            _ => {
                crashes += 1;
                disk.crash_seeded(&mut rng);
                events.push(Event::Crash);
                // threads with an op cut off by the crash never act again;
                // their ids die with the era. Completing their ids now must
                // report Dropped, not data.
                for p in inflight.drain(..) {
                    assert_eq!(disk.complete(p.io), IoResult::Dropped);
                }
                while idle.len() < 3 {
                    idle.push(next_thread);
                    next_thread += 1;
                }
                // probe what survived: fresh threads read every block any
                // write ever touched
                for &b in &ever_written {
                    let t = next_thread;
                    next_thread += 1;
                    let io = disk.submit(IoKind::Read { block: b }).unwrap();
                    events.push(Event::ReadInv { thread: t, block: b });
                    let IoResult::Read(page) = disk.complete(io) else {
                        panic!("read must complete with data")
                    };
                    events.push(Event::ReadRes {
                        thread: t,
                        block: b,
                        value: value_of(&page),
                    });
                }
            }
        }
    }
    events
}

#[test]
fn randomized_schedules_are_crash_consistent() {
    for seed in 0..400u64 {
        let events = run_schedule(seed);
        let verdict = model::is_crash_consistent(&events, &mut Budget::default())
            .unwrap_or_else(|e| panic!("seed {seed}: checker error {e:?} on {events:?}"));
        assert!(
            verdict.is_consistent(),
            "seed {seed}: disk produced an inconsistent history:\n{events:?}\n{verdict:?}"
        );
    }
}

/// The fsync shape: journal data unflagged, then the commit record carrying
/// FUA|PREFLUSH. Whatever the crash keeps, the commit record and everything
/// completed before it must survive, and the checker must agree.
#[test]
fn fsync_sequence_survives_every_crash_point() {
    for seed in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut disk = VirtualDisk::new(BLOCK_SIZE, 4, 0);
        let mut events: Vec<Event> = Vec::new();

        let mut do_write = |disk: &mut VirtualDisk, events: &mut Vec<Event>, t, b, v, sync| {
            let io = disk
                .submit(IoKind::Write {
                    block: b,
                    payload: page_for(v, b),
                    sync,
                })
                .unwrap();
            events.push(Event::WriteInv {
                thread: t,
                block: b,
                value: v,
                sync,
            });
            assert_eq!(disk.complete(io), IoResult::Write);
            events.push(Event::WriteRes { thread: t, block: b });
        };

        do_write(&mut disk, &mut events, 0, 0, 1, SyncFlags::NONE);
        do_write(&mut disk, &mut events, 0, 1, 2, SyncFlags::NONE);
        do_write(&mut disk, &mut events, 0, 2, 3, SyncFlags::BOTH);
        // post-barrier write may or may not survive
        do_write(&mut disk, &mut events, 0, 3, 4, SyncFlags::NONE);

        disk.crash_seeded(&mut rng);
        events.push(Event::Crash);

        for b in 0..4u64 {
            assert_eq!(
                value_of(disk.logical_read(b)),
                if b < 3 { b + 1 } else { value_of(disk.logical_read(3)) },
                "blocks written before the flagged commit must survive"
            );
            let t = 1 + b as u32;
            let io = disk.submit(IoKind::Read { block: b }).unwrap();
            events.push(Event::ReadInv { thread: t, block: b });
            let IoResult::Read(page) = disk.complete(io) else {
                panic!("read must complete")
            };
            events.push(Event::ReadRes {
                thread: t,
                block: b,
                value: value_of(&page),
            });
        }
        let b3 = value_of(disk.logical_read(3));
        assert!(b3 == 0 || b3 == 4, "block 3 is either lost or intact");

        let verdict = model::is_crash_consistent(&events, &mut Budget::default()).unwrap();
        assert!(verdict.is_consistent(), "seed {seed}: {events:?}");
    }
}
