//! The discrete-event world: machines, links, clients, and the adversary.
//!
//! A machine is a slot that survives restarts; its disk persists while its
//! software identity changes. Every restart mints a fresh node id and runs
//! the recovery protocol from scratch, so the cluster configuration moves
//! forward by ballots exactly as it would across real process generations.
//!
//! Faults are interpreted against machine indices (the schedule's notion of
//! "node 0" means machine 0 regardless of how many identities it has worn).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::mem;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Event, SyncFlags, ThreadId, ValueId};
use crate::recovery::{
    AbortReason, Coordinator, MemberOutcome, MemberResync, MemberStart, Outcome, Recovered,
    RecoveryEffect, ReconfigBody,
};
use crate::replica::{AppError, AppOpId, Effect, Replica};
use crate::storage::{DiskImage, IoId, Superblock, VirtualDisk};
use crate::transport::{
    Configuration, ConfigService, FaultAction, MsgType, NodeId, WireMessage,
};

use super::{RunConfig, RunStats, Workload};

const RESTART_DELAY_US: u64 = 10_000;
const REBOOT_DELAY_US: u64 = 20_000;
const RETRY_DELAY_US: u64 = 50_000;
/// Started recovery rounds before the run is declared wedged.
const MAX_ROUNDS: u64 = 256;
/// Failed restart attempts per machine before it stays down.
const RETRY_CAP: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Net {
        to: NodeId,
        from: NodeId,
        bytes: Vec<u8>,
    },
    DiskDone {
        mach: usize,
        inc: u32,
        io: IoId,
    },
    Timer {
        mach: usize,
        inc: u32,
        token: u64,
    },
    /// Bring a dead machine back up and into recovery.
    Restart {
        mach: usize,
    },
    /// A cold machine tries recovery again.
    Retry {
        mach: usize,
        inc: u32,
    },
    /// Self-reboot of a machine whose node halted on an integrity fault.
    Reboot {
        mach: usize,
        inc: u32,
    },
    /// A client thread wants to issue its next operation.
    Issue {
        thread: usize,
    },
}

#[derive(PartialEq, Eq)]
struct Scheduled {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

enum Sw {
    Serving(Box<Replica>),
    Recovering(Box<Coordinator>),
    Resyncing(Box<MemberResync>),
    /// Power off, restart pending. The disk is all that remains.
    Dead(VirtualDisk),
    /// Process up but holding no role: lost a recovery race, lost its
    /// designated mid-resync, or waiting for peers. Answers ballot pings
    /// from its persisted promise and can join a configuration cold.
    Cold(VirtualDisk),
    /// Transient placeholder while ownership moves between states.
    Gone,
}

struct Machine {
    inc: u32,
    node: NodeId,
    sw: Sw,
    retries: u32,
}

struct Client {
    tid: ThreadId,
    busy: bool,
}

struct PendingOp {
    slot: usize,
    tid: ThreadId,
    era: u32,
    block: u64,
    value: ValueId,
    sync: SyncFlags,
    is_write: bool,
    invoked: u64,
    /// Durability probe: the exact value this read must return.
    probe: Option<ValueId>,
}

#[derive(Debug, Clone, Copy)]
enum ModKind {
    Drop,
    Dup,
    Delay(u64),
    Corrupt,
}

struct LinkMod {
    kind: ModKind,
    left: u32,
}

pub struct World {
    cfg: RunConfig,
    rng: ChaCha8Rng,
    now: u64,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Scheduled>>,
    machines: Vec<Machine>,
    svc: ConfigService,
    master: [u8; 32],
    codec: crate::storage::CipherContext,
    next_node_id: NodeId,

    threads: Vec<Client>,
    parked: BTreeSet<usize>,
    next_thread_id: ThreadId,
    issued: u64,
    writes_issued: u64,
    next_value: ValueId,
    next_op: AppOpId,
    seq_cursor: u64,
    faults_applied_through: u64,

    era: u32,
    events: Vec<Event>,
    written: BTreeSet<u64>,
    written_vec: Vec<u64>,
    pending: BTreeMap<AppOpId, PendingOp>,

    durable_expect: BTreeMap<u64, ValueId>,
    superseded: BTreeSet<u64>,
    probe_queue: VecDeque<(u64, ValueId)>,
    probe_inflight: bool,

    link_mods: BTreeMap<(usize, usize), Vec<LinkMod>>,
    snapshots: BTreeMap<(usize, String), DiskImage>,

    rounds_started: u64,
    halted_terminal: bool,
    aborted: bool,
    unflagged_lat: Vec<u64>,
    flagged_lat: Vec<u64>,
    stats: RunStats,
}

fn master_of(seed: u64) -> [u8; 32] {
    let mut m = [0u8; 32];
    for (i, b) in m.iter_mut().enumerate() {
        *b = seed.to_le_bytes()[i % 8] ^ (0x9e + i as u8);
    }
    m
}

fn page_for(block_size: u32, value: ValueId, block: u64) -> Vec<u8> {
    let mut p = vec![0u8; block_size as usize];
    p[..8].copy_from_slice(&value.to_le_bytes());
    p[8..16].copy_from_slice(&block.to_le_bytes());
    p
}

fn value_of(data: &[u8]) -> ValueId {
    u64::from_le_bytes(data[..8].try_into().unwrap())
}

impl World {
    pub fn new(cfg: RunConfig) -> World {
        let master = master_of(cfg.seed);
        let mut w = World {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
            machines: Vec::new(),
            svc: ConfigService::new(),
            master,
            codec: crate::storage::CipherContext::new(master, 0),
            next_node_id: cfg.nodes,
            threads: Vec::new(),
            parked: BTreeSet::new(),
            next_thread_id: cfg.threads,
            issued: 0,
            writes_issued: 0,
            next_value: 1,
            next_op: 1,
            seq_cursor: 0,
            faults_applied_through: 0,
            era: 0,
            events: Vec::new(),
            written: BTreeSet::new(),
            written_vec: Vec::new(),
            pending: BTreeMap::new(),
            durable_expect: BTreeMap::new(),
            superseded: BTreeSet::new(),
            probe_queue: VecDeque::new(),
            probe_inflight: false,
            link_mods: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            rounds_started: 0,
            halted_terminal: false,
            aborted: false,
            unflagged_lat: Vec::new(),
            flagged_lat: Vec::new(),
            stats: RunStats::default(),
            cfg,
        };
        w.bootstrap();
        w
    }

    fn bootstrap(&mut self) {
        let members: Vec<NodeId> = (0..self.cfg.nodes).collect();
        let conf = Configuration::new(1, members, self.cfg.f).expect("validated shape");
        let fresh_disk = |cfg: &RunConfig| {
            VirtualDisk::new(cfg.block_size, cfg.blocks, cfg.merkle_disk_layers)
        };
        let primary = Replica::initialize_primary(
            0,
            0,
            conf.clone(),
            self.master,
            fresh_disk(&self.cfg),
            &mut self.svc,
            self.cfg.mutation,
        )
        .expect("first ballot is uncontested");
        self.machines.push(Machine {
            inc: 0,
            node: 0,
            sw: Sw::Serving(Box::new(primary)),
            retries: 0,
        });
        for id in 1..self.cfg.nodes {
            let backup = Replica::format_backup(
                id,
                0,
                conf.clone(),
                self.master,
                fresh_disk(&self.cfg),
                self.cfg.mutation,
            );
            self.machines.push(Machine {
                inc: 0,
                node: id,
                sw: Sw::Serving(Box::new(backup)),
                retries: 0,
            });
        }
        for t in 0..self.cfg.threads {
            self.threads.push(Client { tid: t, busy: false });
            self.schedule(0, Ev::Issue { thread: t as usize });
        }
    }

    // ---- scheduling primitives ----

    fn schedule(&mut self, delay: u64, ev: Ev) {
        let s = Scheduled {
            at: self.now + delay,
            seq: self.next_seq,
            ev,
        };
        self.next_seq += 1;
        self.heap.push(Reverse(s));
    }

    fn jitter(&mut self, base: u64) -> u64 {
        if base == 0 {
            0
        } else {
            base + self.rng.gen_range(0..=base / 4)
        }
    }

    fn stopped(&self) -> bool {
        self.halted_terminal || self.aborted || self.stats.internal_error.is_some()
    }

    fn internal_error(&mut self, msg: String) {
        if self.stats.internal_error.is_none() {
            self.stats.internal_error = Some(msg);
        }
    }

    fn machine_by_node(&self, node: NodeId) -> Option<usize> {
        self.machines.iter().position(|m| m.node == node)
    }

    fn active_primary(&self) -> Option<usize> {
        self.machines.iter().position(|m| {
            matches!(&m.sw, Sw::Serving(r) if r.is_primary() && r.is_active() && !r.is_halted())
        })
    }

    /// The cluster accepts client operations only when the primary is active
    /// and every configured member is serving: a write replicated to a
    /// member that is still resyncing would be dropped on the floor and its
    /// acknowledgement could never arrive.
    fn ready_primary(&self) -> Option<usize> {
        let pm = self.active_primary()?;
        if self.probe_inflight || !self.probe_queue.is_empty() {
            return None;
        }
        let Sw::Serving(r) = &self.machines[pm].sw else {
            unreachable!()
        };
        for &id in &r.conf().members {
            let i = self.machine_by_node(id)?;
            match &self.machines[i].sw {
                Sw::Serving(x) if !x.is_halted() => {}
                _ => return None,
            }
        }
        Some(pm)
    }

    // ---- main loop ----

    pub(crate) fn drive(&mut self) {
        while let Some(Reverse(s)) = self.heap.pop() {
            debug_assert!(s.at >= self.now, "time went backwards");
            self.now = s.at;
            self.dispatch(s.ev);
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Net { to, from, bytes } => self.deliver(to, from, bytes),
            Ev::DiskDone { mach, inc, io } => self.disk_done(mach, inc, io),
            Ev::Timer { mach, inc, token } => self.timer(mach, inc, token),
            Ev::Restart { mach } => {
                if self.stopped() {
                    return;
                }
                if matches!(self.machines[mach].sw, Sw::Dead(_)) {
                    let Sw::Dead(disk) = mem::replace(&mut self.machines[mach].sw, Sw::Gone)
                    else {
                        unreachable!()
                    };
                    self.try_recover(mach, disk);
                }
            }
            Ev::Retry { mach, inc } => {
                if self.stopped() || self.machines[mach].inc != inc {
                    return;
                }
                if matches!(self.machines[mach].sw, Sw::Cold(_)) {
                    let Sw::Cold(disk) = mem::replace(&mut self.machines[mach].sw, Sw::Gone)
                    else {
                        unreachable!()
                    };
                    self.try_recover(mach, disk);
                }
            }
            Ev::Reboot { mach, inc } => {
                if self.stopped() || self.machines[mach].inc != inc {
                    return;
                }
                if matches!(&self.machines[mach].sw, Sw::Serving(r) if r.is_halted()) {
                    self.crash_machine(mach);
                }
            }
            Ev::Issue { thread } => self.issue(thread),
        }
    }

    // ---- network ----

    fn send_frame(&mut self, from_mach: usize, to: NodeId, msg: &WireMessage) {
        let bytes = msg.encode(&self.codec);
        self.send_bytes(from_mach, to, bytes);
    }

    fn send_bytes(&mut self, from_mach: usize, to: NodeId, mut bytes: Vec<u8>) {
        let mut delay = self.jitter(self.cfg.link_delay_us);
        let mut dup = false;
        if let Some(tm) = self.machine_by_node(to) {
            if let Some(mods) = self.link_mods.get_mut(&(from_mach, tm)) {
                for m in mods.iter_mut() {
                    if m.left == 0 {
                        continue;
                    }
                    match m.kind {
                        ModKind::Drop => {
                            m.left -= 1;
                            return;
                        }
                        ModKind::Delay(us) => {
                            m.left -= 1;
                            delay += us;
                        }
                        ModKind::Corrupt => {
                            m.left -= 1;
                            let at = bytes.len() / 2;
                            bytes[at] ^= 0x40;
                        }
                        ModKind::Dup => {
                            m.left -= 1;
                            dup = true;
                        }
                    }
                }
                mods.retain(|m| m.left > 0);
            }
        }
        let from = self.machines[from_mach].node;
        if dup {
            self.schedule(
                delay + 1,
                Ev::Net {
                    to,
                    from,
                    bytes: bytes.clone(),
                },
            );
        }
        self.schedule(delay, Ev::Net { to, from, bytes });
    }

    fn deliver(&mut self, to: NodeId, from: NodeId, bytes: Vec<u8>) {
        let Some(m) = self.machine_by_node(to) else {
            return; // addressed to an identity that no longer exists
        };
        // frames that change a machine's life cycle are interpreted here;
        // everything else goes straight to whatever software is running
        if let Ok(msg) = WireMessage::decode(&bytes, &self.codec) {
            match msg.mtype {
                MsgType::Reconfig => {
                    self.handle_reconfig(m, from, msg, bytes);
                    return;
                }
                MsgType::P1a if matches!(self.machines[m].sw, Sw::Cold(_)) => {
                    self.cold_p1a(m, from, &msg);
                    return;
                }
                _ => {}
            }
        }
        enum Picked {
            Replica(Vec<Effect>, bool),
            Coord(Outcome),
            Member(MemberOutcome),
            Nothing,
        }
        let picked = match &mut self.machines[m].sw {
            Sw::Serving(r) => {
                let watch = r.is_primary() && r.is_active() && !r.is_halted();
                let effs = r.receive(from, &bytes);
                let fenced = watch && !r.is_active() && !r.is_halted();
                Picked::Replica(effs, fenced)
            }
            Sw::Recovering(c) => Picked::Coord(c.on_message(from, &bytes, self.now)),
            Sw::Resyncing(r) => Picked::Member(r.on_message(from, &bytes, self.now)),
            Sw::Dead(_) | Sw::Cold(_) | Sw::Gone => Picked::Nothing,
        };
        match picked {
            Picked::Replica(effs, fenced) => {
                self.apply_effects(m, effs);
                if fenced {
                    self.era_end();
                }
            }
            Picked::Coord(out) => self.coord_outcome(m, out),
            Picked::Member(out) => self.member_outcome(m, out),
            Picked::Nothing => {}
        }
    }

    /// Promise made from cold storage: a machine with no running role still
    /// answers ballot pings so quorums can count it, flagged cold so it can
    /// never be designated.
    fn cold_p1a(&mut self, m: usize, from: NodeId, msg: &WireMessage) {
        let bs = self.cfg.block_size;
        let Sw::Cold(disk) = &mut self.machines[m].sw else {
            unreachable!()
        };
        let Some(mut sb) = Superblock::decode(disk.read_meta(0)) else {
            return; // unreadable superblock: stay silent, stay cold
        };
        if msg.ballot < sb.seen_ballot {
            return;
        }
        if msg.ballot > sb.seen_ballot {
            sb.seen_ballot = msg.ballot;
            let page = sb.encode(bs);
            disk.write_meta(0, &page);
        }
        let mut payload = sb.ballot.to_le_bytes().to_vec();
        payload.push(1);
        let reply = WireMessage {
            mtype: MsgType::P1b,
            ballot: msg.ballot,
            write_index: sb.durable_write_index,
            block: 0,
            flags: SyncFlags::NONE,
            payload,
        };
        self.send_frame(m, from, &reply);
    }

    fn handle_reconfig(&mut self, m: usize, from: NodeId, msg: WireMessage, bytes: Vec<u8>) {
        let Some(body) = ReconfigBody::decode(msg.ballot, &msg.payload) else {
            return;
        };
        enum Plan {
            Warm,
            WarmBusy,
            Cold,
            Ignore,
        }
        let plan = match &self.machines[m].sw {
            Sw::Serving(r) => {
                if r.is_halted() || r.seen_ballot() != msg.ballot {
                    Plan::Ignore
                } else if r.disk().inflight_count() > 0 {
                    Plan::WarmBusy
                } else {
                    Plan::Warm
                }
            }
            Sw::Cold(_) => Plan::Cold,
            _ => Plan::Ignore,
        };
        let start = match plan {
            Plan::Ignore => return,
            Plan::WarmBusy => {
                // the replica must be drained before its state moves;
                // completions are already on the heap, try again after
                let retry = self.cfg.disk_delay_us + 1;
                let to = self.machines[m].node;
                self.schedule(retry, Ev::Net { to, from, bytes });
                return;
            }
            Plan::Warm => {
                let Sw::Serving(r) = mem::replace(&mut self.machines[m].sw, Sw::Gone) else {
                    unreachable!()
                };
                self.fold_counters(&r);
                MemberResync::start_warm(*r, &body, msg.write_index, self.now)
            }
            Plan::Cold => {
                let Sw::Cold(disk) = mem::replace(&mut self.machines[m].sw, Sw::Gone) else {
                    unreachable!()
                };
                MemberResync::start_cold(
                    self.machines[m].node,
                    self.machines[m].inc,
                    self.master,
                    disk,
                    &body,
                    msg.write_index,
                    self.now,
                    self.cfg.mutation,
                )
            }
        };
        match start {
            MemberStart::Immediate(r) => {
                self.machines[m].sw = Sw::Serving(r);
                self.check_resync_equality(m);
                self.maybe_unpark();
            }
            MemberStart::Running(mr, effs) => {
                self.machines[m].sw = Sw::Resyncing(mr);
                self.apply_recovery_effects(m, effs);
            }
        }
    }

    // ---- machine life cycle ----

    fn crash_machine(&mut self, m: usize) {
        if matches!(self.machines[m].sw, Sw::Dead(_)) {
            return;
        }
        let sw = mem::replace(&mut self.machines[m].sw, Sw::Gone);
        let (mut disk, was_active_primary) = match sw {
            Sw::Serving(r) => {
                self.fold_counters(&r);
                let ap = r.is_primary() && r.is_active() && !r.is_halted();
                (r.take_disk_for_crash(), ap)
            }
            Sw::Recovering(c) => (c.into_disk(), false),
            Sw::Resyncing(mr) => (mr.into_disk(), false),
            Sw::Cold(d) => (d, false),
            Sw::Dead(_) | Sw::Gone => unreachable!(),
        };
        disk.crash_seeded(&mut self.rng);
        self.stats.machine_crashes += 1;
        self.machines[m].sw = Sw::Dead(disk);
        if was_active_primary {
            self.era_end();
        }
        let delay = RESTART_DELAY_US + self.rng.gen_range(0..2_000);
        self.schedule(delay, Ev::Restart { mach: m });
    }

    fn try_recover(&mut self, m: usize, disk: VirtualDisk) {
        if self.rounds_started >= MAX_ROUNDS {
            self.internal_error("recovery rounds exhausted; run is wedged".into());
            self.machines[m].sw = Sw::Cold(disk);
            return;
        }
        self.machines[m].inc += 1;
        self.machines[m].node = self.next_node_id;
        self.next_node_id += 1;
        let node = self.machines[m].node;
        let inc = self.machines[m].inc;

        // new membership: this coordinator first, then serving peers, then
        // cold ones, capped at the widest legal configuration
        let mut members = vec![node];
        for (i, mach) in self.machines.iter().enumerate() {
            if i != m && matches!(&mach.sw, Sw::Serving(r) if !r.is_halted()) {
                members.push(mach.node);
            }
        }
        for (i, mach) in self.machines.iter().enumerate() {
            if i != m && matches!(mach.sw, Sw::Cold(_)) {
                members.push(mach.node);
            }
        }
        members.truncate((2 * self.cfg.f + 1) as usize);
        if members.len() < (self.cfg.f + 1) as usize {
            // not enough peers up to form a legal configuration; wait for
            // restarts and try again
            self.park_cold(m, disk);
            return;
        }

        self.rounds_started += 1;
        self.stats.recovery_rounds += 1;
        match Coordinator::start(
            node,
            inc,
            members,
            self.cfg.f,
            self.master,
            disk,
            &mut self.svc,
            self.now,
            self.cfg.mutation,
        ) {
            Ok((c, effs)) => {
                self.machines[m].sw = Sw::Recovering(Box::new(c));
                self.apply_recovery_effects(m, effs);
            }
            Err((AbortReason::LostRace, disk)) => self.park_cold(m, disk),
            Err((reason, disk)) => self.abort_round(m, reason, u64::MAX, disk),
        }
    }

    fn park_cold(&mut self, m: usize, disk: VirtualDisk) {
        self.machines[m].sw = Sw::Cold(disk);
        self.machines[m].retries += 1;
        if self.machines[m].retries > RETRY_CAP {
            return; // stays down; the run continues degraded
        }
        self.stats.recovery_retries += 1;
        let delay = RETRY_DELAY_US + self.rng.gen_range(0..10_000);
        let inc = self.machines[m].inc;
        self.schedule(delay, Ev::Retry { mach: m, inc });
    }

    fn abort_round(&mut self, m: usize, reason: AbortReason, ballot: u64, disk: VirtualDisk) {
        let someone_dead = self.machines.iter().any(|x| matches!(x.sw, Sw::Dead(_)));
        let later_round = self.svc.highest_ballot().is_some_and(|h| h > ballot);
        let other_recovering = self
            .machines
            .iter()
            .enumerate()
            .any(|(i, x)| i != m && matches!(x.sw, Sw::Recovering(_)));
        if someone_dead || later_round || other_recovering {
            // the world is still moving; this round's failure is not final
            self.park_cold(m, disk);
            return;
        }
        self.stats.terminal_abort = Some(reason.to_string());
        self.aborted = true;
        self.machines[m].sw = Sw::Cold(disk);
    }

    fn handle_halt(&mut self, m: usize, reason: String) {
        self.stats.halts += 1;
        if self.stats.first_halt.is_none() {
            self.stats.first_halt = Some(reason);
        }
        let was_primary = matches!(&self.machines[m].sw, Sw::Serving(r) if r.is_primary());
        if was_primary {
            self.era_end();
        }
        if self.cfg.f == 0 {
            // a lone node that halted is the terminal state: the attack was
            // detected and the device refuses to serve
            self.halted_terminal = true;
        } else {
            let inc = self.machines[m].inc;
            self.schedule(REBOOT_DELAY_US, Ev::Reboot { mach: m, inc });
        }
    }

    fn fold_counters(&mut self, r: &Replica) {
        self.stats.bad_frames += r.counters.bad_frames;
        self.stats.stale_ballot += r.counters.stale_ballot;
        self.stats.future_ballot += r.counters.future_ballot;
        self.stats.duplicate_index += r.counters.duplicate_index;
    }

    // ---- effect application ----

    fn apply_effects(&mut self, m: usize, effects: Vec<Effect>) {
        for eff in effects {
            match eff {
                Effect::Send { to, msg } => self.send_frame(m, to, &msg),
                Effect::DiskIssued { io } => {
                    let inc = self.machines[m].inc;
                    let delay = self.jitter(self.cfg.disk_delay_us);
                    self.schedule(delay, Ev::DiskDone { mach: m, inc, io });
                }
                Effect::WriteDone { op, wi } => self.write_done(m, op, wi),
                Effect::ReadDone { op, data } => self.read_done(op, &data),
                Effect::Halted { reason } => self.handle_halt(m, reason),
            }
        }
    }

    fn apply_recovery_effects(&mut self, m: usize, effects: Vec<RecoveryEffect>) {
        for eff in effects {
            match eff {
                RecoveryEffect::Send { to, msg } => self.send_frame(m, to, &msg),
                RecoveryEffect::Timer { at, token } => {
                    let inc = self.machines[m].inc;
                    let delay = at.saturating_sub(self.now);
                    self.schedule(delay, Ev::Timer { mach: m, inc, token });
                }
            }
        }
    }

    fn disk_done(&mut self, m: usize, inc: u32, io: IoId) {
        if self.machines[m].inc != inc {
            return;
        }
        let effs = match &mut self.machines[m].sw {
            Sw::Serving(r) => r.on_disk_complete(io),
            _ => return,
        };
        self.apply_effects(m, effs);
    }

    fn timer(&mut self, m: usize, inc: u32, token: u64) {
        if self.machines[m].inc != inc {
            return;
        }
        match &mut self.machines[m].sw {
            Sw::Recovering(c) => {
                let out = c.on_timeout(token, self.now);
                self.coord_outcome(m, out);
            }
            Sw::Resyncing(r) => {
                let out = r.on_timeout(token, self.now);
                self.member_outcome(m, out);
            }
            _ => {}
        }
    }

    fn coord_outcome(&mut self, m: usize, out: Outcome) {
        match out {
            Outcome::Continue(effs) => self.apply_recovery_effects(m, effs),
            Outcome::Abort(reason) => {
                let Sw::Recovering(c) = mem::replace(&mut self.machines[m].sw, Sw::Gone) else {
                    unreachable!()
                };
                let ballot = c.ballot();
                self.abort_round(m, reason, ballot, c.into_disk());
            }
            Outcome::Finished(rec) => {
                let Recovered {
                    replica,
                    report,
                    reconfigs,
                } = *rec;
                self.stats.recoveries_finished += 1;
                self.stats.pages_pulled += report.pages_pulled;
                self.stats.pages_checked += report.pages_checked;
                self.stats.hash_bytes += report.hash_bytes;
                self.stats.page_bytes += report.page_bytes;
                self.machines[m].retries = 0;
                self.machines[m].sw = Sw::Serving(Box::new(replica));
                self.check_rebuild(m);
                self.apply_recovery_effects(m, reconfigs);
                self.start_probes();
                self.maybe_unpark();
            }
        }
    }

    fn member_outcome(&mut self, m: usize, out: MemberOutcome) {
        match out {
            MemberOutcome::Continue(effs) => self.apply_recovery_effects(m, effs),
            MemberOutcome::Finished(r) => {
                self.machines[m].retries = 0;
                self.machines[m].sw = Sw::Serving(r);
                self.check_resync_equality(m);
                self.maybe_unpark();
            }
            MemberOutcome::Lost(disk) => {
                self.machines[m].sw = Sw::Gone;
                self.park_cold(m, *disk);
            }
        }
    }

    // ---- rebuilt-state audits ----

    /// Every non-genesis page on a freshly recovered primary must
    /// authenticate under its installed leaf; a transfer bug that slipped a
    /// wrong page past the verifier would surface here.
    fn check_rebuild(&mut self, m: usize) {
        self.stats.resync_equality_checks += 1;
        let Sw::Serving(r) = &self.machines[m].sw else {
            unreachable!()
        };
        let leaves = r.integrity.leaves_raw(r.disk());
        for (block, leaf) in leaves.iter().enumerate() {
            if leaf.is_genesis() {
                continue;
            }
            let ct = r.disk().logical_read(block as u64);
            if r.cipher()
                .open_page(block as u64, leaf.write_index, leaf.key_epoch, ct, &leaf.tag)
                .is_err()
            {
                self.stats.resync_equality_violations += 1;
                return;
            }
        }
    }

    /// A member that just finished resyncing must hold exactly the pages the
    /// primary holds. Clients are parked until every member is serving, so
    /// the comparison races nothing.
    fn check_resync_equality(&mut self, m: usize) {
        let Some(pm) = self.active_primary() else {
            return;
        };
        if pm == m {
            return;
        }
        self.stats.resync_equality_checks += 1;
        let Sw::Serving(p) = &self.machines[pm].sw else {
            unreachable!()
        };
        let Sw::Serving(b) = &self.machines[m].sw else {
            unreachable!()
        };
        if p.write_index() != b.write_index() {
            self.stats.resync_equality_violations += 1;
            return;
        }
        for block in 0..self.cfg.blocks {
            if p.disk().logical_read(block) != b.disk().logical_read(block) {
                self.stats.resync_equality_violations += 1;
                return;
            }
        }
    }

    /// At the moment a flagged write completes, at least f backups of the
    /// current configuration must genuinely hold its index, independent of
    /// what their acks claimed.
    fn audit_membership(&mut self, pm: usize, wi: u64) {
        self.stats.membership_audits += 1;
        let Sw::Serving(p) = &self.machines[pm].sw else {
            return;
        };
        let ballot = p.ballot();
        let mut holders = 0u32;
        for mach in &self.machines {
            if let Sw::Serving(r) = &mach.sw {
                if !r.is_primary()
                    && r.ballot() == ballot
                    && r.backup_applied_prefix().unwrap_or(0) >= wi
                {
                    holders += 1;
                }
            }
        }
        if holders < self.cfg.f {
            self.stats.membership_violations += 1;
        }
    }

    // ---- client operations ----

    fn era_end(&mut self) {
        self.events.push(Event::Crash);
        self.era += 1;
        self.pending.retain(|_, p| p.era == self.era); // always empties
        for t in 0..self.threads.len() {
            self.threads[t].tid = self.next_thread_id;
            self.next_thread_id += 1;
            self.threads[t].busy = false;
            self.parked.insert(t);
        }
        self.probe_queue.clear();
        self.probe_inflight = false;
    }

    fn maybe_unpark(&mut self) {
        if self.stopped() || self.ready_primary().is_none() {
            return;
        }
        let woken = mem::take(&mut self.parked);
        for t in woken {
            self.schedule(0, Ev::Issue { thread: t });
        }
    }

    fn issue(&mut self, t: usize) {
        if self.stopped() || self.threads[t].busy || self.issued >= self.cfg.ops {
            return;
        }
        if self.ready_primary().is_none() {
            self.parked.insert(t);
            return;
        }
        // adversary actions scheduled for this step fire before the op
        let step = self.issued + 1;
        if step > self.faults_applied_through {
            for s in (self.faults_applied_through + 1)..=step {
                let actions: Vec<FaultAction> =
                    self.cfg.faults.at(s).cloned().collect();
                for a in actions {
                    self.apply_fault(a);
                }
            }
            self.faults_applied_through = step;
        }
        let Some(pm) = self.ready_primary() else {
            self.parked.insert(t);
            return;
        };

        let tid = self.threads[t].tid;
        let op = self.next_op;
        self.next_op += 1;
        let is_write = self.written_vec.is_empty() || self.rng.gen_bool(0.5);
        let (block, value, sync, res) = if is_write {
            let block = self.pick_write_block();
            self.writes_issued += 1;
            let flagged =
                self.cfg.fsync_every > 0 && self.writes_issued % self.cfg.fsync_every == 0;
            let sync = if flagged {
                SyncFlags::PREFLUSH
            } else {
                SyncFlags::NONE
            };
            let value = self.next_value;
            self.next_value += 1;
            let data = page_for(self.cfg.block_size, value, block);
            let Sw::Serving(r) = &mut self.machines[pm].sw else {
                unreachable!()
            };
            (block, value, sync, r.handle_write(op, block, &data, sync))
        } else {
            let block = self.pick_read_block();
            let Sw::Serving(r) = &mut self.machines[pm].sw else {
                unreachable!()
            };
            (block, 0, SyncFlags::NONE, r.handle_read(op, block))
        };

        let effs = match res {
            Ok(effs) => effs,
            Err(AppError::NotActive { .. } | AppError::Halted) => {
                self.parked.insert(t);
                return;
            }
            Err(AppError::NotPrimary) => {
                self.internal_error("routed an op to a non-primary".into());
                return;
            }
        };
        if is_write {
            self.events.push(Event::WriteInv {
                thread: tid,
                block,
                value,
                sync,
            });
            if self.written.insert(block) {
                self.written_vec.push(block);
            }
            if self.durable_expect.contains_key(&block) {
                self.superseded.insert(block);
            }
        } else {
            self.events.push(Event::ReadInv { thread: tid, block });
        }
        self.pending.insert(
            op,
            PendingOp {
                slot: t,
                tid,
                era: self.era,
                block,
                value,
                sync,
                is_write,
                invoked: self.now,
                probe: None,
            },
        );
        self.threads[t].busy = true;
        self.issued += 1;
        self.stats.ops_issued += 1;
        self.apply_effects(pm, effs);
    }

    fn pick_write_block(&mut self) -> u64 {
        match self.cfg.workload {
            Workload::Seq => {
                let b = self.seq_cursor % self.cfg.blocks;
                self.seq_cursor += 1;
                b
            }
            Workload::Rand => self.rng.gen_range(0..self.cfg.blocks),
            Workload::Contended => {
                let hot = self.cfg.blocks.min(4);
                if self.rng.gen_bool(0.8) {
                    self.rng.gen_range(0..hot)
                } else {
                    self.rng.gen_range(0..self.cfg.blocks)
                }
            }
        }
    }

    fn pick_read_block(&mut self) -> u64 {
        // reads must target written blocks: the checker treats a read of a
        // never-written block as a workload bug
        if self.cfg.workload == Workload::Contended {
            let hot = self.cfg.blocks.min(4);
            let hot_written: Vec<u64> =
                self.written_vec.iter().copied().filter(|&b| b < hot).collect();
            if !hot_written.is_empty() && self.rng.gen_bool(0.8) {
                let i = self.rng.gen_range(0..hot_written.len());
                return hot_written[i];
            }
        }
        let i = self.rng.gen_range(0..self.written_vec.len());
        self.written_vec[i]
    }

    fn write_done(&mut self, m: usize, op: AppOpId, wi: u64) {
        let Some(p) = self.pending.remove(&op) else {
            return;
        };
        if p.era != self.era {
            return; // the op's era crashed; it stays pending in the history
        }
        self.events.push(Event::WriteRes {
            thread: p.tid,
            block: p.block,
        });
        self.stats.writes_completed += 1;
        let lat = self.now - p.invoked;
        if p.sync.flagged() {
            self.flagged_lat.push(lat);
            self.stats.flagged_completed += 1;
            self.durable_expect.insert(p.block, p.value);
            self.superseded.remove(&p.block);
            let racing = self
                .pending
                .values()
                .any(|q| q.is_write && q.block == p.block && q.era == self.era);
            if racing {
                self.superseded.insert(p.block);
            }
            self.audit_membership(m, wi);
        } else {
            self.unflagged_lat.push(lat);
        }
        self.threads[p.slot].busy = false;
        self.schedule(0, Ev::Issue { thread: p.slot });
    }

    fn read_done(&mut self, op: AppOpId, data: &[u8]) {
        let Some(p) = self.pending.remove(&op) else {
            return;
        };
        if p.era != self.era {
            return;
        }
        let value = value_of(data);
        self.events.push(Event::ReadRes {
            thread: p.tid,
            block: p.block,
            value,
        });
        if let Some(expect) = p.probe {
            self.stats.probe_reads += 1;
            if value != expect {
                self.stats.probe_failures += 1;
            }
            self.probe_inflight = false;
            self.issue_next_probe();
        } else {
            self.stats.reads_completed += 1;
            self.threads[p.slot].busy = false;
            self.schedule(0, Ev::Issue { thread: p.slot });
        }
    }

    // ---- durability probes ----

    /// After every finished recovery, read back each block whose last
    /// flagged write completed and was never overwritten: the value must
    /// have survived the crash verbatim.
    fn start_probes(&mut self) {
        self.probe_queue = self
            .durable_expect
            .iter()
            .filter(|(b, _)| !self.superseded.contains(b))
            .map(|(&b, &v)| (b, v))
            .collect();
        if !self.probe_inflight {
            self.issue_next_probe();
        }
    }

    fn issue_next_probe(&mut self) {
        let Some((block, expect)) = self.probe_queue.pop_front() else {
            self.maybe_unpark();
            return;
        };
        let Some(pm) = self.active_primary() else {
            self.probe_queue.clear();
            return; // a new era will re-run the probes
        };
        let tid = self.next_thread_id;
        self.next_thread_id += 1;
        let op = self.next_op;
        self.next_op += 1;
        let Sw::Serving(r) = &mut self.machines[pm].sw else {
            unreachable!()
        };
        let effs = match r.handle_read(op, block) {
            Ok(effs) => effs,
            Err(_) => {
                self.probe_queue.clear();
                return;
            }
        };
        self.events.push(Event::ReadInv { thread: tid, block });
        self.pending.insert(
            op,
            PendingOp {
                slot: 0,
                tid,
                era: self.era,
                block,
                value: 0,
                sync: SyncFlags::NONE,
                is_write: false,
                invoked: self.now,
                probe: Some(expect),
            },
        );
        self.probe_inflight = true;
        self.apply_effects(pm, effs);
    }

    // ---- adversary ----

    fn apply_fault(&mut self, action: FaultAction) {
        match action {
            FaultAction::Crash { node } => {
                let m = node as usize;
                if m < self.machines.len() {
                    self.crash_machine(m);
                }
            }
            FaultAction::Restart { node } => {
                let m = node as usize;
                if m < self.machines.len() && matches!(self.machines[m].sw, Sw::Dead(_)) {
                    let Sw::Dead(disk) = mem::replace(&mut self.machines[m].sw, Sw::Gone)
                    else {
                        unreachable!()
                    };
                    self.try_recover(m, disk);
                }
            }
            FaultAction::Snapshot { node, tag } => {
                let m = node as usize;
                if m >= self.machines.len() {
                    return;
                }
                let img = match &self.machines[m].sw {
                    Sw::Serving(r) => r.disk().snapshot(),
                    Sw::Dead(d) | Sw::Cold(d) => d.snapshot(),
                    _ => return,
                };
                self.snapshots.insert((m, tag), img);
            }
            FaultAction::Rollback { node, tag } => {
                let m = node as usize;
                if m >= self.machines.len() {
                    return;
                }
                let Some(img) = self.snapshots.get(&(m, tag)) else {
                    return;
                };
                match &mut self.machines[m].sw {
                    // a live restore models the attacker rewriting the
                    // device under a running node
                    Sw::Serving(r) => r.disk_mut().restore(img),
                    Sw::Dead(d) | Sw::Cold(d) => d.restore(img),
                    _ => {}
                }
            }
            FaultAction::CorruptPage { node, block } => {
                let m = node as usize;
                if m >= self.machines.len() || block >= self.cfg.blocks {
                    return;
                }
                let mut garbage = vec![0u8; self.cfg.block_size as usize];
                self.rng.fill(&mut garbage[..]);
                match &mut self.machines[m].sw {
                    Sw::Serving(r) => r.disk_mut().install_page(block, &garbage),
                    Sw::Dead(d) | Sw::Cold(d) => d.install_page(block, &garbage),
                    _ => {}
                }
            }
            FaultAction::Drop { link, count } => self.add_mod(link, ModKind::Drop, count),
            FaultAction::Dup { link, count } => self.add_mod(link, ModKind::Dup, count),
            FaultAction::Delay {
                link,
                micros,
                count,
            } => self.add_mod(link, ModKind::Delay(micros), count),
            FaultAction::Corrupt { link, count } => self.add_mod(link, ModKind::Corrupt, count),
        }
    }

    fn add_mod(&mut self, link: crate::transport::Link, kind: ModKind, count: u32) {
        let key = (link.from as usize, link.to as usize);
        self.link_mods
            .entry(key)
            .or_default()
            .push(LinkMod { kind, left: count });
    }

    // ---- teardown ----

    pub(crate) fn into_results(mut self) -> (RunConfig, Vec<Event>, RunStats) {
        let machines = mem::take(&mut self.machines);
        for mach in &machines {
            if let Sw::Serving(r) = &mach.sw {
                self.fold_counters(r);
            }
        }
        self.stats.eras = self.era as u64 + 1;
        if !self.unflagged_lat.is_empty() {
            self.stats.unflagged_write_max_us =
                self.unflagged_lat.iter().copied().max().unwrap();
            self.stats.unflagged_write_mean_us =
                self.unflagged_lat.iter().sum::<u64>() / self.unflagged_lat.len() as u64;
        }
        if !self.flagged_lat.is_empty() {
            self.stats.flagged_write_min_us = self.flagged_lat.iter().copied().min().unwrap();
            self.stats.flagged_write_mean_us =
                self.flagged_lat.iter().sum::<u64>() / self.flagged_lat.len() as u64;
        }
        (self.cfg, self.events, self.stats)
    }
}
