//! The replica state machine: write interception on the primary, in-order
//! application on backups, fencing, and integrity-checked reads. Pure state
//! machine: callers (the simulation, or tests driving it by hand) feed it
//! application operations, decoded messages, and disk completions; it
//! returns effects (frames to send, disk I/O it issued, app completions,
//! or a halt). No clocks, no randomness, no threads in here.

use super::gate::{ConflictGate, GateOp, OpToken};
use crate::model::SyncFlags;
use crate::storage::{
    CipherContext, IntegrityStore, IoId, IoKind, IoResult, Leaf, Superblock, VirtualDisk,
};
use crate::transport::{Configuration, MsgType, NodeId, WireMessage};
use std::collections::BTreeMap;

pub type AppOpId = u64;

/// Protocol deviations for validating the test suite itself: each one must
/// be caught by an acceptance check when enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Backup acknowledges one index beyond what it has contiguously
    /// received, breaking cumulative-ack soundness.
    AckOffByOne,
    /// Reads skip integrity verification, trusting on-disk metadata.
    SkipMerkleVerify,
    /// Backup applies replicated writes on arrival regardless of index
    /// order.
    BackupApplyUnordered,
}

impl std::str::FromStr for Mutation {
    type Err = String;
    fn from_str(s: &str) -> Result<Mutation, String> {
        Ok(match s {
            "none" => Mutation::None,
            "ack-off-by-one" => Mutation::AckOffByOne,
            "skip-merkle-verify" => Mutation::SkipMerkleVerify,
            "backup-apply-unordered" => Mutation::BackupApplyUnordered,
            _ => return Err(format!("unknown mutation {s:?}")),
        })
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Effect {
    Send { to: NodeId, msg: WireMessage },
    /// A local disk submission; the caller schedules its completion.
    DiskIssued { io: IoId },
    WriteDone { op: AppOpId, wi: u64 },
    ReadDone { op: AppOpId, data: Vec<u8> },
    /// Integrity violation detected; the node stops serving. The caller
    /// decides what the deployment does about it.
    Halted { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AppError {
    #[error("node is fenced: ballot {ballot} < seen {seen_ballot}")]
    NotActive { ballot: u64, seen_ballot: u64 },
    #[error("node halted on an integrity fault")]
    Halted,
    #[error("node is not the primary")]
    NotPrimary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckFailed;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counters {
    pub bad_frames: u64,
    pub stale_ballot: u64,
    pub future_ballot: u64,
    pub duplicate_index: u64,
}

enum AppKind {
    Write { sync: SyncFlags, wi: u64 },
    /// Leaf captured at invocation; gated same-block writes update the
    /// store before this read reaches the disk, and per-block submission
    /// order guarantees the snapshot matches the bytes this read will see.
    Read { leaf: Leaf },
}

struct AppOp {
    id: AppOpId,
    kind: AppKind,
    block: u64,
    /// sealed payload, kept until disk submission for gated writes and for
    /// serving recovery page pulls
    payload: Option<Vec<u8>>,
    io: Option<IoId>,
    disk_done: bool,
    app_done: bool,
}

struct PrimaryState {
    write_index: u64,
    ops: BTreeMap<OpToken, AppOp>,
    /// per-backup cumulative ack watermark
    acks: BTreeMap<NodeId, u64>,
}

struct ReplOp {
    wi: u64,
    block: u64,
    sync: SyncFlags,
    payload: Option<Vec<u8>>,
    io: Option<IoId>,
}

struct HeldWrite {
    block: u64,
    sync: SyncFlags,
    ciphertext: Vec<u8>,
    tag: [u8; 16],
}

struct BackupState {
    /// next write index to admit; everything below is received and recorded
    expected: u64,
    held: BTreeMap<u64, HeldWrite>,
    ops: BTreeMap<OpToken, ReplOp>,
    /// ground truth for external auditing: longest applied prefix, tracked
    /// independently of `expected` so wire-visible claims can be checked
    /// against what was actually admitted
    contig: u64,
    applied_above: std::collections::BTreeSet<u64>,
}

const HELD_BOUND: usize = 1 << 16;

enum RoleState {
    Primary(PrimaryState),
    Backup(BackupState),
}

pub struct Replica {
    node: NodeId,
    incarnation: u32,
    conf: Configuration,
    ballot: u64,
    seen_ballot: u64,
    epoch: u32,
    ctx: CipherContext,
    pub(crate) disk: VirtualDisk,
    pub(crate) integrity: IntegrityStore,
    gate: ConflictGate,
    next_token: OpToken,
    io_owner: BTreeMap<IoId, OpToken>,
    halted: bool,
    mutation: Mutation,
    role: RoleState,
    pub counters: Counters,
    durable_floor: u64,
}

impl Replica {
    /// Fresh-deployment primary: runs the initialize check against the
    /// trusted service before going active.
    pub fn initialize_primary(
        node: NodeId,
        incarnation: u32,
        conf: Configuration,
        master: [u8; 32],
        mut disk: VirtualDisk,
        service: &mut crate::transport::ConfigService,
        mutation: Mutation,
    ) -> Result<Replica, CheckFailed> {
        let ballot = conf.ballot;
        let b = service.match_a(ballot, conf.clone()).map_err(|_| CheckFailed)?;
        if b.ballot_c != ballot || b.all_conf.len() != 1 {
            return Err(CheckFailed);
        }
        Ok(Self::format(
            node,
            incarnation,
            conf,
            master,
            &mut disk,
            RoleKind::Primary,
            mutation,
        )
        .with_disk(disk))
    }

    /// Fresh-deployment backup, active immediately.
    pub fn format_backup(
        node: NodeId,
        incarnation: u32,
        conf: Configuration,
        master: [u8; 32],
        mut disk: VirtualDisk,
        mutation: Mutation,
    ) -> Replica {
        Self::format(
            node,
            incarnation,
            conf,
            master,
            &mut disk,
            RoleKind::Backup,
            mutation,
        )
        .with_disk(disk)
    }

    fn format(
        node: NodeId,
        incarnation: u32,
        conf: Configuration,
        master: [u8; 32],
        disk: &mut VirtualDisk,
        role: RoleKind,
        mutation: Mutation,
    ) -> ReplicaSeed {
        let ctx = CipherContext::new(master, 0);
        let integrity = IntegrityStore::format(disk, &ctx);
        let ballot = conf.ballot;
        let role = match role {
            RoleKind::Primary => RoleState::Primary(PrimaryState {
                write_index: 0,
                ops: BTreeMap::new(),
                acks: conf.backups().iter().map(|&b| (b, 0)).collect(),
            }),
            RoleKind::Backup => RoleState::Backup(BackupState {
                expected: 1,
                held: BTreeMap::new(),
                ops: BTreeMap::new(),
                contig: 0,
                applied_above: Default::default(),
            }),
        };
        ReplicaSeed {
            node,
            incarnation,
            conf,
            ballot,
            ctx,
            integrity,
            role,
            mutation,
        }
    }

    /// Node built by the recovery path: state already repaired, ballot and
    /// epoch already agreed.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_recovery(
        node: NodeId,
        incarnation: u32,
        conf: Configuration,
        ctx: CipherContext,
        disk: VirtualDisk,
        integrity: IntegrityStore,
        write_index: u64,
        mutation: Mutation,
        is_primary: bool,
    ) -> Replica {
        assert!(!integrity.is_cold(), "recovered nodes must hold a verified anchor");
        let ballot = conf.ballot;
        let role = if is_primary {
            RoleState::Primary(PrimaryState {
                write_index,
                ops: BTreeMap::new(),
                acks: conf.backups().iter().map(|&b| (b, 0)).collect(),
            })
        } else {
            RoleState::Backup(BackupState {
                expected: write_index + 1,
                held: BTreeMap::new(),
                ops: BTreeMap::new(),
                contig: write_index,
                applied_above: Default::default(),
            })
        };
        let mut r = Replica {
            node,
            incarnation,
            conf,
            ballot,
            seen_ballot: ballot,
            epoch: ctx.epoch(),
            ctx,
            disk,
            integrity,
            gate: ConflictGate::new(),
            next_token: 1,
            io_owner: BTreeMap::new(),
            halted: false,
            mutation,
            role,
            counters: Counters::default(),
            durable_floor: write_index,
        };
        r.persist_superblock();
        r
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn incarnation(&self) -> u32 {
        self.incarnation
    }

    pub fn ballot(&self) -> u64 {
        self.ballot
    }

    pub fn seen_ballot(&self) -> u64 {
        self.seen_ballot
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn conf(&self) -> &Configuration {
        &self.conf
    }

    pub fn is_active(&self) -> bool {
        !self.halted && self.ballot == self.seen_ballot
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn is_primary(&self) -> bool {
        matches!(self.role, RoleState::Primary(_))
    }

    pub fn cipher(&self) -> &CipherContext {
        &self.ctx
    }

    pub fn disk(&self) -> &VirtualDisk {
        &self.disk
    }

    pub fn disk_mut(&mut self) -> &mut VirtualDisk {
        &mut self.disk
    }

    /// Highest write index this node vouches for: assigned on the primary,
    /// contiguously received on a backup.
    pub fn write_index(&self) -> u64 {
        match &self.role {
            RoleState::Primary(p) => p.write_index,
            RoleState::Backup(b) => b.expected - 1,
        }
    }

    pub fn mutation(&self) -> Mutation {
        self.mutation
    }

    /// Tear down into the pieces a resync keeps. Callers must have drained
    /// in-flight disk I/O first: pulled pages install directly, and a late
    /// completion would clobber them.
    pub(crate) fn into_parts(self) -> (CipherContext, VirtualDisk, IntegrityStore) {
        assert_eq!(self.disk.inflight_count(), 0, "resync with I/O in flight");
        (self.ctx, self.disk, self.integrity)
    }

    /// Salvage the disk when the process dies out from under the node.
    /// In-flight I/O is abandoned; the caller models the power loss.
    pub(crate) fn take_disk_for_crash(self) -> VirtualDisk {
        self.disk
    }

    /// Longest write-index prefix a backup has actually admitted, regardless
    /// of what its acks claim. `None` on primaries.
    pub fn backup_applied_prefix(&self) -> Option<u64> {
        match &self.role {
            RoleState::Primary(_) => None,
            RoleState::Backup(b) => Some(b.contig),
        }
    }

    /// True while some admitted write has not reached the disk. With I/O
    /// drained this is structurally false (the conflict gate flushes its
    /// queue through disk completions), and resync relies on that: leaf
    /// claims must describe bytes actually on disk.
    pub(crate) fn has_unapplied_writes(&self) -> bool {
        match &self.role {
            RoleState::Primary(p) => p
                .ops
                .values()
                .any(|o| matches!(o.kind, AppKind::Write { .. }) && !o.disk_done),
            RoleState::Backup(b) => b.ops.values().any(|o| o.io.is_none()),
        }
    }

    // ---- application surface (primary only) ----

    pub fn handle_write(
        &mut self,
        op: AppOpId,
        block: u64,
        plaintext: &[u8],
        sync: SyncFlags,
    ) -> Result<Vec<Effect>, AppError> {
        self.ensure_active()?;
        let mut effects = Vec::new();
        // critical section: index assignment, seal, hash record, replication
        // enqueue and conflict check are one atomic step
        let RoleState::Primary(p) = &mut self.role else {
            return Err(AppError::NotPrimary);
        };
        p.write_index += 1;
        let wi = p.write_index;
        let (ciphertext, tag) = self.ctx.seal_page(block, wi, plaintext);
        let leaf = Leaf {
            tag,
            write_index: wi,
            key_epoch: self.epoch,
        };
        if let Err(fault) = self.integrity.put(&mut self.disk, &self.ctx, block, leaf) {
            return Ok(self.halt(format!("integrity fault recording write: {fault}")));
        }
        let mut repl_payload = ciphertext.clone();
        repl_payload.extend_from_slice(&tag);
        for &backup in self.conf.backups() {
            effects.push(Effect::Send {
                to: backup,
                msg: WireMessage {
                    mtype: MsgType::WriteRepl,
                    ballot: self.ballot,
                    write_index: wi,
                    block,
                    flags: sync,
                    payload: repl_payload.clone(),
                },
            });
        }
        let token = self.next_token;
        self.next_token += 1;
        let RoleState::Primary(p) = &mut self.role else {
            unreachable!()
        };
        p.ops.insert(
            token,
            AppOp {
                id: op,
                kind: AppKind::Write { sync, wi },
                block,
                payload: Some(ciphertext),
                io: None,
                disk_done: false,
                app_done: false,
            },
        );
        if self.gate.admit(GateOp { token, block }) {
            self.submit_app_op(token, &mut effects);
        }
        Ok(effects)
    }

    pub fn handle_read(&mut self, op: AppOpId, block: u64) -> Result<Vec<Effect>, AppError> {
        self.ensure_active()?;
        if !matches!(self.role, RoleState::Primary(_)) {
            return Err(AppError::NotPrimary);
        }
        let leaf = if self.mutation == Mutation::SkipMerkleVerify {
            self.integrity.get_raw(&self.disk, block)
        } else {
            match self.integrity.get(&self.disk, &self.ctx, block) {
                Ok(l) => l,
                Err(fault) => {
                    return Ok(self.halt(format!("integrity fault reading hash: {fault}")))
                }
            }
        };
        let token = self.next_token;
        self.next_token += 1;
        let RoleState::Primary(p) = &mut self.role else {
            unreachable!()
        };
        p.ops.insert(
            token,
            AppOp {
                id: op,
                kind: AppKind::Read { leaf },
                block,
                payload: None,
                io: None,
                disk_done: false,
                app_done: false,
            },
        );
        let mut effects = Vec::new();
        if self.gate.admit(GateOp { token, block }) {
            self.submit_app_op(token, &mut effects);
        }
        Ok(effects)
    }

    fn ensure_active(&self) -> Result<(), AppError> {
        if self.halted {
            return Err(AppError::Halted);
        }
        if self.ballot != self.seen_ballot {
            return Err(AppError::NotActive {
                ballot: self.ballot,
                seen_ballot: self.seen_ballot,
            });
        }
        Ok(())
    }

    fn submit_app_op(&mut self, token: OpToken, effects: &mut Vec<Effect>) {
        let RoleState::Primary(p) = &mut self.role else {
            unreachable!()
        };
        let op = p.ops.get_mut(&token).unwrap();
        let io = match &op.kind {
            AppKind::Write { sync, .. } => self
                .disk
                .submit(IoKind::Write {
                    block: op.block,
                    payload: op.payload.clone().unwrap(),
                    sync: *sync,
                })
                .expect("gated op in range"),
            AppKind::Read { .. } => self
                .disk
                .submit(IoKind::Read { block: op.block })
                .expect("gated op in range"),
        };
        op.io = Some(io);
        self.io_owner.insert(io, token);
        effects.push(Effect::DiskIssued { io });
    }

    // ---- message intake ----

    /// Decode, authenticate and dispatch one frame. Everything the node
    /// does with peers funnels through here.
    pub fn receive(&mut self, from: NodeId, bytes: &[u8]) -> Vec<Effect> {
        if self.halted {
            return Vec::new();
        }
        let msg = match WireMessage::decode(bytes, &self.ctx) {
            Ok(m) => m,
            Err(_) => {
                self.counters.bad_frames += 1;
                return Vec::new();
            }
        };
        self.dispatch(from, msg)
    }

    /// Dispatch an already-authenticated message (tests use this directly).
    pub fn dispatch(&mut self, from: NodeId, msg: WireMessage) -> Vec<Effect> {
        if self.halted {
            return Vec::new();
        }
        match msg.mtype {
            MsgType::WriteRepl => self.on_write_repl(msg),
            MsgType::Ack => self.on_ack(from, msg),
            MsgType::P1a => self.on_p1a(from, msg),
            MsgType::HashReq => self.on_hash_req(from, msg),
            MsgType::PageReq => self.on_page_req(from, msg),
            // coordinator-side and service messages are handled by the
            // recovery driver, not the replica state machine
            _ => Vec::new(),
        }
    }

    /// Data messages demand an exact ballot match: stale senders are fenced
    /// out, and a future ballot is not acted on until this node itself goes
    /// through reconfiguration.
    fn data_ballot_ok(&mut self, ballot: u64) -> bool {
        if ballot < self.seen_ballot {
            self.counters.stale_ballot += 1;
            false
        } else if ballot > self.seen_ballot {
            self.counters.future_ballot += 1;
            false
        } else {
            true
        }
    }

    fn on_write_repl(&mut self, msg: WireMessage) -> Vec<Effect> {
        if !self.data_ballot_ok(msg.ballot) {
            return Vec::new();
        }
        let RoleState::Backup(_) = &self.role else {
            return Vec::new();
        };
        if msg.payload.len() != self.disk.block_size() as usize + 16 {
            self.counters.bad_frames += 1;
            return Vec::new();
        }
        let (ct, tag_bytes) = msg.payload.split_at(msg.payload.len() - 16);
        let held = HeldWrite {
            block: msg.block,
            sync: msg.flags,
            ciphertext: ct.to_vec(),
            tag: tag_bytes.try_into().unwrap(),
        };
        let wi = msg.write_index;
        let mut effects = Vec::new();

        if self.mutation == Mutation::BackupApplyUnordered {
            // apply on arrival; claim everything up to this index
            let RoleState::Backup(b) = &mut self.role else {
                unreachable!()
            };
            if wi < b.expected {
                self.counters.duplicate_index += 1;
                return Vec::new();
            }
            b.expected = b.expected.max(wi + 1);
            self.admit_repl(wi, held, &mut effects);
            if msg.flags.flagged() {
                effects.push(self.make_ack(wi));
            }
            return effects;
        }

        let RoleState::Backup(b) = &mut self.role else {
            unreachable!()
        };
        if wi < b.expected || b.held.contains_key(&wi) {
            self.counters.duplicate_index += 1;
            // the sender may have missed our ack; repeat the current
            // watermark without touching state
            if msg.flags.flagged() {
                let RoleState::Backup(b) = &self.role else {
                    unreachable!()
                };
                let ack_at = b.expected - 1;
                effects.push(self.make_ack(ack_at));
            }
            return effects;
        }
        if wi > b.expected {
            assert!(b.held.len() < HELD_BOUND, "reorder buffer overflow");
            b.held.insert(wi, held);
            return effects;
        }

        // contiguous: admit this message and drain everything it unblocks
        let mut saw_flagged = held.sync.flagged();
        b.expected += 1;
        let mut queue = vec![(wi, held)];
        loop {
            let RoleState::Backup(b) = &mut self.role else {
                unreachable!()
            };
            match b.held.remove(&b.expected) {
                Some(h) => {
                    saw_flagged |= h.sync.flagged();
                    let at = b.expected;
                    b.expected += 1;
                    queue.push((at, h));
                }
                None => break,
            }
        }
        for (at, h) in queue {
            self.admit_repl(at, h, &mut effects);
            if self.halted {
                return effects;
            }
        }
        if saw_flagged {
            let RoleState::Backup(b) = &self.role else {
                unreachable!()
            };
            let ack_at = b.expected - 1;
            effects.push(self.make_ack(ack_at));
        }
        effects
    }

    fn admit_repl(&mut self, wi: u64, h: HeldWrite, effects: &mut Vec<Effect>) {
        let leaf = Leaf {
            tag: h.tag,
            write_index: wi,
            key_epoch: self.epoch,
        };
        if let Err(fault) = self.integrity.put(&mut self.disk, &self.ctx, h.block, leaf) {
            effects.extend(self.halt(format!("integrity fault applying index {wi}: {fault}")));
            return;
        }
        let token = self.next_token;
        self.next_token += 1;
        let RoleState::Backup(b) = &mut self.role else {
            unreachable!()
        };
        b.applied_above.insert(wi);
        while b.applied_above.remove(&(b.contig + 1)) {
            b.contig += 1;
        }
        b.ops.insert(
            token,
            ReplOp {
                wi,
                block: h.block,
                sync: h.sync,
                payload: Some(h.ciphertext),
                io: None,
            },
        );
        if self.gate.admit(GateOp {
            token,
            block: h.block,
        }) {
            self.submit_repl_op(token, effects);
        }
    }

    fn submit_repl_op(&mut self, token: OpToken, effects: &mut Vec<Effect>) {
        let RoleState::Backup(b) = &mut self.role else {
            unreachable!()
        };
        let op = b.ops.get_mut(&token).unwrap();
        let io = self
            .disk
            .submit(IoKind::Write {
                block: op.block,
                payload: op.payload.clone().unwrap(),
                sync: op.sync,
            })
            .expect("replicated write in range");
        op.io = Some(io);
        self.io_owner.insert(io, token);
        effects.push(Effect::DiskIssued { io });
    }

    fn make_ack(&self, index: u64) -> Effect {
        let index = if self.mutation == Mutation::AckOffByOne {
            index + 1
        } else {
            index
        };
        Effect::Send {
            to: self.conf.primary(),
            msg: WireMessage {
                mtype: MsgType::Ack,
                ballot: self.ballot,
                write_index: index,
                block: 0,
                flags: SyncFlags::NONE,
                payload: Vec::new(),
            },
        }
    }

    fn on_ack(&mut self, from: NodeId, msg: WireMessage) -> Vec<Effect> {
        if !self.data_ballot_ok(msg.ballot) {
            return Vec::new();
        }
        let RoleState::Primary(p) = &mut self.role else {
            return Vec::new();
        };
        let Some(wm) = p.acks.get_mut(&from) else {
            return Vec::new();
        };
        *wm = (*wm).max(msg.write_index);
        self.release_covered_syncs()
    }

    /// f-th highest backup watermark covers the index: at least f backups
    /// hold every write up to and including it.
    fn ack_covered(&self, wi: u64) -> bool {
        let RoleState::Primary(p) = &self.role else {
            return false;
        };
        let f = self.conf.f as usize;
        if f == 0 {
            return true;
        }
        p.acks.values().filter(|&&wm| wm >= wi).count() >= f
    }

    fn release_covered_syncs(&mut self) -> Vec<Effect> {
        let RoleState::Primary(p) = &self.role else {
            return Vec::new();
        };
        let mut ready: Vec<OpToken> = p
            .ops
            .iter()
            .filter(|(_, op)| {
                op.disk_done
                    && !op.app_done
                    && matches!(&op.kind, AppKind::Write { sync, wi } if sync.flagged() && self.ack_covered(*wi))
            })
            .map(|(&t, _)| t)
            .collect();
        ready.sort_by_key(|t| {
            let RoleState::Primary(p) = &self.role else {
                unreachable!()
            };
            match &p.ops[t].kind {
                AppKind::Write { wi, .. } => *wi,
                AppKind::Read { .. } => unreachable!(),
            }
        });
        let mut effects = Vec::new();
        for t in ready {
            self.finish_app_op(t, &mut effects);
        }
        effects
    }

    fn finish_app_op(&mut self, token: OpToken, effects: &mut Vec<Effect>) {
        let RoleState::Primary(p) = &mut self.role else {
            unreachable!()
        };
        let op = p.ops.get_mut(&token).unwrap();
        op.app_done = true;
        let wi = match &op.kind {
            AppKind::Write { wi, .. } => *wi,
            AppKind::Read { .. } => unreachable!(),
        };
        effects.push(Effect::WriteDone { op: op.id, wi });
        p.ops.remove(&token);
    }

    // ---- fencing and recovery participation ----

    fn on_p1a(&mut self, from: NodeId, msg: WireMessage) -> Vec<Effect> {
        if msg.ballot < self.seen_ballot {
            self.counters.stale_ballot += 1;
            return Vec::new();
        }
        if msg.ballot > self.seen_ballot {
            self.seen_ballot = msg.ballot;
            // the promise must survive a restart, or a resurrected node
            // could accept the fenced ballot again
            self.persist_superblock();
        }
        let mut payload = Vec::with_capacity(9);
        payload.extend_from_slice(&self.ballot.to_le_bytes());
        payload.push(self.integrity.is_cold() as u8);
        vec![Effect::Send {
            to: from,
            msg: WireMessage {
                mtype: MsgType::P1b,
                ballot: msg.ballot,
                write_index: self.write_index(),
                block: 0,
                flags: SyncFlags::NONE,
                payload,
            },
        }]
    }

    fn on_hash_req(&mut self, from: NodeId, msg: WireMessage) -> Vec<Effect> {
        if msg.ballot != self.seen_ballot {
            self.counters.stale_ballot += 1;
            return Vec::new();
        }
        let leaves = match self.integrity.leaves(&self.disk, &self.ctx) {
            Ok(l) => l,
            Err(fault) => return self.halt(format!("integrity fault serving hashes: {fault}")),
        };
        let mut payload = Vec::with_capacity(5 + leaves.len() * 32);
        payload.push(self.integrity.is_cold() as u8);
        payload.extend_from_slice(&self.epoch.to_le_bytes());
        for leaf in &leaves {
            payload.extend_from_slice(&leaf.encode());
        }
        vec![Effect::Send {
            to: from,
            msg: WireMessage {
                mtype: MsgType::HashResp,
                ballot: msg.ballot,
                write_index: self.write_index(),
                block: 0,
                flags: SyncFlags::NONE,
                payload,
            },
        }]
    }

    fn on_page_req(&mut self, from: NodeId, msg: WireMessage) -> Vec<Effect> {
        if msg.ballot != self.seen_ballot {
            self.counters.stale_ballot += 1;
            return Vec::new();
        }
        // serve the newest admitted content: an in-flight gated write's
        // payload beats the disk's logical state
        let mut best: Option<(u64, &[u8])> = None;
        match &self.role {
            RoleState::Primary(p) => {
                for op in p.ops.values() {
                    if op.block == msg.block && !op.disk_done {
                        if let (AppKind::Write { wi, .. }, Some(pl)) = (&op.kind, &op.payload) {
                            if best.is_none() || *wi > best.unwrap().0 {
                                best = Some((*wi, pl));
                            }
                        }
                    }
                }
            }
            RoleState::Backup(b) => {
                for op in b.ops.values() {
                    if op.block == msg.block {
                        if let Some(pl) = &op.payload {
                            if best.is_none() || op.wi > best.unwrap().0 {
                                best = Some((op.wi, pl));
                            }
                        }
                    }
                }
            }
        }
        let payload = match best {
            Some((_, pl)) => pl.to_vec(),
            None => self.disk.logical_read(msg.block).to_vec(),
        };
        vec![Effect::Send {
            to: from,
            msg: WireMessage {
                mtype: MsgType::PageResp,
                ballot: msg.ballot,
                write_index: 0,
                block: msg.block,
                flags: SyncFlags::NONE,
                payload,
            },
        }]
    }

    // ---- disk completions ----

    pub fn on_disk_complete(&mut self, io: IoId) -> Vec<Effect> {
        if self.halted {
            return Vec::new();
        }
        let Some(token) = self.io_owner.remove(&io) else {
            // stale completion from before a crash/restore
            let _ = self.disk.complete(io);
            return Vec::new();
        };
        let result = self.disk.complete(io);
        if result == IoResult::Dropped {
            return Vec::new();
        }
        let mut effects = Vec::new();
        match &mut self.role {
            RoleState::Primary(_) => self.primary_disk_done(token, result, &mut effects),
            RoleState::Backup(_) => self.backup_disk_done(token, &mut effects),
        }
        effects
    }

    fn primary_disk_done(&mut self, token: OpToken, result: IoResult, effects: &mut Vec<Effect>) {
        let RoleState::Primary(p) = &mut self.role else {
            unreachable!()
        };
        let op = p.ops.get_mut(&token).unwrap();
        let block = op.block;
        op.disk_done = true;

        match (&op.kind, result) {
            (AppKind::Write { sync, wi }, IoResult::Write) => {
                let sync = *sync;
                let wi = *wi;
                if sync.preflush() {
                    self.durable_floor = self.durable_floor.max(wi);
                    self.persist_superblock();
                }
                let RoleState::Primary(p) = &mut self.role else {
                    unreachable!()
                };
                let op = p.ops.get_mut(&token).unwrap();
                op.payload = None; // disk holds it now; recovery serves from logical state
                if !sync.flagged() || self.ack_covered(wi) {
                    self.finish_app_op(token, effects);
                }
            }
            (AppKind::Read { leaf }, IoResult::Read(ct)) => {
                let leaf = *leaf;
                let id = op.id;
                let data = if leaf.is_genesis() {
                    Ok(vec![0u8; self.disk.block_size() as usize])
                } else {
                    self.ctx
                        .open_page(block, leaf.write_index, leaf.key_epoch, &ct, &leaf.tag)
                        .map_err(|e| e.to_string())
                };
                let RoleState::Primary(p) = &mut self.role else {
                    unreachable!()
                };
                p.ops.remove(&token);
                match data {
                    Ok(plain) => effects.push(Effect::ReadDone { op: id, data: plain }),
                    Err(e) => {
                        effects.extend(self.halt(format!("stale or corrupt page: {e}")));
                        return;
                    }
                }
            }
            (_, r) => panic!("mismatched completion {r:?}"),
        }
        self.release_gate(block, token, effects);
    }

    fn backup_disk_done(&mut self, token: OpToken, effects: &mut Vec<Effect>) {
        let RoleState::Backup(b) = &mut self.role else {
            unreachable!()
        };
        let op = b.ops.remove(&token).unwrap();
        if op.sync.preflush() {
            self.durable_floor = self.durable_floor.max(op.wi);
            self.persist_superblock();
        }
        self.release_gate(op.block, token, effects);
    }

    fn release_gate(&mut self, block: u64, token: OpToken, effects: &mut Vec<Effect>) {
        for g in self.gate.complete(block, token) {
            match &self.role {
                RoleState::Primary(_) => self.submit_app_op(g.token, effects),
                RoleState::Backup(_) => self.submit_repl_op(g.token, effects),
            }
        }
    }

    // ---- halt and superblock ----

    fn halt(&mut self, reason: String) -> Vec<Effect> {
        self.halted = true;
        vec![Effect::Halted { reason }]
    }

    pub(crate) fn persist_superblock(&mut self) {
        let sb = Superblock {
            ballot: self.ballot,
            seen_ballot: self.seen_ballot,
            key_epoch: self.epoch,
            durable_write_index: self.durable_floor,
            incarnation: self.incarnation,
        };
        let page = sb.encode(self.disk.block_size());
        self.disk.write_meta(0, &page);
    }
}

enum RoleKind {
    Primary,
    Backup,
}

/// Intermediate carrier so `format` can borrow the disk before the Replica
/// takes ownership.
struct ReplicaSeed {
    node: NodeId,
    incarnation: u32,
    conf: Configuration,
    ballot: u64,
    ctx: CipherContext,
    integrity: IntegrityStore,
    role: RoleState,
    mutation: Mutation,
}

impl ReplicaSeed {
    fn with_disk(self, disk: VirtualDisk) -> Replica {
        let mut r = Replica {
            node: self.node,
            incarnation: self.incarnation,
            ballot: self.ballot,
            seen_ballot: self.ballot,
            epoch: self.ctx.epoch(),
            ctx: self.ctx,
            disk,
            integrity: self.integrity,
            gate: ConflictGate::new(),
            next_token: 1,
            io_owner: BTreeMap::new(),
            halted: false,
            mutation: self.mutation,
            role: self.role,
            conf: self.conf,
            counters: Counters::default(),
            durable_floor: 0,
        };
        r.persist_superblock();
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::ConfigService;

    const BS: u32 = 512;
    const MASTER: [u8; 32] = [7; 32];

    fn disk() -> VirtualDisk {
        VirtualDisk::new(BS, 8, 0)
    }

    fn conf(f: u32) -> Configuration {
        Configuration::new(1, (0..=f).map(|i| i as NodeId).collect(), f).unwrap()
    }

    fn cluster(f: u32, mutation: Mutation) -> (Replica, Vec<Replica>) {
        let c = conf(f);
        let mut svc = ConfigService::new();
        let primary = Replica::initialize_primary(0, 0, c.clone(), MASTER, disk(), &mut svc, Mutation::None)
            .unwrap();
        let backups = c
            .backups()
            .iter()
            .map(|&b| Replica::format_backup(b, 0, c.clone(), MASTER, disk(), mutation))
            .collect();
        (primary, backups)
    }

    fn page(v: u8) -> Vec<u8> {
        vec![v; BS as usize]
    }

    fn sends(effects: &[Effect]) -> Vec<(NodeId, WireMessage)> {
        effects
            .iter()
            .filter_map(|e| match e {
                Effect::Send { to, msg } => Some((*to, msg.clone())),
                _ => None,
            })
            .collect()
    }

    fn ios(effects: &[Effect]) -> Vec<IoId> {
        effects
            .iter()
            .filter_map(|e| match e {
                Effect::DiskIssued { io } => Some(*io),
                _ => None,
            })
            .collect()
    }

    /// Route every Send through encode/decode to the addressed node,
    /// complete every issued disk I/O immediately, and repeat until the
    /// cluster quiesces. Returns all app completions seen anywhere.
    fn settle(primary: &mut Replica, backups: &mut [Replica], effects: Vec<Effect>) -> Vec<Effect> {
        let mut done = Vec::new();
        let mut queue: Vec<(NodeId, Vec<Effect>)> = vec![(primary.node(), effects)];
        while let Some((at, effs)) = queue.pop() {
            for e in effs {
                match e {
                    Effect::Send { to, msg } => {
                        let bytes = msg.encode(primary.cipher());
                        let dst = if to == primary.node() {
                            &mut *primary
                        } else {
                            backups.iter_mut().find(|b| b.node() == to).unwrap()
                        };
                        let out = dst.receive(at, &bytes);
                        queue.push((to, out));
                    }
                    Effect::DiskIssued { io } => {
                        let node = if at == primary.node() {
                            &mut *primary
                        } else {
                            backups.iter_mut().find(|b| b.node() == at).unwrap()
                        };
                        let out = node.on_disk_complete(io);
                        queue.push((at, out));
                    }
                    other => done.push(other),
                }
            }
        }
        done
    }

    #[test]
    fn unflagged_write_completes_at_disk_without_acks() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let effects = p.handle_write(10, 3, &page(1), SyncFlags::NONE).unwrap();
        assert_eq!(sends(&effects).len(), 1);
        let io = ios(&effects)[0];
        // complete only the disk; never deliver the replication frame
        let out = p.on_disk_complete(io);
        assert_eq!(out, vec![Effect::WriteDone { op: 10, wi: 1 }]);
        drop(bs.drain(..));
    }

    #[test]
    fn flagged_write_waits_for_f_acks() {
        let (mut p, mut bs) = cluster(2, Mutation::None);
        let effects = p.handle_write(11, 2, &page(9), SyncFlags::FUA).unwrap();
        let frames = sends(&effects);
        assert_eq!(frames.len(), 2);
        let io = ios(&effects)[0];
        assert_eq!(p.on_disk_complete(io), vec![]);

        // first backup records and acks; one ack is still short of f = 2
        let bytes = frames[0].1.encode(p.cipher());
        let b_eff = bs[0].receive(0, &bytes);
        let acks = sends(&b_eff);
        assert_eq!(acks.len(), 1);
        assert_eq!(acks[0].1.mtype, MsgType::Ack);
        assert_eq!(acks[0].1.write_index, 1);
        let ack1 = acks[0].1.encode(p.cipher());
        assert_eq!(p.receive(1, &ack1), vec![]);

        // second ack covers it
        let b_eff = bs[1].receive(0, &bytes);
        let ack2 = sends(&b_eff)[0].1.encode(p.cipher());
        assert_eq!(p.receive(2, &ack2), vec![Effect::WriteDone { op: 11, wi: 1 }]);
    }

    #[test]
    fn f0_flagged_write_needs_no_acks() {
        let (mut p, _) = cluster(0, Mutation::None);
        let effects = p.handle_write(1, 0, &page(5), SyncFlags::PREFLUSH).unwrap();
        assert!(sends(&effects).is_empty());
        let io = ios(&effects)[0];
        assert_eq!(p.on_disk_complete(io), vec![Effect::WriteDone { op: 1, wi: 1 }]);
    }

    #[test]
    fn write_then_read_round_trips() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let eff = p.handle_write(1, 4, &page(0xA5), SyncFlags::FUA).unwrap();
        let done = settle(&mut p, &mut bs, eff);
        assert_eq!(done, vec![Effect::WriteDone { op: 1, wi: 1 }]);
        let eff = p.handle_read(2, 4).unwrap();
        let done = settle(&mut p, &mut bs, eff);
        assert_eq!(
            done,
            vec![Effect::ReadDone {
                op: 2,
                data: page(0xA5)
            }]
        );
    }

    #[test]
    fn unwritten_block_reads_zeroes() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let eff = p.handle_read(7, 6).unwrap();
        let done = settle(&mut p, &mut bs, eff);
        assert_eq!(
            done,
            vec![Effect::ReadDone {
                op: 7,
                data: vec![0; BS as usize]
            }]
        );
    }

    #[test]
    fn same_block_writes_serialize_through_the_gate() {
        let (mut p, _) = cluster(0, Mutation::None);
        let e1 = p.handle_write(1, 5, &page(1), SyncFlags::NONE).unwrap();
        let e2 = p.handle_write(2, 5, &page(2), SyncFlags::NONE).unwrap();
        assert_eq!(ios(&e1).len(), 1);
        assert!(ios(&e2).is_empty(), "conflicting write must queue");
        let out = p.on_disk_complete(ios(&e1)[0]);
        assert_eq!(out[0], Effect::WriteDone { op: 1, wi: 1 });
        let next = ios(&out);
        assert_eq!(next.len(), 1, "gate releases the queued write");
        let out = p.on_disk_complete(next[0]);
        assert_eq!(out[0], Effect::WriteDone { op: 2, wi: 2 });
        let leaf = p.integrity.get(p.disk(), p.cipher(), 5).unwrap();
        let plain = p
            .cipher()
            .open_page(5, leaf.write_index, leaf.key_epoch, p.disk().logical_read(5), &leaf.tag)
            .unwrap();
        assert_eq!(plain, page(2));
    }

    #[test]
    fn read_behind_write_sees_that_write() {
        let (mut p, _) = cluster(0, Mutation::None);
        let e1 = p.handle_write(1, 5, &page(3), SyncFlags::NONE).unwrap();
        // read invoked while the write is still at the disk: leaf snapshot
        // already reflects the write, gate orders the read after it
        let e2 = p.handle_read(2, 5).unwrap();
        assert!(ios(&e2).is_empty());
        let out = p.on_disk_complete(ios(&e1)[0]);
        let read_io = ios(&out);
        let out = p.on_disk_complete(read_io[0]);
        assert_eq!(
            out,
            vec![Effect::ReadDone {
                op: 2,
                data: page(3)
            }]
        );
    }

    #[test]
    fn backup_applies_in_index_order_and_coalesces_acks() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let f1 = sends(&p.handle_write(1, 0, &page(1), SyncFlags::NONE).unwrap());
        let f2 = sends(&p.handle_write(2, 1, &page(2), SyncFlags::NONE).unwrap());
        let f3 = sends(&p.handle_write(3, 2, &page(3), SyncFlags::FUA).unwrap());
        let b = &mut bs[0];

        // deliver 3 first: nothing applies, nothing acked
        let eff = b.receive(0, &f3[0].1.encode(p.cipher()));
        assert!(eff.is_empty());
        assert_eq!(b.write_index(), 0);

        // 1 arrives: applies, but no flagged write in the admitted batch
        let eff = b.receive(0, &f1[0].1.encode(p.cipher()));
        assert_eq!(sends(&eff).len(), 0);
        assert_eq!(ios(&eff).len(), 1);
        assert_eq!(b.write_index(), 1);

        // 2 arrives: drains 2 and the held 3; one ack at the watermark 3
        let eff = b.receive(0, &f2[0].1.encode(p.cipher()));
        assert_eq!(ios(&eff).len(), 2);
        let acks = sends(&eff);
        assert_eq!(acks.len(), 1);
        assert_eq!(acks[0].1.write_index, 3);
        assert_eq!(b.write_index(), 3);
    }

    #[test]
    fn duplicate_delivery_counts_and_reacks_flagged() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let f1 = sends(&p.handle_write(1, 0, &page(1), SyncFlags::FUA).unwrap());
        let bytes = f1[0].1.encode(p.cipher());
        let b = &mut bs[0];
        let first = b.receive(0, &bytes);
        assert_eq!(sends(&first)[0].1.write_index, 1);
        let again = b.receive(0, &bytes);
        assert_eq!(b.counters.duplicate_index, 1);
        // state untouched, ack repeated so a lossy link cannot wedge the primary
        let acks = sends(&again);
        assert_eq!(acks.len(), 1);
        assert_eq!(acks[0].1.write_index, 1);
        assert!(ios(&again).is_empty());
    }

    #[test]
    fn stale_and_future_ballots_are_dropped() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let f1 = sends(&p.handle_write(1, 0, &page(1), SyncFlags::FUA).unwrap());
        let mut stale = f1[0].1.clone();
        stale.ballot = 0;
        let mut future = f1[0].1.clone();
        future.ballot = 9;
        let b = &mut bs[0];
        assert!(b.receive(0, &stale.encode(p.cipher())).is_empty());
        assert!(b.receive(0, &future.encode(p.cipher())).is_empty());
        assert_eq!(b.counters.stale_ballot, 1);
        assert_eq!(b.counters.future_ballot, 1);
        assert_eq!(b.write_index(), 0);
    }

    #[test]
    fn corrupt_frame_bumps_counter() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let f1 = sends(&p.handle_write(1, 0, &page(1), SyncFlags::NONE).unwrap());
        let mut bytes = f1[0].1.encode(p.cipher());
        bytes[40] ^= 1;
        assert!(bs[0].receive(0, &bytes).is_empty());
        assert_eq!(bs[0].counters.bad_frames, 1);
    }

    #[test]
    fn p1a_fences_and_persists_the_promise() {
        let (mut p, _) = cluster(0, Mutation::None);
        let eff = p.dispatch(
            99,
            WireMessage {
                mtype: MsgType::P1a,
                ballot: 5,
                write_index: 0,
                block: 0,
                flags: SyncFlags::NONE,
                payload: Vec::new(),
            },
        );
        let replies = sends(&eff);
        assert_eq!(replies.len(), 1);
        let (to, reply) = &replies[0];
        assert_eq!(*to, 99);
        assert_eq!(reply.mtype, MsgType::P1b);
        assert_eq!(reply.ballot, 5);
        assert_eq!(reply.payload[..8], 1u64.to_le_bytes());
        assert_eq!(reply.payload[8], 0, "warm node");
        assert_eq!(p.seen_ballot(), 5);
        assert!(!p.is_active());
        // the promise is on disk
        let sb = Superblock::decode(p.disk().read_meta(0)).unwrap();
        assert_eq!(sb.seen_ballot, 5);
        assert_eq!(sb.ballot, 1);
        // app surface now refuses service
        assert_eq!(
            p.handle_write(1, 0, &page(1), SyncFlags::NONE),
            Err(AppError::NotActive {
                ballot: 1,
                seen_ballot: 5
            })
        );
        // fenced node also drops data traffic at the old ballot
        assert!(p
            .dispatch(
                1,
                WireMessage {
                    mtype: MsgType::Ack,
                    ballot: 1,
                    write_index: 1,
                    block: 0,
                    flags: SyncFlags::NONE,
                    payload: Vec::new(),
                },
            )
            .is_empty());
        assert_eq!(p.counters.stale_ballot, 1);
    }

    #[test]
    fn lower_p1a_is_ignored_equal_is_reanswered() {
        let (mut p, _) = cluster(0, Mutation::None);
        let p1a = |ballot| WireMessage {
            mtype: MsgType::P1a,
            ballot,
            write_index: 0,
            block: 0,
            flags: SyncFlags::NONE,
            payload: Vec::new(),
        };
        assert_eq!(sends(&p.dispatch(9, p1a(7))).len(), 1);
        assert!(p.dispatch(9, p1a(3)).is_empty());
        assert_eq!(p.counters.stale_ballot, 1);
        // retransmitted round gets the same answer
        assert_eq!(sends(&p.dispatch(9, p1a(7))).len(), 1);
        assert_eq!(p.seen_ballot(), 7);
    }

    #[test]
    fn tampered_data_page_halts_the_read() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let eff = p.handle_write(1, 2, &page(0x11), SyncFlags::FUA).unwrap();
        settle(&mut p, &mut bs, eff);
        p.disk_mut().install_page(2, &page(0x22));
        let eff = p.handle_read(2, 2).unwrap();
        let io = ios(&eff)[0];
        let out = p.on_disk_complete(io);
        assert!(matches!(out[0], Effect::Halted { .. }));
        assert!(p.is_halted());
        assert_eq!(p.handle_read(3, 2), Err(AppError::Halted));
    }

    #[test]
    fn hash_and_page_requests_serve_recovery() {
        let (mut p, mut bs) = cluster(1, Mutation::None);
        let eff = p.handle_write(1, 3, &page(0x33), SyncFlags::FUA).unwrap();
        settle(&mut p, &mut bs, eff);
        let hq = WireMessage {
            mtype: MsgType::HashReq,
            ballot: 1,
            write_index: 0,
            block: 0,
            flags: SyncFlags::NONE,
            payload: Vec::new(),
        };
        let eff = p.dispatch(50, hq);
        let (_, resp) = &sends(&eff)[0];
        assert_eq!(resp.mtype, MsgType::HashResp);
        assert_eq!(resp.write_index, 1);
        assert_eq!(resp.payload[0], 0, "warm");
        assert_eq!(resp.payload[1..5], 0u32.to_le_bytes());
        let leaves: Vec<Leaf> = resp.payload[5..]
            .chunks(32)
            .map(Leaf::decode)
            .collect();
        assert_eq!(leaves.len(), 8);
        assert_eq!(leaves[3].write_index, 1);
        assert!(leaves[0].is_genesis());

        let pq = WireMessage {
            mtype: MsgType::PageReq,
            ballot: 1,
            write_index: 0,
            block: 3,
            flags: SyncFlags::NONE,
            payload: Vec::new(),
        };
        let eff = p.dispatch(50, pq);
        let (_, resp) = &sends(&eff)[0];
        assert_eq!(resp.mtype, MsgType::PageResp);
        assert_eq!(resp.block, 3);
        let plain = p
            .cipher()
            .open_page(3, 1, 0, &resp.payload, &leaves[3].tag)
            .unwrap();
        assert_eq!(plain, page(0x33));
    }

    #[test]
    fn page_req_serves_inflight_payload_before_disk() {
        let (mut p, _) = cluster(0, Mutation::None);
        let e1 = p.handle_write(1, 5, &page(1), SyncFlags::NONE).unwrap();
        p.on_disk_complete(ios(&e1)[0]);
        // second write to the same block still at the disk
        let _e2 = p.handle_write(2, 5, &page(2), SyncFlags::NONE).unwrap();
        let pq = WireMessage {
            mtype: MsgType::PageReq,
            ballot: 1,
            write_index: 0,
            block: 5,
            flags: SyncFlags::NONE,
            payload: Vec::new(),
        };
        let eff = p.dispatch(50, pq);
        let (_, resp) = &sends(&eff)[0];
        let leaf = p.integrity.get(p.disk(), p.cipher(), 5).unwrap();
        let plain = p.cipher().open_page(5, 2, 0, &resp.payload, &leaf.tag);
        assert_eq!(plain.unwrap(), page(2), "newest admitted content wins");
    }

    #[test]
    fn ack_off_by_one_mutation_overclaims() {
        let (mut p, mut bs) = cluster(1, Mutation::AckOffByOne);
        let f1 = sends(&p.handle_write(1, 0, &page(1), SyncFlags::FUA).unwrap());
        let eff = bs[0].receive(0, &f1[0].1.encode(p.cipher()));
        let acks = sends(&eff);
        assert_eq!(acks[0].1.write_index, 2, "claims an index it never saw");
    }

    #[test]
    fn unordered_apply_mutation_leaves_holes() {
        let (mut p, mut bs) = cluster(1, Mutation::BackupApplyUnordered);
        let _f1 = sends(&p.handle_write(1, 0, &page(1), SyncFlags::NONE).unwrap());
        let f2 = sends(&p.handle_write(2, 1, &page(2), SyncFlags::FUA).unwrap());
        // deliver only index 2: the mutant applies it and acks as if 1 existed
        let eff = bs[0].receive(0, &f2[0].1.encode(p.cipher()));
        assert_eq!(ios(&eff).len(), 1);
        let acks = sends(&eff);
        assert_eq!(acks[0].1.write_index, 2);
        assert_eq!(bs[0].write_index(), 2, "hole at index 1 goes unnoticed");
    }

    #[test]
    fn backup_refuses_app_ops() {
        let (_, mut bs) = cluster(1, Mutation::None);
        assert_eq!(
            bs[0].handle_write(1, 0, &page(1), SyncFlags::NONE),
            Err(AppError::NotPrimary)
        );
        assert_eq!(bs[0].handle_read(1, 0), Err(AppError::NotPrimary));
    }

    #[test]
    fn initialize_refuses_contested_ballot() {
        let mut svc = ConfigService::new();
        let c1 = Configuration::new(1, vec![0, 1], 1).unwrap();
        let other = Configuration::new(1, vec![5, 6], 1).unwrap();
        svc.match_a(1, other).unwrap();
        assert_eq!(
            Replica::initialize_primary(0, 0, c1, MASTER, disk(), &mut svc, Mutation::None)
                .err(),
            Some(CheckFailed)
        );
    }
}
