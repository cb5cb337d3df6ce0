//! Member-side resync. A node that promised the new ballot and then
//! receives the reconfiguration frame rebuilds itself against the
//! designated node with the same transfer engine the coordinator uses,
//! except it kept its verified anchor, so leaf equality lets it skip
//! almost everything.

use super::transfer::Transfer;
use super::{RecoveryEffect, ReconfigBody};
use crate::replica::{Mutation, Replica};
use crate::storage::{CipherContext, IntegrityStore, Leaf, VirtualDisk};
use crate::transport::{MsgType, NodeId, WireMessage};

pub use super::coordinator::TRANSFER_TIMEOUT_US;

pub enum MemberStart {
    Running(Box<MemberResync>, Vec<RecoveryEffect>),
    /// The designated node is this node: nothing to move.
    Immediate(Box<Replica>),
}

pub enum MemberOutcome {
    Continue(Vec<RecoveryEffect>),
    Finished(Box<Replica>),
    /// The designated node stopped answering or served a bad page. The
    /// member's state is now part old, part new; the caller gets the disk
    /// back but must treat it as holding no verified anchor.
    Lost(Box<VirtualDisk>),
}

pub struct MemberResync {
    node: NodeId,
    incarnation: u32,
    ballot: u64,
    epoch_next: u32,
    conf: crate::transport::Configuration,
    ctx: Option<CipherContext>,
    disk: Option<VirtualDisk>,
    integrity: Option<IntegrityStore>,
    own_leaves: Option<Vec<Leaf>>,
    t: Transfer,
    active_token: u64,
    mutation: Mutation,
}

impl MemberResync {
    /// Resync a live, fenced replica. The caller must have drained its disk
    /// first; an in-flight write completing under a pulled page would undo
    /// the repair.
    pub fn start_warm(replica: Replica, body: &ReconfigBody, wi_d: u64, now: u64) -> MemberStart {
        assert_eq!(
            replica.seen_ballot(),
            body.conf.ballot,
            "reconfiguration for a ballot this node never promised"
        );
        debug_assert!(
            !replica.has_unapplied_writes(),
            "drained replica still holds admitted writes off disk"
        );
        let node = replica.node();
        let incarnation = replica.incarnation();
        let mutation = replica.mutation();
        let (mut ctx, disk, integrity) = replica.into_parts();
        if node == body.designated {
            ctx.set_epoch(body.epoch_next);
            return MemberStart::Immediate(Box::new(Replica::from_recovery(
                node,
                incarnation,
                body.conf.clone(),
                ctx,
                disk,
                integrity,
                wi_d,
                mutation,
                body.conf.primary() == node,
            )));
        }
        let own_leaves = integrity.leaves_raw(&disk);
        Self::begin(
            node,
            incarnation,
            body,
            wi_d,
            ctx,
            disk,
            integrity,
            Some(own_leaves),
            mutation,
            now,
        )
    }

    /// Resync a node with no verified anchor (restarted mid-resync or
    /// otherwise adrift): every claimed page is decrypted or pulled.
    #[allow(clippy::too_many_arguments)]
    pub fn start_cold(
        node: NodeId,
        incarnation: u32,
        master: [u8; 32],
        disk: VirtualDisk,
        body: &ReconfigBody,
        wi_d: u64,
        now: u64,
        mutation: Mutation,
    ) -> MemberStart {
        let ctx = CipherContext::new(master, 0);
        let integrity = IntegrityStore::attach_cold(&disk, &ctx);
        Self::begin(
            node, incarnation, body, wi_d, ctx, disk, integrity, None, mutation, now,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn begin(
        node: NodeId,
        incarnation: u32,
        body: &ReconfigBody,
        wi_d: u64,
        ctx: CipherContext,
        disk: VirtualDisk,
        integrity: IntegrityStore,
        own_leaves: Option<Vec<Leaf>>,
        mutation: Mutation,
        now: u64,
    ) -> MemberStart {
        let t = Transfer::new(body.designated, body.conf.ballot, wi_d);
        let mut m = MemberResync {
            node,
            incarnation,
            ballot: body.conf.ballot,
            epoch_next: body.epoch_next,
            conf: body.conf.clone(),
            ctx: Some(ctx),
            disk: Some(disk),
            integrity: Some(integrity),
            own_leaves,
            t,
            active_token: 0,
            mutation,
        };
        let effects = vec![m.t.hash_request(), m.arm_timer(now + TRANSFER_TIMEOUT_US)];
        MemberStart::Running(Box::new(m), effects)
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn ballot(&self) -> u64 {
        self.ballot
    }

    /// Salvage the disk when the machine dies mid-resync.
    pub(crate) fn into_disk(self) -> VirtualDisk {
        self.disk.expect("resync already surrendered its disk")
    }

    fn arm_timer(&mut self, at: u64) -> RecoveryEffect {
        self.active_token += 1;
        RecoveryEffect::Timer {
            at,
            token: self.active_token,
        }
    }

    pub fn on_message(&mut self, from: NodeId, bytes: &[u8], now: u64) -> MemberOutcome {
        let Ok(msg) = WireMessage::decode(bytes, self.ctx.as_ref().unwrap()) else {
            return MemberOutcome::Continue(Vec::new());
        };
        if msg.ballot != self.ballot || from != self.t.designated {
            return MemberOutcome::Continue(Vec::new());
        }
        match msg.mtype {
            MsgType::HashResp => {
                let app_blocks = self.disk.as_ref().unwrap().app_blocks();
                if self.t.load_hash_resp(&msg, app_blocks).is_err() {
                    return self.lose();
                }
                self.pump(now)
            }
            MsgType::PageResp => {
                match self
                    .t
                    .on_page(&msg, self.disk.as_mut().unwrap(), self.ctx.as_ref().unwrap())
                {
                    Err(_) => self.lose(),
                    Ok(false) => MemberOutcome::Continue(Vec::new()),
                    Ok(true) => self.pump(now),
                }
            }
            _ => MemberOutcome::Continue(Vec::new()),
        }
    }

    pub fn on_timeout(&mut self, token: u64, now: u64) -> MemberOutcome {
        let _ = now;
        if token != self.active_token {
            return MemberOutcome::Continue(Vec::new());
        }
        self.lose()
    }

    fn lose(&mut self) -> MemberOutcome {
        MemberOutcome::Lost(Box::new(self.disk.take().unwrap()))
    }

    fn pump(&mut self, now: u64) -> MemberOutcome {
        let mut effects = Vec::new();
        self.t.advance(
            self.own_leaves.as_deref(),
            self.disk.as_ref().unwrap(),
            self.ctx.as_ref().unwrap(),
            &mut effects,
        );
        if self.t.is_done() {
            return self.finish();
        }
        effects.push(self.arm_timer(now + TRANSFER_TIMEOUT_US));
        MemberOutcome::Continue(effects)
    }

    fn finish(&mut self) -> MemberOutcome {
        let mut ctx = self.ctx.take().unwrap();
        let mut disk = self.disk.take().unwrap();
        let mut integrity = self.integrity.take().unwrap();
        integrity.install(&mut disk, &ctx, self.t.leaves());
        ctx.set_epoch(self.epoch_next);
        MemberOutcome::Finished(Box::new(Replica::from_recovery(
            self.node,
            self.incarnation,
            self.conf.clone(),
            ctx,
            disk,
            integrity,
            self.t.wi_d,
            self.mutation,
            self.conf.primary() == self.node,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SyncFlags;
    use crate::replica::Effect;
    use crate::transport::{ConfigService, Configuration};

    const BS: u32 = 512;
    const MASTER: [u8; 32] = [7; 32];

    fn page(v: u8) -> Vec<u8> {
        vec![v; BS as usize]
    }

    /// Primary plus two backups; backup 2 stops hearing replication after
    /// `b2_cutoff` frames, so it lags behind.
    fn lagging_cluster(b2_cutoff: usize) -> (Replica, Replica, Replica) {
        let conf = Configuration::new(1, vec![0, 1, 2], 1).unwrap();
        let mut svc = ConfigService::new();
        let mut p = Replica::initialize_primary(
            0,
            0,
            conf.clone(),
            MASTER,
            VirtualDisk::new(BS, 8, 0),
            &mut svc,
            Mutation::None,
        )
        .unwrap();
        let mut b1 = Replica::format_backup(
            1,
            0,
            conf.clone(),
            MASTER,
            VirtualDisk::new(BS, 8, 0),
            Mutation::None,
        );
        let mut b2 = Replica::format_backup(
            2,
            0,
            conf,
            MASTER,
            VirtualDisk::new(BS, 8, 0),
            Mutation::None,
        );
        for (i, blk) in [(1u64, 0u64), (2, 1), (3, 2), (4, 3), (5, 1)] {
            let eff = p
                .handle_write(i, blk, &page(i as u8 + 0x40), SyncFlags::FUA)
                .unwrap();
            for e in eff {
                match e {
                    Effect::Send { to, msg } => {
                        if to == 2 && i as usize > b2_cutoff {
                            continue; // partitioned
                        }
                        let bytes = msg.encode(p.cipher());
                        let b = if to == 1 { &mut b1 } else { &mut b2 };
                        for be in b.receive(0, &bytes) {
                            match be {
                                Effect::DiskIssued { io } => {
                                    b.on_disk_complete(io);
                                }
                                Effect::Send { to: 0, msg } => {
                                    let bytes = msg.encode(b.cipher());
                                    let out = p.receive(b.node(), &bytes);
                                    for pe in out {
                                        assert!(matches!(pe, Effect::WriteDone { .. }));
                                    }
                                }
                                other => panic!("unexpected {other:?}"),
                            }
                        }
                    }
                    Effect::DiskIssued { io } => {
                        p.on_disk_complete(io);
                    }
                    Effect::WriteDone { .. } => {}
                    other => panic!("unexpected {other:?}"),
                }
            }
        }
        (p, b1, b2)
    }

    fn fence(node: &mut Replica, ballot: u64) {
        let eff = node.dispatch(
            100,
            WireMessage {
                mtype: MsgType::P1a,
                ballot,
                write_index: 0,
                block: 0,
                flags: SyncFlags::NONE,
                payload: Vec::new(),
            },
        );
        assert_eq!(eff.len(), 1);
    }

    fn run(mut m: Box<MemberResync>, effects: Vec<RecoveryEffect>, designated: &mut Replica) -> Replica {
        let mut queue = effects;
        loop {
            let mut next = Vec::new();
            for e in queue {
                match e {
                    RecoveryEffect::Send { to, msg } => {
                        assert_eq!(to, designated.node());
                        let bytes = msg.encode(designated.cipher());
                        for (rt, rmsg) in designated
                            .receive(m.node(), &bytes)
                            .into_iter()
                            .filter_map(|e| match e {
                                Effect::Send { to, msg } => Some((to, msg)),
                                _ => None,
                            })
                        {
                            assert_eq!(rt, m.node());
                            let rb = rmsg.encode(designated.cipher());
                            match m.on_message(designated.node(), &rb, 0) {
                                MemberOutcome::Continue(effs) => next.extend(effs),
                                MemberOutcome::Finished(r) => return *r,
                                MemberOutcome::Lost(_) => panic!("designated lost"),
                            }
                        }
                    }
                    RecoveryEffect::Timer { .. } => {}
                }
            }
            assert!(!next.is_empty(), "resync stalled");
            queue = next;
        }
    }

    #[test]
    fn lagging_member_pulls_exactly_the_gap() {
        let (p, mut b1, b2) = lagging_cluster(3);
        drop(p);
        assert_eq!(b1.write_index(), 5);
        assert_eq!(b2.write_index(), 3);
        fence(&mut b1, 2);
        let mut b2 = b2;
        fence(&mut b2, 2);
        let body = ReconfigBody {
            epoch_next: 1,
            designated: 1,
            conf: Configuration::new(2, vec![100, 1, 2], 1).unwrap(),
        };
        let MemberStart::Running(m, effects) = MemberResync::start_warm(b2, &body, 5, 0) else {
            panic!("lagging member has work to do");
        };
        let b2 = run(m, effects, &mut b1);
        assert_eq!(b2.write_index(), 5);
        assert_eq!(b2.ballot(), 2);
        assert_eq!(b2.epoch(), 1);
        assert!(!b2.is_primary());
        for blk in 0..8 {
            assert_eq!(
                b1.disk().logical_read(blk),
                b2.disk().logical_read(blk),
                "block {blk} diverged"
            );
        }
    }

    #[test]
    fn designated_member_adopts_without_transfer() {
        let (p, mut b1, _) = lagging_cluster(5);
        drop(p);
        fence(&mut b1, 2);
        let body = ReconfigBody {
            epoch_next: 1,
            designated: 1,
            conf: Configuration::new(2, vec![100, 1, 2], 1).unwrap(),
        };
        let MemberStart::Immediate(r) = MemberResync::start_warm(b1, &body, 5, 0) else {
            panic!("designated member must not transfer");
        };
        assert_eq!(r.write_index(), 5);
        assert_eq!(r.epoch(), 1);
        assert_eq!(r.ballot(), 2);
    }

    #[test]
    fn up_to_date_member_pulls_nothing() {
        let (p, mut b1, b2) = lagging_cluster(5);
        drop(p);
        fence(&mut b1, 2);
        let mut b2 = b2;
        fence(&mut b2, 2);
        let body = ReconfigBody {
            epoch_next: 1,
            designated: 1,
            conf: Configuration::new(2, vec![100, 1, 2], 1).unwrap(),
        };
        let MemberStart::Running(m, effects) = MemberResync::start_warm(b2, &body, 5, 0) else {
            panic!("non-designated member still confirms the hashes");
        };
        // only the hash request and a timer: leaf equality covers all blocks
        assert_eq!(effects.len(), 2);
        let b2 = run(m, effects, &mut b1);
        assert_eq!(b2.write_index(), 5);
    }

    #[test]
    fn timeout_loses_the_member() {
        let (p, _, b2) = lagging_cluster(3);
        drop(p);
        let mut b2 = b2;
        fence(&mut b2, 2);
        let body = ReconfigBody {
            epoch_next: 1,
            designated: 1,
            conf: Configuration::new(2, vec![100, 1, 2], 1).unwrap(),
        };
        let MemberStart::Running(mut m, effects) = MemberResync::start_warm(b2, &body, 5, 0)
        else {
            panic!();
        };
        let token = effects
            .iter()
            .find_map(|e| match e {
                RecoveryEffect::Timer { token, .. } => Some(*token),
                _ => None,
            })
            .unwrap();
        assert!(matches!(m.on_timeout(99, 1), MemberOutcome::Continue(_)));
        assert!(matches!(
            m.on_timeout(token, TRANSFER_TIMEOUT_US),
            MemberOutcome::Lost(_)
        ));
    }
}
