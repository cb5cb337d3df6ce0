//! The recovery coordinator. Runs on the recovering machine under a fresh
//! identity, since whatever identity the machine had before the crash went
//! down with its volatile state.

use super::transfer::Transfer;
use super::{AbortReason, RecoveryEffect, ReconfigBody};
use crate::model::SyncFlags;
use crate::replica::{Mutation, Replica};
use crate::storage::{CipherContext, IntegrityStore, VirtualDisk};
use crate::transport::{ConfigService, Configuration, MsgType, NodeId, WireMessage};
use std::collections::{BTreeMap, BTreeSet};

/// How long to wait for promise replies before judging the quorum with
/// whatever arrived.
pub const P1B_TIMEOUT_US: u64 = 100_000;
/// Progress bound for the transfer: each response re-arms it, so it only
/// fires when the designated node stops answering.
pub const TRANSFER_TIMEOUT_US: u64 = 200_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub ballot: u64,
    pub designated: NodeId,
    pub p1b_received: u64,
    pub hash_bytes: u64,
    pub pages_checked: u64,
    pub pages_pulled: u64,
    pub page_bytes: u64,
    pub designated_lost: u64,
    pub started_at: u64,
    pub finished_at: u64,
}

pub struct Recovered {
    pub replica: Replica,
    pub report: RecoveryReport,
    /// Reconfiguration frames for the other members of the new
    /// configuration.
    pub reconfigs: Vec<RecoveryEffect>,
}

pub enum Outcome {
    Continue(Vec<RecoveryEffect>),
    Finished(Box<Recovered>),
    Abort(AbortReason),
}

#[derive(Debug, Clone, Copy)]
struct P1bInfo {
    own_ballot: u64,
    write_index: u64,
    cold: bool,
}

enum Phase {
    CollectP1b,
    Transfer(Transfer),
    Done,
}

pub struct Coordinator {
    node: NodeId,
    incarnation: u32,
    ballot: u64,
    new_conf: Configuration,
    ctx: Option<CipherContext>,
    disk: Option<VirtualDisk>,
    integrity: Option<IntegrityStore>,
    priors: Vec<Configuration>,
    pinged: BTreeSet<NodeId>,
    p1bs: BTreeMap<NodeId, P1bInfo>,
    tried: BTreeSet<NodeId>,
    phase: Phase,
    active_token: u64,
    report: RecoveryReport,
    mutation: Mutation,
}

impl Coordinator {
    /// Register the new configuration and fence everyone who came before.
    /// The service call is synchronous: it is the trusted serialization
    /// point, and exactly one coordinator per ballot gets past it.
    #[allow(clippy::too_many_arguments)]
    pub fn start(
        node: NodeId,
        incarnation: u32,
        members: Vec<NodeId>,
        f: u32,
        master: [u8; 32],
        disk: VirtualDisk,
        service: &mut ConfigService,
        now: u64,
        mutation: Mutation,
    ) -> Result<(Coordinator, Vec<RecoveryEffect>), (AbortReason, VirtualDisk)> {
        assert_eq!(members[0], node, "the coordinator serves the new configuration");
        let ballot = service.highest_ballot().map_or(1, |h| h + 1);
        let new_conf =
            Configuration::new(ballot, members, f).expect("harness built a malformed membership");
        let mb = match service.match_a(ballot, new_conf.clone()) {
            Ok(mb) => mb,
            Err(_) => return Err((AbortReason::LostRace, disk)),
        };
        if mb.ballot_c != ballot {
            return Err((AbortReason::LostRace, disk));
        }
        let priors: Vec<Configuration> = mb
            .all_conf
            .into_iter()
            .filter(|c| c.ballot < ballot)
            .collect();
        assert!(!priors.is_empty(), "recovery without any prior configuration");
        let ctx = CipherContext::new(master, 0);
        let integrity = IntegrityStore::attach_cold(&disk, &ctx);
        let pinged: BTreeSet<NodeId> = priors
            .iter()
            .flat_map(|c| c.members.iter().copied())
            .filter(|&m| m != node)
            .collect();
        let mut c = Coordinator {
            node,
            incarnation,
            ballot,
            new_conf,
            ctx: Some(ctx),
            disk: Some(disk),
            integrity: Some(integrity),
            priors,
            pinged,
            p1bs: BTreeMap::new(),
            tried: BTreeSet::new(),
            phase: Phase::CollectP1b,
            active_token: 0,
            report: RecoveryReport {
                ballot,
                started_at: now,
                ..RecoveryReport::default()
            },
            mutation,
        };
        let mut effects: Vec<RecoveryEffect> = c
            .pinged
            .iter()
            .map(|&to| RecoveryEffect::Send {
                to,
                msg: WireMessage {
                    mtype: MsgType::P1a,
                    ballot,
                    write_index: 0,
                    block: 0,
                    flags: SyncFlags::NONE,
                    payload: Vec::new(),
                },
            })
            .collect();
        effects.push(c.arm_timer(now + P1B_TIMEOUT_US));
        Ok((c, effects))
    }

    pub fn ballot(&self) -> u64 {
        self.ballot
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Salvage the disk after an abort so the machine can try again later.
    /// Only valid before the round finishes; a finished round moved the disk
    /// into the recovered replica.
    pub(crate) fn into_disk(self) -> VirtualDisk {
        self.disk.expect("round already finished")
    }

    fn arm_timer(&mut self, at: u64) -> RecoveryEffect {
        self.active_token += 1;
        RecoveryEffect::Timer {
            at,
            token: self.active_token,
        }
    }

    pub fn on_message(&mut self, from: NodeId, bytes: &[u8], now: u64) -> Outcome {
        let Ok(msg) = WireMessage::decode(bytes, self.ctx.as_ref().unwrap()) else {
            return Outcome::Continue(Vec::new());
        };
        if msg.ballot != self.ballot {
            return Outcome::Continue(Vec::new());
        }
        match msg.mtype {
            MsgType::P1b => {
                if !matches!(self.phase, Phase::CollectP1b)
                    || !self.pinged.contains(&from)
                    || msg.payload.len() != 9
                {
                    return Outcome::Continue(Vec::new());
                }
                self.p1bs.insert(
                    from,
                    P1bInfo {
                        own_ballot: u64::from_le_bytes(msg.payload[..8].try_into().unwrap()),
                        write_index: msg.write_index,
                        cold: msg.payload[8] != 0,
                    },
                );
                if self.p1bs.len() == self.pinged.len() {
                    // everyone answered; no point sitting out the timer
                    return self.evaluate(now);
                }
                Outcome::Continue(Vec::new())
            }
            MsgType::HashResp => {
                let Phase::Transfer(t) = &self.phase else {
                    return Outcome::Continue(Vec::new());
                };
                if from != t.designated {
                    return Outcome::Continue(Vec::new());
                }
                let app_blocks = self.disk.as_ref().unwrap().app_blocks();
                let Phase::Transfer(t) = &mut self.phase else {
                    unreachable!()
                };
                if t.load_hash_resp(&msg, app_blocks).is_err() {
                    return self.designated_failed(now);
                }
                self.pump_transfer(now)
            }
            MsgType::PageResp => {
                let Phase::Transfer(t) = &mut self.phase else {
                    return Outcome::Continue(Vec::new());
                };
                if from != t.designated {
                    return Outcome::Continue(Vec::new());
                }
                match t.on_page(&msg, self.disk.as_mut().unwrap(), self.ctx.as_ref().unwrap()) {
                    Err(_) => self.designated_failed(now),
                    Ok(false) => Outcome::Continue(Vec::new()),
                    Ok(true) => self.pump_transfer(now),
                }
            }
            _ => Outcome::Continue(Vec::new()),
        }
    }

    pub fn on_timeout(&mut self, token: u64, now: u64) -> Outcome {
        if token != self.active_token {
            return Outcome::Continue(Vec::new());
        }
        match self.phase {
            Phase::CollectP1b => self.evaluate(now),
            Phase::Transfer(_) => self.designated_failed(now),
            Phase::Done => Outcome::Continue(Vec::new()),
        }
    }

    /// One reachable node per prior configuration rules out a completed
    /// flagged write this recovery could miss; the latest configuration
    /// additionally needs enough members that at least one of them holds
    /// every acknowledged write.
    fn evaluate(&mut self, now: u64) -> Outcome {
        self.report.p1b_received = self.p1bs.len() as u64;
        for c in &self.priors {
            let reached = c.members.iter().filter(|m| self.p1bs.contains_key(m)).count() as u32;
            let needed = if c.ballot == self.priors.last().unwrap().ballot {
                c.n() - c.f
            } else {
                1
            };
            if reached < needed {
                return Outcome::Abort(AbortReason::InsufficientQuorum {
                    conf_ballot: c.ballot,
                });
            }
        }
        self.begin_transfer(now)
    }

    fn select_designated(&self) -> Option<(NodeId, u64)> {
        self.p1bs
            .iter()
            .filter(|(n, i)| !i.cold && !self.tried.contains(n))
            .max_by_key(|(n, i)| (i.own_ballot, i.write_index, **n))
            .map(|(&n, i)| (n, i.write_index))
    }

    fn begin_transfer(&mut self, now: u64) -> Outcome {
        let Some((designated, wi_d)) = self.select_designated() else {
            return Outcome::Abort(AbortReason::NoWarmCandidate);
        };
        self.report.designated = designated;
        let t = Transfer::new(designated, self.ballot, wi_d);
        let mut effects = vec![t.hash_request()];
        self.phase = Phase::Transfer(t);
        effects.push(self.arm_timer(now + TRANSFER_TIMEOUT_US));
        Outcome::Continue(effects)
    }

    fn designated_failed(&mut self, now: u64) -> Outcome {
        let Phase::Transfer(t) = &self.phase else {
            unreachable!()
        };
        self.tried.insert(t.designated);
        self.fold_counters();
        self.report.designated_lost += 1;
        self.begin_transfer(now)
    }

    fn fold_counters(&mut self) {
        let Phase::Transfer(t) = &self.phase else {
            unreachable!()
        };
        self.report.hash_bytes += t.hash_bytes;
        self.report.pages_checked += t.pages_checked;
        self.report.pages_pulled += t.pages_pulled;
        self.report.page_bytes += t.page_bytes;
    }

    fn pump_transfer(&mut self, now: u64) -> Outcome {
        let mut effects = Vec::new();
        {
            let Phase::Transfer(t) = &mut self.phase else {
                unreachable!()
            };
            // the coordinator's anchor did not survive the restart, so no
            // warm shortcut: every claimed page gets decrypted or pulled
            t.advance(
                None,
                self.disk.as_ref().unwrap(),
                self.ctx.as_ref().unwrap(),
                &mut effects,
            );
        }
        let Phase::Transfer(t) = &self.phase else {
            unreachable!()
        };
        if t.is_done() {
            return self.finish(now);
        }
        effects.push(self.arm_timer(now + TRANSFER_TIMEOUT_US));
        Outcome::Continue(effects)
    }

    fn finish(&mut self, now: u64) -> Outcome {
        self.fold_counters();
        let Phase::Transfer(t) = std::mem::replace(&mut self.phase, Phase::Done) else {
            unreachable!()
        };
        let mut ctx = self.ctx.take().unwrap();
        let mut disk = self.disk.take().unwrap();
        let mut integrity = self.integrity.take().unwrap();
        integrity.install(&mut disk, &ctx, t.leaves());
        // writes under the new configuration use a fresh data key; every
        // page the old one sealed stays readable through its leaf epoch
        ctx.set_epoch(t.epoch_d + 1);
        let body = ReconfigBody {
            epoch_next: t.epoch_d + 1,
            designated: t.designated,
            conf: self.new_conf.clone(),
        };
        let reconfigs: Vec<RecoveryEffect> = self
            .new_conf
            .members
            .iter()
            .filter(|&&m| m != self.node)
            .map(|&to| RecoveryEffect::Send {
                to,
                msg: WireMessage {
                    mtype: MsgType::Reconfig,
                    ballot: self.ballot,
                    write_index: t.wi_d,
                    block: 0,
                    flags: SyncFlags::NONE,
                    payload: body.encode(),
                },
            })
            .collect();
        self.report.finished_at = now;
        let replica = Replica::from_recovery(
            self.node,
            self.incarnation,
            self.new_conf.clone(),
            ctx,
            disk,
            integrity,
            t.wi_d,
            self.mutation,
            self.new_conf.primary() == self.node,
        );
        Outcome::Finished(Box::new(Recovered {
            replica,
            report: self.report,
            reconfigs,
        }))
    }
}
