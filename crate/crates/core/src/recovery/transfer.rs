//! The state transfer core shared by the coordinator and resyncing
//! members: walk the designated node's leaf array, keep every local page
//! that authenticates under it, pull the rest with a bounded request
//! window, and refuse anything the designated serves that its own hashes
//! disown.

use super::RecoveryEffect;
use crate::model::SyncFlags;
use crate::storage::{CipherContext, Leaf, VirtualDisk};
use crate::transport::{MsgType, NodeId, WireMessage};

pub const TRANSFER_WINDOW: usize = 64;

/// The designated node misbehaved: cold anchor, malformed response, or a
/// page its own leaf rejects. The caller drops it and reselects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DesignatedFault;

pub(crate) struct Transfer {
    pub designated: NodeId,
    ballot: u64,
    pub epoch_d: u32,
    pub wi_d: u64,
    leaves_d: Vec<Leaf>,
    loaded: bool,
    cursor: u64,
    outstanding: Vec<u64>,
    pub pages_checked: u64,
    pub pages_pulled: u64,
    pub hash_bytes: u64,
    pub page_bytes: u64,
}

impl Transfer {
    pub fn new(designated: NodeId, ballot: u64, wi_d: u64) -> Transfer {
        Transfer {
            designated,
            ballot,
            epoch_d: 0,
            wi_d,
            leaves_d: Vec::new(),
            loaded: false,
            cursor: 0,
            outstanding: Vec::new(),
            pages_checked: 0,
            pages_pulled: 0,
            hash_bytes: 0,
            page_bytes: 0,
        }
    }

    pub fn hash_request(&self) -> RecoveryEffect {
        RecoveryEffect::Send {
            to: self.designated,
            msg: WireMessage {
                mtype: MsgType::HashReq,
                ballot: self.ballot,
                write_index: 0,
                block: 0,
                flags: SyncFlags::NONE,
                payload: Vec::new(),
            },
        }
    }

    pub fn load_hash_resp(
        &mut self,
        msg: &WireMessage,
        app_blocks: u64,
    ) -> Result<(), DesignatedFault> {
        if self.loaded {
            return Ok(()); // duplicate
        }
        if msg.payload.len() != 5 + app_blocks as usize * 32 || msg.payload[0] != 0 {
            return Err(DesignatedFault);
        }
        self.epoch_d = u32::from_le_bytes(msg.payload[1..5].try_into().unwrap());
        self.leaves_d = msg.payload[5..].chunks(32).map(Leaf::decode).collect();
        self.hash_bytes = msg.payload.len() as u64;
        self.loaded = true;
        Ok(())
    }

    pub fn leaves(&self) -> &[Leaf] {
        assert!(self.loaded);
        &self.leaves_d
    }

    /// Examine blocks up to the window bound, emitting pulls for the pages
    /// this node cannot authenticate. `own_leaves` is the warm shortcut: a
    /// node whose anchor survived may trust leaf equality instead of
    /// decrypting; a cold node must check every page the hard way.
    pub fn advance(
        &mut self,
        own_leaves: Option<&[Leaf]>,
        disk: &VirtualDisk,
        ctx: &CipherContext,
        out: &mut Vec<RecoveryEffect>,
    ) {
        assert!(self.loaded);
        while self.outstanding.len() < TRANSFER_WINDOW && self.cursor < self.leaves_d.len() as u64
        {
            let block = self.cursor;
            self.cursor += 1;
            let leaf = self.leaves_d[block as usize];
            if leaf.is_genesis() {
                // never written anywhere: reads return zeroes regardless of
                // page contents, so there is nothing to move
                continue;
            }
            self.pages_checked += 1;
            if own_leaves.is_some_and(|ls| ls[block as usize] == leaf) {
                continue;
            }
            if ctx
                .open_page(
                    block,
                    leaf.write_index,
                    leaf.key_epoch,
                    disk.logical_read(block),
                    &leaf.tag,
                )
                .is_ok()
            {
                continue;
            }
            self.pages_pulled += 1;
            self.outstanding.push(block);
            out.push(RecoveryEffect::Send {
                to: self.designated,
                msg: WireMessage {
                    mtype: MsgType::PageReq,
                    ballot: self.ballot,
                    write_index: 0,
                    block,
                    flags: SyncFlags::NONE,
                    payload: Vec::new(),
                },
            });
        }
    }

    /// Returns true if the response filled an outstanding pull. A page that
    /// fails its own leaf is a designated fault, not a tolerable loss:
    /// installing it would plant an inconsistency the next read trips over.
    pub fn on_page(
        &mut self,
        msg: &WireMessage,
        disk: &mut VirtualDisk,
        ctx: &CipherContext,
    ) -> Result<bool, DesignatedFault> {
        let Some(pos) = self.outstanding.iter().position(|&b| b == msg.block) else {
            return Ok(false);
        };
        let leaf = self.leaves_d[msg.block as usize];
        if ctx
            .open_page(
                msg.block,
                leaf.write_index,
                leaf.key_epoch,
                &msg.payload,
                &leaf.tag,
            )
            .is_err()
        {
            return Err(DesignatedFault);
        }
        disk.install_page(msg.block, &msg.payload);
        self.page_bytes += msg.payload.len() as u64;
        self.outstanding.swap_remove(pos);
        Ok(true)
    }

    pub fn is_done(&self) -> bool {
        self.loaded && self.cursor == self.leaves_d.len() as u64 && self.outstanding.is_empty()
    }
}
