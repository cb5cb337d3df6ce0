//! The virtual disk: persisted pages, per-block volatile logs, and a crash
//! model that drops an arbitrary suffix of each block's unflushed writes.

use super::image::DiskImage;
use super::integrity::meta_pages;
use crate::model::SyncFlags;
use rand::Rng;
use std::collections::BTreeMap;

pub type IoId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoKind {
    Write {
        block: u64,
        payload: Vec<u8>,
        sync: SyncFlags,
    },
    Read {
        block: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoResult {
    Write,
    Read(Vec<u8>),
    /// The submission predates a crash or restore; the caller's completion
    /// event is stale.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("block {block} out of range (device has {blocks} application blocks)")]
pub struct OutOfRange {
    pub block: u64,
    pub blocks: u64,
}

/// Completion delay description; the simulation samples it.
#[derive(Debug, Clone, Copy)]
pub enum IoLatency {
    FixedMicros(u64),
    UniformMicros { lo: u64, hi: u64 },
}

impl IoLatency {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match *self {
            IoLatency::FixedMicros(v) => v,
            IoLatency::UniformMicros { lo, hi } => rng.gen_range(lo..=hi),
        }
    }
}

pub struct VirtualDisk {
    block_size: u32,
    app_blocks: u64,
    l: u32,
    persisted: Vec<Vec<u8>>,
    /// metadata region: page 0 is the superblock, then the on-disk Merkle
    /// layers; writes here persist immediately
    meta: Vec<Vec<u8>>,
    volatile: BTreeMap<u64, Vec<Vec<u8>>>,
    inflight: BTreeMap<IoId, IoKind>,
    next_io: IoId,
    latency: IoLatency,
}

impl VirtualDisk {
    pub fn new(block_size: u32, app_blocks: u64, l: u32) -> VirtualDisk {
        assert!(
            l == 0 || block_size == 4096,
            "on-disk integrity layers assume 4096-byte pages"
        );
        let meta_count = 1 + meta_pages(app_blocks, l);
        VirtualDisk {
            block_size,
            app_blocks,
            l,
            persisted: vec![vec![0; block_size as usize]; app_blocks as usize],
            meta: vec![vec![0; block_size as usize]; meta_count as usize],
            volatile: BTreeMap::new(),
            inflight: BTreeMap::new(),
            next_io: 1,
            latency: IoLatency::FixedMicros(100),
        }
    }

    pub fn with_latency(mut self, latency: IoLatency) -> VirtualDisk {
        self.latency = latency;
        self
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn app_blocks(&self) -> u64 {
        self.app_blocks
    }

    pub fn merkle_disk_layers(&self) -> u32 {
        self.l
    }

    pub fn latency(&self) -> IoLatency {
        self.latency
    }

    pub fn inflight_count(&self) -> usize {
        self.inflight.len()
    }

    pub fn submit(&mut self, kind: IoKind) -> Result<IoId, OutOfRange> {
        let block = match &kind {
            IoKind::Write { block, payload, .. } => {
                assert_eq!(payload.len(), self.block_size as usize, "partial-page write");
                *block
            }
            IoKind::Read { block } => *block,
        };
        if block >= self.app_blocks {
            return Err(OutOfRange {
                block,
                blocks: self.app_blocks,
            });
        }
        let id = self.next_io;
        self.next_io += 1;
        self.inflight.insert(id, kind);
        Ok(id)
    }

    /// Apply a submitted operation. PREFLUSH first empties every volatile
    /// log into the persisted tier (all previously completed writes become
    /// durable). A flagged write's own payload persists at completion:
    /// completing a FUA or PREFLUSH write promises it durable, which is what
    /// makes crash states durable cuts of the submission history.
    pub fn complete(&mut self, id: IoId) -> IoResult {
        let Some(kind) = self.inflight.remove(&id) else {
            return IoResult::Dropped;
        };
        match kind {
            IoKind::Write {
                block,
                payload,
                sync,
            } => {
                if sync.preflush() {
                    self.flush_all();
                }
                if sync.fua() || sync.preflush() {
                    self.persisted[block as usize] = payload;
                    self.volatile.remove(&block);
                } else {
                    self.volatile.entry(block).or_default().push(payload);
                }
                IoResult::Write
            }
            IoKind::Read { block } => IoResult::Read(self.logical_read(block).to_vec()),
        }
    }

    fn flush_all(&mut self) {
        for (block, log) in std::mem::take(&mut self.volatile) {
            if let Some(last) = log.into_iter().last() {
                self.persisted[block as usize] = last;
            }
        }
    }

    /// Current content of a block as the device would serve it: the last
    /// completed write, volatile or not.
    pub fn logical_read(&self, block: u64) -> &[u8] {
        match self.volatile.get(&block).and_then(|log| log.last()) {
            Some(v) => v,
            None => &self.persisted[block as usize],
        }
    }

    pub fn persisted_read(&self, block: u64) -> &[u8] {
        &self.persisted[block as usize]
    }

    /// Power failure: every in-flight operation vanishes and each block
    /// independently keeps some prefix of its volatile log.
    pub fn crash_seeded<R: Rng>(&mut self, rng: &mut R) {
        let points: BTreeMap<u64, usize> = self
            .volatile
            .iter()
            .map(|(&b, log)| (b, rng.gen_range(0..=log.len())))
            .collect();
        self.crash_with_points(&points);
    }

    /// `points` maps block -> number of volatile entries retained (missing
    /// blocks retain everything, matching a flush racing the power cut).
    pub fn crash_with_points(&mut self, points: &BTreeMap<u64, usize>) {
        for (block, log) in std::mem::take(&mut self.volatile) {
            let k = points.get(&block).copied().unwrap_or(log.len());
            assert!(k <= log.len(), "retention point beyond log");
            if k > 0 {
                self.persisted[block as usize] = log[k - 1].clone();
            }
        }
        self.inflight.clear();
    }

    /// Direct persisted write, bypassing the volatile tier; used for page
    /// repair during recovery and by the integrity store via `write_meta`.
    pub fn install_page(&mut self, block: u64, bytes: &[u8]) {
        assert_eq!(bytes.len(), self.block_size as usize);
        self.volatile.remove(&block);
        self.persisted[block as usize] = bytes.to_vec();
    }

    pub fn meta_page_count(&self) -> u64 {
        self.meta.len() as u64
    }

    pub fn read_meta(&self, page: u64) -> &[u8] {
        &self.meta[page as usize]
    }

    pub fn write_meta(&mut self, page: u64, bytes: &[u8]) {
        assert_eq!(bytes.len(), self.block_size as usize);
        self.meta[page as usize] = bytes.to_vec();
    }

    /// Byte-exact capture of the persisted tier plus the metadata region.
    /// Volatile and in-flight state is deliberately absent: an image is what
    /// survives a power cut that retains nothing.
    pub fn snapshot(&self) -> DiskImage {
        DiskImage {
            block_size: self.block_size,
            app_blocks: self.app_blocks,
            l: self.l,
            app: self.persisted.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Replace the persisted state with `img`; volatile and in-flight state
    /// is dropped. This is both legitimate restart plumbing and the rollback
    /// attack primitive.
    pub fn restore(&mut self, img: &DiskImage) {
        assert_eq!(img.block_size, self.block_size);
        assert_eq!(img.app_blocks, self.app_blocks);
        assert_eq!(img.l, self.l);
        self.persisted = img.app.clone();
        self.meta = img.meta.clone();
        self.volatile.clear();
        self.inflight.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn page(byte: u8) -> Vec<u8> {
        vec![byte; 512]
    }

    fn disk() -> VirtualDisk {
        VirtualDisk::new(512, 4, 0)
    }

    fn write(d: &mut VirtualDisk, block: u64, byte: u8, sync: SyncFlags) {
        let id = d
            .submit(IoKind::Write {
                block,
                payload: page(byte),
                sync,
            })
            .unwrap();
        assert_eq!(d.complete(id), IoResult::Write);
    }

    #[test]
    fn unflushed_write_may_be_lost_at_crash() {
        let mut d = disk();
        write(&mut d, 0, 1, SyncFlags::NONE);
        let mut keep_none = BTreeMap::new();
        keep_none.insert(0u64, 0usize);
        d.crash_with_points(&keep_none);
        assert_eq!(d.logical_read(0), &page(0)[..]);
    }

    #[test]
    fn fua_write_survives_any_crash() {
        let mut d = disk();
        write(&mut d, 0, 1, SyncFlags::FUA);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        d.crash_seeded(&mut rng);
        assert_eq!(d.logical_read(0), &page(1)[..]);
    }

    #[test]
    fn preflush_persists_prior_completed_writes_and_itself() {
        let mut d = disk();
        write(&mut d, 0, 1, SyncFlags::NONE);
        // in-flight write on block 2: submitted, not completed
        let pending = d
            .submit(IoKind::Write {
                block: 2,
                payload: page(9),
                sync: SyncFlags::NONE,
            })
            .unwrap();
        write(&mut d, 1, 2, SyncFlags::PREFLUSH);
        // crash retaining nothing volatile: block 0 was flushed by the
        // preflush completion, block 1 persisted with it (a completed
        // flagged write is durable), the in-flight block-2 write is gone
        d.crash_with_points(&BTreeMap::from([(0, 0), (1, 0), (2, 0)]));
        assert_eq!(d.logical_read(0), &page(1)[..]);
        assert_eq!(d.logical_read(1), &page(2)[..]);
        assert_eq!(d.logical_read(2), &page(0)[..]);
        assert_eq!(d.complete(pending), IoResult::Dropped);
    }

    #[test]
    fn flagged_write_clears_stale_volatile_entries() {
        let mut d = disk();
        write(&mut d, 0, 1, SyncFlags::NONE);
        write(&mut d, 0, 2, SyncFlags::FUA);
        // no crash point may resurrect the unflagged value over the FUA one
        d.crash_with_points(&BTreeMap::from([(0, 1)]));
        assert_eq!(d.logical_read(0), &page(2)[..]);
    }

    #[test]
    fn crash_reaches_every_suffix_point() {
        // two unflushed writes to one block: distinct seeds must reach all
        // of {old, w1, w2}
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..32u64 {
            let mut d = disk();
            write(&mut d, 0, 1, SyncFlags::NONE);
            write(&mut d, 0, 2, SyncFlags::NONE);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            d.crash_seeded(&mut rng);
            seen.insert(d.logical_read(0)[0]);
        }
        assert_eq!(seen, std::collections::BTreeSet::from([0u8, 1, 2]));
    }

    #[test]
    fn logical_read_sees_volatile_tier() {
        let mut d = disk();
        write(&mut d, 3, 7, SyncFlags::NONE);
        assert_eq!(d.logical_read(3), &page(7)[..]);
        assert_eq!(d.persisted_read(3), &page(0)[..]);
    }

    #[test]
    fn reads_complete_with_content_at_completion_time() {
        let mut d = disk();
        let r = d.submit(IoKind::Read { block: 0 }).unwrap();
        write(&mut d, 0, 5, SyncFlags::NONE);
        // the read completes after the write did, so it observes it
        assert_eq!(d.complete(r), IoResult::Read(page(5)));
    }

    #[test]
    fn out_of_range_rejected() {
        let mut d = disk();
        assert!(d.submit(IoKind::Read { block: 4 }).is_err());
    }

    #[test]
    fn snapshot_restore_round_trip_and_rollback() {
        let mut d = disk();
        write(&mut d, 0, 1, SyncFlags::FUA);
        let img = d.snapshot();
        write(&mut d, 0, 2, SyncFlags::FUA);
        assert_eq!(d.logical_read(0), &page(2)[..]);
        d.restore(&img);
        // stale value visible to raw reads after rollback
        assert_eq!(d.logical_read(0), &page(1)[..]);
    }
}
