//! Per-block authentication leaves and the Merkle layers that let most of
//! them live on disk.
//!
//! Layer 0 holds one 32-byte leaf per application block: the page's AEAD tag
//! plus the write index and key epoch that parameterize its nonce. Each node
//! page packs 128 entries; layer k+1 holds one keyed hash per layer-k page.
//! The bottom `l` layers live in the disk's metadata region; the first
//! memory-resident layer is the trust anchor while the node runs. With l=0
//! everything is in memory and nothing integrity-related survives a restart,
//! which is exactly why recovery transfers leaf arrays between nodes.

use super::cipher::CipherContext;
use super::disk::VirtualDisk;

pub const MERKLE_ARITY: u64 = 128;
pub const NODE_PAGE: usize = 4096;
const ENTRY: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("integrity fault: layer {layer} node {index} failed verification")]
pub struct IntegrityFault {
    pub layer: u32,
    pub index: u64,
}

/// Entries in layer k (layer 0 = one leaf per application block).
fn entries(app_blocks: u64, k: u32) -> u64 {
    let mut n = app_blocks;
    for _ in 0..k {
        n = n.div_ceil(MERKLE_ARITY);
    }
    n
}

/// Node pages making up layer k.
fn pages(app_blocks: u64, k: u32) -> u64 {
    entries(app_blocks, k).div_ceil(MERKLE_ARITY)
}

/// Metadata pages needed for the on-disk layers 0..l (the superblock page is
/// accounted separately by the disk).
pub fn meta_pages(app_blocks: u64, l: u32) -> u64 {
    (0..l).map(|k| pages(app_blocks, k)).sum()
}

/// Entries the memory-resident anchor layer holds.
pub fn mem_entry_count(app_blocks: u64, l: u32) -> u64 {
    entries(app_blocks, l)
}

/// First metadata page of layer k (page 0 is the superblock).
fn layer_base(app_blocks: u64, k: u32) -> u64 {
    1 + meta_pages(app_blocks, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Leaf {
    pub tag: [u8; 16],
    pub write_index: u64,
    pub key_epoch: u32,
}

impl Leaf {
    pub fn encode(&self) -> [u8; ENTRY] {
        let mut e = [0u8; ENTRY];
        e[..16].copy_from_slice(&self.tag);
        e[16..24].copy_from_slice(&self.write_index.to_le_bytes());
        e[24..28].copy_from_slice(&self.key_epoch.to_le_bytes());
        e
    }

    pub fn decode(e: &[u8]) -> Leaf {
        Leaf {
            tag: e[..16].try_into().unwrap(),
            write_index: u64::from_le_bytes(e[16..24].try_into().unwrap()),
            key_epoch: u32::from_le_bytes(e[24..28].try_into().unwrap()),
        }
    }

    /// Write index 0 marks a block no write ever touched; scans skip it.
    pub fn is_genesis(&self) -> bool {
        self.write_index == 0
    }
}

pub struct IntegrityStore {
    l: u32,
    app_blocks: u64,
    /// l == 0: the leaves themselves
    mem_leaves: Vec<Leaf>,
    /// l >= 1: hashes of the layer l-1 node pages
    mem_hashes: Vec<[u8; 32]>,
    /// Rebuilt from disk after a restart: internally consistent but not
    /// authenticated, so recovery refuses to treat it as a transfer source.
    cold: bool,
}

impl IntegrityStore {
    /// Fresh store over a zeroed device: writes genesis layer pages and
    /// computes the anchor. Warm.
    pub fn format(disk: &mut VirtualDisk, ctx: &CipherContext) -> IntegrityStore {
        let l = disk.merkle_disk_layers();
        let app_blocks = disk.app_blocks();
        let mut s = IntegrityStore {
            l,
            app_blocks,
            mem_leaves: if l == 0 {
                vec![Leaf::default(); app_blocks as usize]
            } else {
                Vec::new()
            },
            mem_hashes: Vec::new(),
            cold: false,
        };
        if l > 0 {
            // leaf pages of a fresh device are all-zero (genesis leaves);
            // upper layers must still hash them
            s.rebuild_upper_layers(disk, ctx);
        }
        s
    }

    /// Reattach after a restart. The anchor is recomputed from the on-disk
    /// layers (or left at genesis for l=0), and the store is marked cold.
    pub fn attach_cold(disk: &VirtualDisk, ctx: &CipherContext) -> IntegrityStore {
        let l = disk.merkle_disk_layers();
        let app_blocks = disk.app_blocks();
        let mut s = IntegrityStore {
            l,
            app_blocks,
            mem_leaves: if l == 0 {
                vec![Leaf::default(); app_blocks as usize]
            } else {
                Vec::new()
            },
            mem_hashes: Vec::new(),
            cold: true,
        };
        if l > 0 {
            s.mem_hashes = (0..pages(app_blocks, l - 1))
                .map(|n| ctx.node_hash(disk.read_meta(layer_base(app_blocks, l - 1) + n)))
                .collect();
        }
        s
    }

    pub fn is_cold(&self) -> bool {
        self.cold
    }

    pub fn mark_warm(&mut self) {
        self.cold = false;
    }

    pub fn disk_layers(&self) -> u32 {
        self.l
    }

    pub fn mem_bytes(&self) -> usize {
        if self.l == 0 {
            self.mem_leaves.len() * ENTRY
        } else {
            self.mem_hashes.len() * ENTRY
        }
    }

    /// Rewrite every upper layer from the layer-0 pages currently on disk
    /// and refresh the anchor.
    fn rebuild_upper_layers(&mut self, disk: &mut VirtualDisk, ctx: &CipherContext) {
        debug_assert!(self.l > 0);
        for k in 0..self.l {
            let hashes: Vec<[u8; 32]> = (0..pages(self.app_blocks, k))
                .map(|n| ctx.node_hash(disk.read_meta(layer_base(self.app_blocks, k) + n)))
                .collect();
            if k + 1 == self.l {
                self.mem_hashes = hashes;
            } else {
                let base = layer_base(self.app_blocks, k + 1);
                for (n, chunk) in hashes.chunks(MERKLE_ARITY as usize).enumerate() {
                    let mut page = vec![0u8; NODE_PAGE];
                    for (i, h) in chunk.iter().enumerate() {
                        page[i * ENTRY..(i + 1) * ENTRY].copy_from_slice(h);
                    }
                    disk.write_meta(base + n as u64, &page);
                }
            }
        }
    }

    /// Check one layer-k page against its parent entry.
    fn verify_page(
        &self,
        disk: &VirtualDisk,
        ctx: &CipherContext,
        k: u32,
        node: u64,
    ) -> Result<(), IntegrityFault> {
        let h = ctx.node_hash(disk.read_meta(layer_base(self.app_blocks, k) + node));
        let expected = if k + 1 == self.l {
            self.mem_hashes[node as usize]
        } else {
            let parent_page = layer_base(self.app_blocks, k + 1) + node / MERKLE_ARITY;
            let off = (node % MERKLE_ARITY) as usize * ENTRY;
            disk.read_meta(parent_page)[off..off + ENTRY]
                .try_into()
                .unwrap()
        };
        if h != expected {
            return Err(IntegrityFault { layer: k, index: node });
        }
        Ok(())
    }

    /// Verify the whole path from `block`'s leaf page up to the anchor.
    fn verify_path(
        &self,
        disk: &VirtualDisk,
        ctx: &CipherContext,
        block: u64,
    ) -> Result<(), IntegrityFault> {
        // top-down so each parent is trusted before its entry is used
        for k in (0..self.l).rev() {
            let node = block / MERKLE_ARITY.pow(k + 1);
            self.verify_page(disk, ctx, k, node)?;
        }
        Ok(())
    }

    pub fn get(
        &self,
        disk: &VirtualDisk,
        ctx: &CipherContext,
        block: u64,
    ) -> Result<Leaf, IntegrityFault> {
        if self.l == 0 {
            return Ok(self.mem_leaves[block as usize]);
        }
        self.verify_path(disk, ctx, block)?;
        let page = disk.read_meta(layer_base(self.app_blocks, 0) + block / MERKLE_ARITY);
        let off = (block % MERKLE_ARITY) as usize * ENTRY;
        Ok(Leaf::decode(&page[off..off + ENTRY]))
    }

    pub fn put(
        &mut self,
        disk: &mut VirtualDisk,
        ctx: &CipherContext,
        block: u64,
        leaf: Leaf,
    ) -> Result<(), IntegrityFault> {
        if self.l == 0 {
            self.mem_leaves[block as usize] = leaf;
            return Ok(());
        }
        // verify before read-modify-write: blessing a tampered sibling into
        // the new hashes would defeat the whole structure
        self.verify_path(disk, ctx, block)?;
        let mut node = block / MERKLE_ARITY;
        let mut page = disk
            .read_meta(layer_base(self.app_blocks, 0) + node)
            .to_vec();
        let off = (block % MERKLE_ARITY) as usize * ENTRY;
        page[off..off + ENTRY].copy_from_slice(&leaf.encode());
        disk.write_meta(layer_base(self.app_blocks, 0) + node, &page);
        let mut h = ctx.node_hash(&page);
        for k in 1..self.l {
            let parent = node / MERKLE_ARITY;
            let mut ppage = disk
                .read_meta(layer_base(self.app_blocks, k) + parent)
                .to_vec();
            let off = (node % MERKLE_ARITY) as usize * ENTRY;
            ppage[off..off + ENTRY].copy_from_slice(&h);
            disk.write_meta(layer_base(self.app_blocks, k) + parent, &ppage);
            h = ctx.node_hash(&ppage);
            node = parent;
        }
        self.mem_hashes[node as usize] = h;
        Ok(())
    }

    /// Full verified leaf array, for hash transfer during recovery.
    pub fn leaves(
        &self,
        disk: &VirtualDisk,
        ctx: &CipherContext,
    ) -> Result<Vec<Leaf>, IntegrityFault> {
        if self.l == 0 {
            return Ok(self.mem_leaves.clone());
        }
        for k in (0..self.l).rev() {
            for node in 0..pages(self.app_blocks, k) {
                self.verify_page(disk, ctx, k, node)?;
            }
        }
        Ok(self.decode_all(disk))
    }

    /// Unverified leaf array: a cold node's claim about its own state.
    pub fn leaves_raw(&self, disk: &VirtualDisk) -> Vec<Leaf> {
        if self.l == 0 {
            return self.mem_leaves.clone();
        }
        self.decode_all(disk)
    }

    /// Single leaf without path verification. Exists only as the mutation
    /// hook for validating that the test suite notices when verification is
    /// skipped; the protocol never calls it.
    pub fn get_raw(&self, disk: &VirtualDisk, block: u64) -> Leaf {
        if self.l == 0 {
            return self.mem_leaves[block as usize];
        }
        let page = disk.read_meta(layer_base(self.app_blocks, 0) + block / MERKLE_ARITY);
        let off = (block % MERKLE_ARITY) as usize * ENTRY;
        Leaf::decode(&page[off..off + ENTRY])
    }

    fn decode_all(&self, disk: &VirtualDisk) -> Vec<Leaf> {
        let base = layer_base(self.app_blocks, 0);
        (0..self.app_blocks)
            .map(|b| {
                let page = disk.read_meta(base + b / MERKLE_ARITY);
                let off = (b % MERKLE_ARITY) as usize * ENTRY;
                Leaf::decode(&page[off..off + ENTRY])
            })
            .collect()
    }

    /// Adopt a transferred leaf array wholesale and warm the store.
    pub fn install(&mut self, disk: &mut VirtualDisk, ctx: &CipherContext, leaves: &[Leaf]) {
        assert_eq!(leaves.len() as u64, self.app_blocks);
        if self.l == 0 {
            self.mem_leaves = leaves.to_vec();
        } else {
            let base = layer_base(self.app_blocks, 0);
            for (n, chunk) in leaves.chunks(MERKLE_ARITY as usize).enumerate() {
                let mut page = vec![0u8; NODE_PAGE];
                for (i, leaf) in chunk.iter().enumerate() {
                    page[i * ENTRY..(i + 1) * ENTRY].copy_from_slice(&leaf.encode());
                }
                disk.write_meta(base + n as u64, &page);
            }
            self.rebuild_upper_layers(disk, ctx);
        }
        self.cold = false;
    }

    /// Highest write index any leaf records; a restarted node's claim in
    /// recovery.
    pub fn max_write_index(&self, disk: &VirtualDisk) -> u64 {
        self.leaves_raw(disk)
            .iter()
            .map(|l| l.write_index)
            .max()
            .unwrap_or(0)
    }
}
