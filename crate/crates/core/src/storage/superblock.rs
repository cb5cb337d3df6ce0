//! Superblock: the little durable state a node keeps besides pages and
//! integrity layers. Persists the ballot pair across restarts and a
//! conservative durable write-index floor.

const MAGIC: &[u8; 4] = b"RSSB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Superblock {
    pub ballot: u64,
    pub seen_ballot: u64,
    pub key_epoch: u32,
    /// Highest write index known contiguously persisted (updated at flush
    /// boundaries, so possibly lower than what a crash actually retained).
    pub durable_write_index: u64,
    /// Restart counter; gives each incarnation a fresh identity.
    pub incarnation: u32,
}

impl Superblock {
    pub fn encode(&self, block_size: u32) -> Vec<u8> {
        let mut page = vec![0u8; block_size as usize];
        page[..4].copy_from_slice(MAGIC);
        page[4..8].copy_from_slice(&VERSION.to_le_bytes());
        page[8..16].copy_from_slice(&self.ballot.to_le_bytes());
        page[16..24].copy_from_slice(&self.seen_ballot.to_le_bytes());
        page[24..28].copy_from_slice(&self.key_epoch.to_le_bytes());
        page[28..36].copy_from_slice(&self.durable_write_index.to_le_bytes());
        page[36..40].copy_from_slice(&self.incarnation.to_le_bytes());
        page
    }

    /// An all-zero page (freshly formatted device) decodes to the genesis
    /// superblock; anything else must carry the magic.
    pub fn decode(page: &[u8]) -> Option<Superblock> {
        if page.iter().all(|&b| b == 0) {
            return Some(Superblock::default());
        }
        if &page[..4] != MAGIC || u32::from_le_bytes(page[4..8].try_into().unwrap()) != VERSION {
            return None;
        }
        Some(Superblock {
            ballot: u64::from_le_bytes(page[8..16].try_into().unwrap()),
            seen_ballot: u64::from_le_bytes(page[16..24].try_into().unwrap()),
            key_epoch: u32::from_le_bytes(page[24..28].try_into().unwrap()),
            durable_write_index: u64::from_le_bytes(page[28..36].try_into().unwrap()),
            incarnation: u32::from_le_bytes(page[36..40].try_into().unwrap()),
        })
    }
}
