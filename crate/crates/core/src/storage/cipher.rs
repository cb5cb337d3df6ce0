//! Page encryption and keyed hashing.
//!
//! One deployment-wide master secret; everything else is derived: a MAC key
//! for wire frames, a hash key for Merkle nodes, and one AES-256-GCM data
//! key per key epoch. Epochs advance with the configuration ballot, so a
//! (write_index, block) nonce pair can never repeat under the same key even
//! after recovery resets write indexes.

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes256Gcm, Key, KeyInit, Nonce, Tag};
use hmac::{Hmac, Mac};
use sha2::Sha256;
use std::cell::RefCell;
use std::collections::BTreeMap;

pub const PAGE_TAG_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("page authentication failed for block {block} (epoch {epoch}, write index {write_index})")]
pub struct AuthFailure {
    pub block: u64,
    pub epoch: u32,
    pub write_index: u64,
}

pub struct CipherContext {
    master: [u8; 32],
    mac_key: [u8; 32],
    hash_key: [u8; 32],
    epoch: u32,
    data_keys: RefCell<BTreeMap<u32, Key<Aes256Gcm>>>,
}

fn hmac256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        m.update(p);
    }
    m.finalize().into_bytes().into()
}

impl CipherContext {
    pub fn new(master: [u8; 32], epoch: u32) -> CipherContext {
        CipherContext {
            mac_key: hmac256(&master, &[b"mac"]),
            hash_key: hmac256(&master, &[b"hash"]),
            master,
            epoch,
            data_keys: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// Key epochs follow the ballot; recovery bumps this on every node that
    /// adopts the new configuration.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    fn data_key(&self, epoch: u32) -> Key<Aes256Gcm> {
        *self
            .data_keys
            .borrow_mut()
            .entry(epoch)
            .or_insert_with(|| hmac256(&self.master, &[b"data", &epoch.to_le_bytes()]).into())
    }

    fn nonce(write_index: u64, block: u64) -> Nonce<aes_gcm::aead::consts::U12> {
        let mut n = [0u8; 12];
        n[..8].copy_from_slice(&write_index.to_le_bytes());
        n[8..].copy_from_slice(&(block as u32).to_le_bytes());
        n.into()
    }

    fn aad(write_index: u64, block: u64, epoch: u32) -> [u8; 20] {
        let mut a = [0u8; 20];
        a[..8].copy_from_slice(&write_index.to_le_bytes());
        a[8..16].copy_from_slice(&block.to_le_bytes());
        a[16..].copy_from_slice(&epoch.to_le_bytes());
        a
    }

    /// Encrypt one page under the current epoch. Returns ciphertext (same
    /// length) and the 16-byte authentication tag; the tag lives in the
    /// integrity store, never on the data page itself.
    pub fn seal_page(
        &self,
        block: u64,
        write_index: u64,
        plain: &[u8],
    ) -> (Vec<u8>, [u8; PAGE_TAG_LEN]) {
        let cipher = Aes256Gcm::new(&self.data_key(self.epoch));
        let mut buf = plain.to_vec();
        let tag = cipher
            .encrypt_in_place_detached(
                &Self::nonce(write_index, block),
                &Self::aad(write_index, block, self.epoch),
                &mut buf,
            )
            .expect("in-place GCM cannot fail");
        (buf, tag.into())
    }

    /// Decrypt and authenticate one page written under `epoch`.
    pub fn open_page(
        &self,
        block: u64,
        write_index: u64,
        epoch: u32,
        ciphertext: &[u8],
        tag: &[u8; PAGE_TAG_LEN],
    ) -> Result<Vec<u8>, AuthFailure> {
        let cipher = Aes256Gcm::new(&self.data_key(epoch));
        let mut buf = ciphertext.to_vec();
        cipher
            .decrypt_in_place_detached(
                &Self::nonce(write_index, block),
                &Self::aad(write_index, block, epoch),
                &mut buf,
                Tag::from_slice(tag),
            )
            .map_err(|_| AuthFailure {
                block,
                epoch,
                write_index,
            })?;
        Ok(buf)
    }

    /// Wire-frame MAC.
    pub fn mac(&self, bytes: &[u8]) -> [u8; 32] {
        hmac256(&self.mac_key, &[bytes])
    }

    pub fn mac_ok(&self, bytes: &[u8], mac: &[u8; 32]) -> bool {
        // not secret-time, but the adversary here is a test harness
        self.mac(bytes) == *mac
    }

    /// Merkle node hash.
    pub fn node_hash(&self, bytes: &[u8]) -> [u8; 32] {
        hmac256(&self.hash_key, &[bytes])
    }
}
