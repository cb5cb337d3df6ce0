//! Signed wire frames. Little-endian, length-prefixed, HMAC-SHA256 over
//! every preceding byte. Nothing past the MAC check is interpreted: decode
//! locates the MAC from the structural length fields, verifies it, and only
//! then parses field semantics.

use crate::model::SyncFlags;
use crate::storage::CipherContext;

pub const MAC_LEN: usize = 32;
/// type(1) ballot(8) write_index(8) block(8) flags(1) payload_len(4)
pub const HEADER_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    WriteRepl = 1,
    Ack = 2,
    MatchA = 3,
    MatchB = 4,
    P1a = 5,
    P1b = 6,
    Reconfig = 7,
    HashReq = 8,
    HashResp = 9,
    PageReq = 10,
    PageResp = 11,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<MsgType> {
        use MsgType::*;
        Some(match v {
            1 => WriteRepl,
            2 => Ack,
            3 => MatchA,
            4 => MatchB,
            5 => P1a,
            6 => P1b,
            7 => Reconfig,
            8 => HashReq,
            9 => HashResp,
            10 => PageReq,
            11 => PageResp,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("frame shorter than header+mac ({got} bytes)")]
    Truncated { got: usize },
    #[error("frame length {got} does not match header-declared {want}")]
    LengthMismatch { want: usize, got: usize },
    #[error("mac verification failed")]
    BadMac,
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("flags byte {0:#04x} has bits outside FUA|PREFLUSH")]
    BadFlags(u8),
}

/// One protocol message. `flags` carries the replicated write's sync bits
/// (meaningful for WriteRepl only, zero elsewhere).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub mtype: MsgType,
    pub ballot: u64,
    pub write_index: u64,
    pub block: u64,
    pub flags: SyncFlags,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn encode(&self, ctx: &CipherContext) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + MAC_LEN);
        out.push(self.mtype as u8);
        out.extend_from_slice(&self.ballot.to_le_bytes());
        out.extend_from_slice(&self.write_index.to_le_bytes());
        out.extend_from_slice(&self.block.to_le_bytes());
        out.push(self.flags.bits());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let mac = ctx.mac(&out);
        out.extend_from_slice(&mac);
        out
    }

    pub fn decode(bytes: &[u8], ctx: &CipherContext) -> Result<WireMessage, WireError> {
        if bytes.len() < HEADER_LEN + MAC_LEN {
            return Err(WireError::Truncated { got: bytes.len() });
        }
        let payload_len =
            u32::from_le_bytes(bytes[26..30].try_into().unwrap()) as usize;
        let want = HEADER_LEN + payload_len + MAC_LEN;
        if bytes.len() != want {
            return Err(WireError::LengthMismatch {
                want,
                got: bytes.len(),
            });
        }
        let (signed, mac) = bytes.split_at(HEADER_LEN + payload_len);
        if !ctx.mac_ok(signed, mac.try_into().unwrap()) {
            return Err(WireError::BadMac);
        }
        let mtype = MsgType::from_u8(signed[0]).ok_or(WireError::BadType(signed[0]))?;
        let flags = SyncFlags::from_bits(signed[25]).ok_or(WireError::BadFlags(signed[25]))?;
        Ok(WireMessage {
            mtype,
            ballot: u64::from_le_bytes(signed[1..9].try_into().unwrap()),
            write_index: u64::from_le_bytes(signed[9..17].try_into().unwrap()),
            block: u64::from_le_bytes(signed[17..25].try_into().unwrap()),
            flags,
            payload: signed[30..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx() -> CipherContext {
        CipherContext::new([7u8; 32], 0)
    }

    fn sample(mtype: MsgType) -> WireMessage {
        WireMessage {
            mtype,
            ballot: 3,
            write_index: 414,
            block: 9,
            flags: SyncFlags::BOTH,
            payload: b"page bytes".to_vec(),
        }
    }

    #[test]
    fn round_trip_every_type() {
        let c = ctx();
        for t in 1..=11u8 {
            let m = sample(MsgType::from_u8(t).unwrap());
            let bytes = m.encode(&c);
            assert_eq!(WireMessage::decode(&bytes, &c).unwrap(), m);
        }
    }

    #[test]
    fn empty_payload_round_trips() {
        let c = ctx();
        let m = WireMessage {
            payload: Vec::new(),
            ..sample(MsgType::Ack)
        };
        let bytes = m.encode(&c);
        assert_eq!(bytes.len(), HEADER_LEN + MAC_LEN);
        assert_eq!(WireMessage::decode(&bytes, &c).unwrap(), m);
    }

    #[test]
    fn any_single_byte_flip_is_rejected() {
        let c = ctx();
        let bytes = sample(MsgType::WriteRepl).encode(&c);
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(
                WireMessage::decode(&bad, &c).is_err(),
                "flip at byte {i} must not decode"
            );
        }
    }

    #[test]
    fn wrong_key_is_rejected() {
        let bytes = sample(MsgType::Ack).encode(&ctx());
        let other = CipherContext::new([8u8; 32], 0);
        assert_eq!(
            WireMessage::decode(&bytes, &other),
            Err(WireError::BadMac)
        );
    }

    #[test]
    fn type_and_flags_are_checked_after_the_mac() {
        let c = ctx();
        // hand-build a frame with a bogus type byte but a valid mac
        let mut raw = vec![0u8; HEADER_LEN];
        raw[0] = 12;
        raw[26..30].copy_from_slice(&0u32.to_le_bytes());
        let mac = c.mac(&raw);
        raw.extend_from_slice(&mac);
        assert_eq!(WireMessage::decode(&raw, &c), Err(WireError::BadType(12)));

        let mut raw = vec![0u8; HEADER_LEN];
        raw[0] = 2;
        raw[25] = 0x10;
        raw[26..30].copy_from_slice(&0u32.to_le_bytes());
        let mac = c.mac(&raw);
        raw.extend_from_slice(&mac);
        assert_eq!(
            WireMessage::decode(&raw, &c),
            Err(WireError::BadFlags(0x10))
        );
    }

    #[test]
    fn random_bytes_never_decode() {
        let c = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..2_000 {
            let len = rng.gen_range(0..256);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            assert!(WireMessage::decode(&bytes, &c).is_err());
        }
    }
}
