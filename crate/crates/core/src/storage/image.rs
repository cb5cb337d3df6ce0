//! On-disk image format: 24-byte little-endian header, application pages,
//! then the metadata region.

use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RSHD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskImage {
    pub block_size: u32,
    pub app_blocks: u64,
    pub l: u32,
    pub app: Vec<Vec<u8>>,
    pub meta: Vec<Vec<u8>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("not a disk image (bad magic)")]
    BadMagic,
    #[error("unsupported image version {0}")]
    BadVersion(u32),
    #[error("image truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DiskImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            24 + (self.app.len() + self.meta.len()) * self.block_size as usize,
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.block_size.to_le_bytes());
        out.extend_from_slice(&self.app_blocks.to_le_bytes());
        out.extend_from_slice(&self.l.to_le_bytes());
        for page in self.app.iter().chain(self.meta.iter()) {
            out.extend_from_slice(page);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DiskImage, ImageError> {
        if bytes.len() < 24 {
            return Err(ImageError::Truncated {
                expected: 24,
                got: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(ImageError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ImageError::BadVersion(version));
        }
        let block_size = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let app_blocks = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let l = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let meta_count = 1 + super::integrity::meta_pages(app_blocks, l);
        let expected = 24 + (app_blocks + meta_count) as usize * block_size as usize;
        if bytes.len() != expected {
            return Err(ImageError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        let bs = block_size as usize;
        let mut off = 24;
        let mut take = |n: usize| -> Vec<Vec<u8>> {
            (0..n)
                .map(|_| {
                    let page = bytes[off..off + bs].to_vec();
                    off += bs;
                    page
                })
                .collect()
        };
        Ok(DiskImage {
            block_size,
            app_blocks,
            l,
            app: take(app_blocks as usize),
            meta: take(meta_count as usize),
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<DiskImage, ImageError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        DiskImage::from_bytes(&bytes)
    }
}
