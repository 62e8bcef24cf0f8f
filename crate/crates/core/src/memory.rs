//! Word-atomic byte storage used for device-visible memory and SSD media.
//!
//! Both regions are arrays of `AtomicU64`; byte accesses that cover a whole
//! word are plain stores, partial words are merged with a CAS loop. Races on
//! the same bytes are the caller's business, but no access is ever UB.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const BLOCK_SIZE: usize = 512;

fn read_words(words: &[AtomicU64], offset: usize, out: &mut [u8]) {
    let mut pos = 0;
    while pos < out.len() {
        let byte = offset + pos;
        let w = byte / 8;
        let in_word = byte % 8;
        let n = (8 - in_word).min(out.len() - pos);
        let bytes = words[w].load(Ordering::Acquire).to_le_bytes();
        out[pos..pos + n].copy_from_slice(&bytes[in_word..in_word + n]);
        pos += n;
    }
}

fn write_words(words: &[AtomicU64], offset: usize, src: &[u8]) {
    let mut pos = 0;
    while pos < src.len() {
        let byte = offset + pos;
        let w = byte / 8;
        let in_word = byte % 8;
        let n = (8 - in_word).min(src.len() - pos);
        if n == 8 {
            let v = u64::from_le_bytes(src[pos..pos + 8].try_into().unwrap());
            words[w].store(v, Ordering::Release);
        } else {
            let _ = words[w].fetch_update(Ordering::AcqRel, Ordering::Acquire, |old| {
                let mut bytes = old.to_le_bytes();
                bytes[in_word..in_word + n].copy_from_slice(&src[pos..pos + n]);
                Some(u64::from_le_bytes(bytes))
            });
        }
        pos += n;
    }
}

fn zeroed_words(n: usize) -> Box<[AtomicU64]> {
    (0..n).map(|_| AtomicU64::new(0)).collect()
}

/// A span of [`DmaMemory`] handed out by [`DmaMemory::alloc`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub offset: u64,
    pub len: u64,
}

impl Region {
    pub fn at(&self, delta: u64) -> u64 {
        debug_assert!(delta <= self.len);
        self.offset + delta
    }
}

/// Memory the simulated devices DMA into, shared by the cache and any
/// scratch buffers. Allocation is a bump pointer; regions are never freed.
pub struct DmaMemory {
    words: Box<[AtomicU64]>,
    next: AtomicU64,
}

impl DmaMemory {
    pub fn new(bytes: usize) -> Self {
        DmaMemory {
            words: zeroed_words(bytes.div_ceil(8)),
            next: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len() * 8
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Carve out `len` bytes aligned to `align` (a power of two, at least 8).
    pub fn alloc(&self, len: u64, align: u64) -> Result<Region> {
        let align = align.max(8);
        debug_assert!(align.is_power_of_two());
        let mut cur = self.next.load(Ordering::Relaxed);
        loop {
            let start = cur.next_multiple_of(align);
            let end = start + len;
            if end > self.len() as u64 {
                return Err(Error::config(format!(
                    "device-visible memory exhausted: need {len} bytes at {start}, have {}",
                    self.len()
                )));
            }
            match self
                .next
                .compare_exchange_weak(cur, end, Ordering::AcqRel, Ordering::Relaxed)
            {
                Ok(_) => return Ok(Region { offset: start, len }),
                Err(seen) => cur = seen,
            }
        }
    }

    fn check(&self, offset: u64, len: usize) -> Result<()> {
        let end = offset + len as u64;
        if end > self.len() as u64 {
            return Err(Error::OutOfRange {
                what: "device-visible memory",
                index: end,
                limit: self.len() as u64,
            });
        }
        Ok(())
    }

    pub fn read(&self, offset: u64, out: &mut [u8]) -> Result<()> {
        self.check(offset, out.len())?;
        read_words(&self.words, offset as usize, out);
        Ok(())
    }

    pub fn write(&self, offset: u64, src: &[u8]) -> Result<()> {
        self.check(offset, src.len())?;
        write_words(&self.words, offset as usize, src);
        Ok(())
    }

    pub fn fill(&self, offset: u64, len: usize, byte: u8) -> Result<()> {
        self.write(offset, &vec![byte; len])
    }
}

const CHUNK_BYTES: usize = 4 << 20;
const CHUNK_WORDS: usize = CHUNK_BYTES / 8;

/// Block-addressed media of one simulated SSD. Chunks materialize on first
/// write, so a large logical capacity costs nothing until it is used.
pub struct BlockStore {
    capacity_blocks: u64,
    chunks: Box<[OnceLock<Box<[AtomicU64]>>]>,
}

impl BlockStore {
    pub fn new(capacity_blocks: u64) -> Self {
        let bytes = capacity_blocks as usize * BLOCK_SIZE;
        let n = bytes.div_ceil(CHUNK_BYTES);
        BlockStore {
            capacity_blocks,
            chunks: (0..n).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_blocks
    }

    pub fn contains(&self, lba: u64, blocks: u64) -> bool {
        blocks >= 1 && lba.checked_add(blocks).is_some_and(|e| e <= self.capacity_blocks)
    }

    fn check(&self, lba: u64, blocks: u64) -> Result<()> {
        if !self.contains(lba, blocks) {
            return Err(Error::OutOfRange {
                what: "block range",
                index: lba.saturating_add(blocks),
                limit: self.capacity_blocks,
            });
        }
        Ok(())
    }

    /// Read whole blocks starting at `lba`; `out.len()` must be a block multiple.
    pub fn read_blocks(&self, lba: u64, out: &mut [u8]) -> Result<()> {
        debug_assert_eq!(out.len() % BLOCK_SIZE, 0);
        self.check(lba, (out.len() / BLOCK_SIZE) as u64)?;
        let mut byte = lba as usize * BLOCK_SIZE;
        let mut pos = 0;
        while pos < out.len() {
            let chunk = byte / CHUNK_BYTES;
            let in_chunk = byte % CHUNK_BYTES;
            let n = (CHUNK_BYTES - in_chunk).min(out.len() - pos);
            match self.chunks[chunk].get() {
                Some(words) => read_words(words, in_chunk, &mut out[pos..pos + n]),
                None => out[pos..pos + n].fill(0),
            }
            pos += n;
            byte += n;
        }
        Ok(())
    }

    pub fn write_blocks(&self, lba: u64, src: &[u8]) -> Result<()> {
        debug_assert_eq!(src.len() % BLOCK_SIZE, 0);
        self.check(lba, (src.len() / BLOCK_SIZE) as u64)?;
        let mut byte = lba as usize * BLOCK_SIZE;
        let mut pos = 0;
        while pos < src.len() {
            let chunk = byte / CHUNK_BYTES;
            let in_chunk = byte % CHUNK_BYTES;
            let n = (CHUNK_BYTES - in_chunk).min(src.len() - pos);
            let words = self.chunks[chunk].get_or_init(|| zeroed_words(CHUNK_WORDS));
            write_words(words, in_chunk, &src[pos..pos + n]);
            pos += n;
            byte += n;
        }
        Ok(())
    }

    /// Copy out `blocks` blocks; convenience for tests and audits.
    pub fn snapshot(&self, lba: u64, blocks: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; blocks as usize * BLOCK_SIZE];
        self.read_blocks(lba, &mut out)?;
        Ok(out)
    }
}
