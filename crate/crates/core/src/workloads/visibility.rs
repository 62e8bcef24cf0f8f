//! Torn-read detector for relaxed completion ordering.
//!
//! Blocks are pre-stamped with a per-block pattern. Each round trip poisons
//! the thread's buffer, reads one block through the I/O stack (and its
//! fence, if configured) and checks the stamp. A mismatch means the
//! completion was observed before the data landed.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Barrier;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::BLOCK_SIZE;
use crate::system::System;

const POISON: u8 = 0xa5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityReport {
    pub round_trips: u64,
    pub torn: u64,
    pub fenced: u64,
    pub extra_reads: u64,
}

impl VisibilityReport {
    /// Extra reads per fenced completion.
    pub fn overhead_ratio(&self) -> f64 {
        if self.fenced == 0 {
            0.0
        } else {
            self.extra_reads as f64 / self.fenced as f64
        }
    }
}

fn stamp(block: u64) -> [u8; BLOCK_SIZE] {
    let mut out = [0u8; BLOCK_SIZE];
    for (j, w) in out.chunks_exact_mut(8).enumerate() {
        let v = block.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        w.copy_from_slice(&v.to_le_bytes());
    }
    out
}

/// `threads` workers each perform `rounds` round trips against `blocks`
/// stamped blocks on device 0, starting every round together.
pub fn run(sys: &System, threads: usize, rounds: u64, blocks: u64, seed: u64) -> Result<VisibilityReport> {
    let scratch = sys.scratch()?;
    if scratch.len < (threads * BLOCK_SIZE) as u64 {
        return Err(Error::config("scratch memory too small for one block per thread"));
    }
    // Stamped blocks live after the line reserved for fence reads.
    let extent = sys.reserve(0, blocks)?;
    let store = sys.io().device(0).store();
    for b in 0..blocks {
        store.write_blocks(extent.start_lba + b, &stamp(extent.start_lba + b))?;
    }
    let before = sys.io().stats();
    let torn = AtomicU64::new(0);
    let barrier = Barrier::new(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (torn, barrier) = (&torn, &barrier);
                s.spawn(move || -> Result<()> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64) << 32);
                    let buf = scratch.at((t * BLOCK_SIZE) as u64);
                    let mut got = [0u8; BLOCK_SIZE];
                    for _ in 0..rounds {
                        barrier.wait();
                        let lba = extent.start_lba + rng.gen_range(0..blocks);
                        sys.memory().fill(buf, BLOCK_SIZE, POISON)?;
                        sys.io().read(0, lba, 1, buf)?;
                        sys.memory().read(buf, &mut got)?;
                        if got != stamp(lba) {
                            torn.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("visibility worker panicked"))
            .collect::<Result<Vec<()>>>()
    })?;
    let after = sys.io().stats();
    Ok(VisibilityReport {
        round_trips: rounds * threads as u64,
        torn: torn.into_inner(),
        fenced: after.fenced - before.fenced,
        extra_reads: after.extra_fence_reads - before.extra_fence_reads,
    })
}
