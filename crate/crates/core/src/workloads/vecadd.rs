//! out[i] = a[i] + b[i] over storage-backed arrays.
//!
//! Ondemand assigns one warp-group per output line and leaves the output in
//! the write-back cache until a final flush, so write-back cannot overlap
//! compute. Tiling runs five tiles through scratch memory; while tile i is
//! written back, tile i+1 is already being read.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::analytics::ScanMode;
use super::{parallel_for, read_chunked, worker_threads, write_chunked, Meter, Mode};
use crate::array::{ArrayHandle, WARP};
use crate::error::{Error, Result};
use crate::memory::BLOCK_SIZE;
use crate::metrics::RunMetrics;
use crate::scalar::Element;
use crate::system::System;

pub const TILES: u64 = 5;

pub struct VecAddArrays<T: Element> {
    pub a: ArrayHandle<T>,
    pub b: ArrayHandle<T>,
    pub out: ArrayHandle<T>,
}

impl<T: Element> VecAddArrays<T> {
    /// Allocate the three arrays and fill the inputs.
    pub fn load(sys: &System, a: &[T], b: &[T]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::config("input arrays differ in length"));
        }
        let n = a.len() as u64;
        let arrays = VecAddArrays {
            a: sys.array::<T>(n)?,
            b: sys.array::<T>(n)?,
            out: sys.array::<T>(n)?,
        };
        arrays.a.store_direct(0, a)?;
        arrays.b.store_direct(0, b)?;
        Ok(arrays)
    }
}

/// Seeded inputs small enough that every sum is exact.
pub fn inputs(n: u64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || f64::from(rng.gen_range(0u32..1 << 20)) * 0.5;
    let a = (0..n).map(|_| draw()).collect();
    let b = (0..n).map(|_| draw()).collect();
    (a, b)
}

pub fn run<T: Element>(
    sys: &System,
    arrays: &VecAddArrays<T>,
    scan: ScanMode,
    mode: Mode,
    threads: u64,
    seed: u64,
) -> Result<RunMetrics> {
    let n = arrays.a.len();
    let mut meter = Meter::start(sys, mode);
    let modeled = match scan {
        ScanMode::Ondemand => {
            ondemand(sys, arrays, mode, threads, &mut meter)?;
            None
        }
        ScanMode::Tiling => Some(tiling(sys, arrays, &mut meter)?),
    };
    let name = match scan {
        ScanMode::Ondemand => "vecadd-ondemand",
        ScanMode::Tiling => "vecadd-tiling",
    };
    let used = 3 * n * T::SIZE as u64;
    let mut m = meter.finish(name, threads, used, modeled.filter(|_| mode == Mode::Model));
    m.seed = seed;
    Ok(m)
}

fn ondemand<T: Element>(
    sys: &System,
    arrays: &VecAddArrays<T>,
    mode: Mode,
    threads: u64,
    meter: &mut Meter<'_>,
) -> Result<()> {
    let n = arrays.a.len();
    let per_line = sys.cache().line_size() / T::SIZE as u64;
    let lines = n.div_ceil(per_line);
    parallel_for(worker_threads(mode, threads), lines, 8, |range| {
        let mut idx = [0u64; WARP];
        let mut a = [T::zero(); WARP];
        let mut b = [T::zero(); WARP];
        for line in range {
            let end = ((line + 1) * per_line).min(n);
            let mut at = line * per_line;
            while at < end {
                let k = ((end - at) as usize).min(WARP);
                for (j, slot) in idx[..k].iter_mut().enumerate() {
                    *slot = at + j as u64;
                }
                arrays.a.read_group_into(&idx[..k], &mut a[..k])?;
                arrays.b.read_group_into(&idx[..k], &mut b[..k])?;
                for j in 0..k {
                    a[j] = a[j] + b[j];
                }
                arrays.out.write_group(&idx[..k], &a[..k])?;
                at += k as u64;
            }
        }
        Ok(())
    })?;
    meter.phase();
    arrays.out.flush()?;
    meter.phase();
    Ok(())
}

/// Returns the modeled time with write-back of tile i overlapping the
/// reads of tile i+1.
fn tiling<T: Element>(sys: &System, arrays: &VecAddArrays<T>, meter: &mut Meter<'_>) -> Result<f64> {
    let n = arrays.a.len();
    let line = sys.cache().line_size();
    let per_line = line / T::SIZE as u64;
    let tile = n.div_ceil(TILES).div_ceil(per_line) * per_line;
    let tile_bytes = tile * T::SIZE as u64;
    let scratch = sys.scratch()?;
    if scratch.len < 3 * tile_bytes {
        return Err(Error::config(format!(
            "tiling needs {} bytes of scratch, have {}",
            3 * tile_bytes,
            scratch.len
        )));
    }
    let per_command = line / BLOCK_SIZE as u64;
    let mem = sys.memory();
    let (a_at, b_at, out_at) = (scratch.at(0), scratch.at(tile_bytes), scratch.at(2 * tile_bytes));
    let mut reads = Vec::new();
    let mut writes = Vec::new();
    let model = meter.model();
    let mut start = 0;
    while start < n {
        let count = tile.min(n - start);
        let base = start * T::SIZE as u64;
        for (arr, at) in [(&arrays.a, a_at), (&arrays.b, b_at)] {
            for r in arr.block_ranges(start, count)? {
                read_chunked(sys, r.device, r.lba, r.blocks, at + r.array_offset - base, per_command)?;
            }
        }
        meter.phase();
        reads.push(meter.phases().last().map_or(0.0, |p| model.phase_seconds(p, usize::MAX)));

        let bytes = (count as usize) * T::SIZE;
        let mut av = vec![0u8; bytes];
        let mut bv = vec![0u8; bytes];
        mem.read(a_at, &mut av)?;
        mem.read(b_at, &mut bv)?;
        for (x, y) in av.chunks_exact_mut(T::SIZE).zip(bv.chunks_exact(T::SIZE)) {
            (T::read_le(x) + T::read_le(y)).write_le(x);
        }
        mem.write(out_at, &av)?;
        for r in arrays.out.block_ranges(start, count)? {
            if (r.array_offset + r.blocks * BLOCK_SIZE as u64) > base + bytes as u64 {
                // The final partial block keeps whatever follows the array.
                let tail = r.array_offset + r.blocks * BLOCK_SIZE as u64 - (base + bytes as u64);
                mem.fill(out_at + bytes as u64, tail as usize, 0)?;
            }
            write_chunked(sys, r.device, r.lba, r.blocks, out_at + r.array_offset - base, per_command)?;
        }
        meter.phase();
        writes.push(meter.phases().last().map_or(0.0, |p| model.phase_seconds(p, usize::MAX)));
        start += count;
    }
    Ok(overlapped(&reads, &writes))
}

/// r1 + sum over i of max(r_{i+1}, w_i) + w_last.
pub fn overlapped(reads: &[f64], writes: &[f64]) -> f64 {
    let Some(first) = reads.first() else {
        return 0.0;
    };
    let mut t = *first;
    for (i, w) in writes.iter().enumerate() {
        t += match reads.get(i + 1) {
            Some(r) => r.max(*w),
            None => *w,
        };
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_credit() {
        assert_eq!(overlapped(&[1.0, 1.0, 1.0], &[2.0, 0.5, 3.0]), 1.0 + 2.0 + 1.0 + 3.0);
        assert_eq!(overlapped(&[], &[]), 0.0);
    }

    #[test]
    fn small_vectors_add_up_in_both_modes() {
        for scan in [ScanMode::Ondemand, ScanMode::Tiling] {
            let sys = System::builder()
                .devices(vec![crate::device::DeviceProfile::samsung_pm1735(); 2])
                .capacity_blocks(1 << 14)
                .cache(1024, 16 << 10)
                .scratch_bytes(1 << 20)
                .build()
                .unwrap();
            let (a, b) = inputs(1024 + 37, 5);
            let arrays = VecAddArrays::load(&sys, &a, &b).unwrap();
            run(&sys, &arrays, scan, Mode::Stress, 4, 5).unwrap();
            sys.cache().flush_all().unwrap();
            let out = arrays.out.load_direct(0, a.len() as u64).unwrap();
            let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            assert_eq!(out, want, "{scan:?}");
        }
    }
}
