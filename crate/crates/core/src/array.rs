//! Storage-backed arrays: element index to cache line mapping and
//! warp-group coalesced access.

use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::{Cache, LineId};
use crate::error::{Error, Result};
use crate::memory::BLOCK_SIZE;
use crate::scalar::Element;

/// Logical threads whose accesses are coalesced together.
pub const WARP: usize = 32;

/// A contiguous run of blocks on one device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    pub device: u32,
    pub start_lba: u64,
    pub block_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub element_size: u64,
    pub length: u64,
    pub extents: Vec<Extent>,
}

impl ArraySpec {
    pub fn new(element_size: u64, length: u64, extents: Vec<Extent>) -> Result<Self> {
        let spec = ArraySpec {
            element_size,
            length,
            extents,
        };
        let bytes: u64 = spec.extents.iter().map(|e| e.block_count * BLOCK_SIZE as u64).sum();
        if element_size == 0 || bytes < element_size * length {
            return Err(Error::config(format!(
                "extents hold {bytes} bytes, array needs {}",
                element_size * length
            )));
        }
        Ok(spec)
    }

    pub fn bytes(&self) -> u64 {
        self.element_size * self.length
    }
}

/// One device-contiguous piece of an element range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRange {
    pub device: u32,
    pub lba: u64,
    pub blocks: u64,
    /// Byte position of the first block relative to the array start.
    pub array_offset: u64,
}

/// An [`ArraySpec`] bound to a cache.
pub struct ArrayHandle<T: Element> {
    spec: ArraySpec,
    cache: Arc<Cache>,
    /// First array line of each extent, plus the total at the end.
    line_starts: Vec<u64>,
    probes: AtomicU64,
    _elem: PhantomData<T>,
}

impl<T: Element> ArrayHandle<T> {
    pub fn new(spec: ArraySpec, cache: Arc<Cache>) -> Result<Self> {
        let line = cache.line_size();
        if spec.element_size != T::SIZE as u64 {
            return Err(Error::config(format!(
                "element size {} does not match type width {}",
                spec.element_size,
                T::SIZE
            )));
        }
        if !line.is_multiple_of(spec.element_size) {
            return Err(Error::config("element size must divide the line size"));
        }
        let bpl = line / BLOCK_SIZE as u64;
        let mut line_starts = Vec::with_capacity(spec.extents.len() + 1);
        let mut total = 0;
        for e in &spec.extents {
            if e.start_lba % bpl != 0 || e.block_count % bpl != 0 {
                return Err(Error::config(format!(
                    "extent {e:?} is not aligned to {line}-byte lines"
                )));
            }
            if e.device as usize >= cache.io().num_devices() {
                return Err(Error::OutOfRange {
                    what: "extent device",
                    index: u64::from(e.device),
                    limit: cache.io().num_devices() as u64,
                });
            }
            line_starts.push(total);
            total += e.block_count / bpl;
        }
        line_starts.push(total);
        Ok(ArrayHandle {
            spec,
            cache,
            line_starts,
            probes: AtomicU64::new(0),
            _elem: PhantomData,
        })
    }

    pub fn spec(&self) -> &ArraySpec {
        &self.spec
    }

    pub fn len(&self) -> u64 {
        self.spec.length
    }

    pub fn is_empty(&self) -> bool {
        self.spec.length == 0
    }

    pub fn cache(&self) -> &Arc<Cache> {
        &self.cache
    }

    /// Cache probes issued through this handle.
    pub fn probes(&self) -> u64 {
        self.probes.load(Ordering::Relaxed)
    }

    fn check(&self, i: u64) -> Result<()> {
        if i >= self.spec.length {
            return Err(Error::OutOfRange {
                what: "array index",
                index: i,
                limit: self.spec.length,
            });
        }
        Ok(())
    }

    fn array_line(&self, array_line: u64) -> LineId {
        let e = self.line_starts.partition_point(|&s| s <= array_line) - 1;
        let ext = &self.spec.extents[e];
        let bpl = self.cache.line_size() / BLOCK_SIZE as u64;
        LineId::new(ext.device, ext.start_lba / bpl + (array_line - self.line_starts[e]))
    }

    /// The cache line holding element `i` and the byte offset inside it.
    pub fn index_to_line(&self, i: u64) -> Result<(LineId, u64)> {
        self.check(i)?;
        let byte = i * self.spec.element_size;
        let line = self.cache.line_size();
        Ok((self.array_line(byte / line), byte % line))
    }

    pub fn get(&self, i: u64) -> Result<T> {
        let mut out = [T::zero()];
        self.read_group_into(&[i], &mut out)?;
        Ok(out[0])
    }

    pub fn set(&self, i: u64, value: T) -> Result<()> {
        self.write_group(&[i], &[value])
    }

    pub fn read_group(&self, indices: &[u64]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); indices.len()];
        self.read_group_into(indices, &mut out)?;
        Ok(out)
    }

    /// Gather `indices`; each run of [`WARP`] indices probes every distinct
    /// line it touches exactly once.
    pub fn read_group_into(&self, indices: &[u64], out: &mut [T]) -> Result<()> {
        assert_eq!(indices.len(), out.len());
        for (idx, out) in indices.chunks(WARP).zip(out.chunks_mut(WARP)) {
            self.for_each_line(idx, |r, pos, offset| {
                out[pos] = r.read_element(offset)?;
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Scatter `values` to `indices`, coalesced as in [`Self::read_group_into`].
    pub fn write_group(&self, indices: &[u64], values: &[T]) -> Result<()> {
        assert_eq!(indices.len(), values.len());
        for (idx, vals) in indices.chunks(WARP).zip(values.chunks(WARP)) {
            self.for_each_line(idx, |r, pos, offset| r.write_element(offset, vals[pos]))?;
        }
        Ok(())
    }

    fn for_each_line(
        &self,
        group: &[u64],
        mut f: impl FnMut(&crate::cache::LineRef<'_>, usize, u64) -> Result<()>,
    ) -> Result<()> {
        let mut mapped = [(LineId::new(0, 0), 0u64); WARP];
        for (m, &i) in mapped.iter_mut().zip(group) {
            *m = self.index_to_line(i)?;
        }
        let mapped = &mapped[..group.len()];
        let mut done = 0u64;
        for first in 0..group.len() {
            if done & (1 << first) != 0 {
                continue;
            }
            let line = mapped[first].0;
            self.probes.fetch_add(1, Ordering::Relaxed);
            let r = self.cache.probe(line)?;
            for (pos, &(l, offset)) in mapped.iter().enumerate().skip(first) {
                if l == line {
                    done |= 1 << pos;
                    f(&r, pos, offset)?;
                }
            }
            r.release()?;
        }
        Ok(())
    }

    /// Device pieces covering elements `[start, start + count)`, rounded
    /// out to whole blocks, in array order.
    pub fn block_ranges(&self, start: u64, count: u64) -> Result<Vec<BlockRange>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        self.check(start + count - 1)?;
        let block = BLOCK_SIZE as u64;
        let mut byte = start * self.spec.element_size / block * block;
        let end = ((start + count) * self.spec.element_size).div_ceil(block) * block;
        let mut out = Vec::new();
        let mut ext_start = 0u64;
        for e in &self.spec.extents {
            let ext_end = ext_start + e.block_count * block;
            if byte < ext_end && byte < end {
                let stop = end.min(ext_end);
                out.push(BlockRange {
                    device: e.device,
                    lba: e.start_lba + (byte - ext_start) / block,
                    blocks: (stop - byte) / block,
                    array_offset: byte,
                });
                byte = stop;
            }
            ext_start = ext_end;
        }
        Ok(out)
    }

    /// Write elements straight to the backing store of every mirror,
    /// bypassing queues and cache. For loading input data.
    pub fn store_direct(&self, start: u64, values: &[T]) -> Result<()> {
        let es = self.spec.element_size;
        let block = BLOCK_SIZE as u64;
        for r in self.block_ranges(start, values.len() as u64)? {
            let mut buf = vec![0u8; (r.blocks * block) as usize];
            self.cache
                .io()
                .device(r.device as usize)
                .store()
                .read_blocks(r.lba, &mut buf)?;
            let first = r.array_offset / es;
            let last = (r.array_offset + r.blocks * block) / es;
            for i in first.max(start)..last.min(start + values.len() as u64) {
                let at = (i * es - r.array_offset) as usize;
                values[(i - start) as usize].write_le(&mut buf[at..]);
            }
            for d in self.cache.io().mirrors(r.device as usize) {
                self.cache.io().device(*d).store().write_blocks(r.lba, &buf)?;
            }
        }
        Ok(())
    }

    /// Read elements straight from the backing store of the primary copy.
    pub fn load_direct(&self, start: u64, count: u64) -> Result<Vec<T>> {
        let es = self.spec.element_size;
        let block = BLOCK_SIZE as u64;
        let mut out = Vec::with_capacity(count as usize);
        for r in self.block_ranges(start, count)? {
            let bytes = self
                .cache
                .io()
                .device(r.device as usize)
                .store()
                .snapshot(r.lba, r.blocks)?;
            let first = r.array_offset / es;
            let last = (r.array_offset + r.blocks * block) / es;
            for i in first.max(start)..last.min(start + count) {
                let at = (i * es - r.array_offset) as usize;
                out.push(T::read_le(&bytes[at..]));
            }
        }
        Ok(out)
    }

    /// Write back this array's dirty lines.
    pub fn flush(&self) -> Result<u64> {
        let mut written = 0;
        for l in 0..self.line_starts[self.line_starts.len() - 1] {
            if self.cache.flush_line(self.array_line(l))? {
                written += 1;
            }
        }
        Ok(written)
    }
}
