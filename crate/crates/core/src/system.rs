//! Wiring: DMA memory, devices, I/O stack and cache in one place, plus a
//! per-device LBA allocator for laying out arrays.

use std::sync::Arc;

use parking_lot::Mutex;

use crate::array::{ArrayHandle, ArraySpec, Extent};
use crate::cache::{Cache, CacheConfig};
use crate::device::{DeviceOptions, DeviceProfile, SimDevice, Visibility};
use crate::error::{Error, Result};
use crate::fence::FenceMode;
use crate::io::{IoOptions, IoStack};
use crate::memory::{DmaMemory, Region, BLOCK_SIZE};
use crate::poll::PollPolicy;
use crate::scalar::Element;

/// DMA bytes reserved next to the cache for tiles and bounce buffers.
pub const DEFAULT_SCRATCH_BYTES: u64 = 32 << 20;

#[derive(Clone, Debug)]
pub struct SystemBuilder {
    profiles: Vec<DeviceProfile>,
    device: DeviceOptions,
    io: IoOptions,
    cache: CacheConfig,
    scratch_bytes: u64,
    manual: bool,
    mirrors: Vec<Vec<usize>>,
}

impl Default for SystemBuilder {
    fn default() -> Self {
        SystemBuilder {
            profiles: vec![DeviceProfile::optane_p5800x()],
            device: DeviceOptions::default(),
            io: IoOptions::default(),
            cache: CacheConfig {
                line_size: 4096,
                num_slots: (64 << 20) / 4096,
            },
            scratch_bytes: DEFAULT_SCRATCH_BYTES,
            manual: false,
            mirrors: Vec::new(),
        }
    }
}

impl SystemBuilder {
    pub fn devices(mut self, profiles: Vec<DeviceProfile>) -> Self {
        self.profiles = profiles;
        self
    }

    pub fn device_options(mut self, options: DeviceOptions) -> Self {
        self.device = options;
        self
    }

    pub fn capacity_blocks(mut self, blocks: u64) -> Self {
        self.device.capacity_blocks = blocks;
        self
    }

    pub fn visibility(mut self, v: Visibility) -> Self {
        self.device.visibility = v;
        self
    }

    pub fn queues(mut self, per_device: u32, depth: u32) -> Self {
        self.io.queues_per_device = per_device;
        self.io.queue_depth = depth;
        self
    }

    pub fn fence(mut self, mode: FenceMode) -> Self {
        self.io.fence = mode;
        self
    }

    pub fn poll(mut self, policy: PollPolicy) -> Self {
        self.io.poll = policy;
        self.device.poll = policy;
        self
    }

    pub fn cache(mut self, line_size: u64, capacity_bytes: u64) -> Self {
        self.cache = CacheConfig {
            line_size,
            num_slots: (capacity_bytes / line_size.max(1)) as u32,
        };
        self
    }

    pub fn scratch_bytes(mut self, bytes: u64) -> Self {
        self.scratch_bytes = bytes;
        self
    }

    /// Devices only advance through [`SimDevice::service_step`].
    pub fn manual(mut self, manual: bool) -> Self {
        self.manual = manual;
        self
    }

    pub fn mirror(mut self, group: Vec<usize>) -> Self {
        self.mirrors.push(group);
        self
    }

    pub fn build(self) -> Result<System> {
        self.cache.validate()?;
        if self.profiles.is_empty() {
            return Err(Error::config("at least one device is required"));
        }
        let fence_blocks = self.profiles.len() as u64 * BLOCK_SIZE as u64;
        let bytes = self.cache.capacity_bytes() + self.scratch_bytes + fence_blocks + self.cache.line_size;
        let memory = Arc::new(DmaMemory::new(bytes as usize));
        let devices = self
            .profiles
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if self.manual {
                    SimDevice::manual(i, p, memory.clone(), self.device.clone())
                } else {
                    SimDevice::spawn(i, p, memory.clone(), self.device.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut io = IoStack::new(memory.clone(), devices, self.io)?;
        for g in &self.mirrors {
            io.set_mirrors(g)?;
        }
        let io = Arc::new(io);
        let cache = Arc::new(Cache::new(io.clone(), self.cache, self.io.poll)?);
        let scratch = if self.scratch_bytes > 0 {
            Some(memory.alloc(self.scratch_bytes, BLOCK_SIZE as u64)?)
        } else {
            None
        };
        let next_lba = vec![0; io.num_devices()];
        Ok(System {
            io,
            cache,
            scratch,
            next_lba: Mutex::new(next_lba),
        })
    }
}

pub struct System {
    io: Arc<IoStack>,
    cache: Arc<Cache>,
    scratch: Option<Region>,
    next_lba: Mutex<Vec<u64>>,
}

impl System {
    pub fn builder() -> SystemBuilder {
        SystemBuilder::default()
    }

    pub fn io(&self) -> &Arc<IoStack> {
        &self.io
    }

    pub fn cache(&self) -> &Arc<Cache> {
        &self.cache
    }

    pub fn memory(&self) -> &Arc<DmaMemory> {
        self.io.memory()
    }

    pub fn scratch(&self) -> Result<Region> {
        self.scratch
            .ok_or_else(|| Error::config("no scratch memory configured"))
    }

    pub fn num_devices(&self) -> usize {
        self.io.num_devices()
    }

    /// Reserve `blocks` (rounded up to whole lines) on `device`; returns
    /// the starting LBA.
    pub fn reserve(&self, device: u32, blocks: u64) -> Result<Extent> {
        let bpl = u64::from(self.cache.config().blocks_per_line());
        let blocks = blocks.div_ceil(bpl).max(1) * bpl;
        let mut next = self.next_lba.lock();
        let cursor = next
            .get_mut(device as usize)
            .ok_or(Error::OutOfRange {
                what: "device",
                index: u64::from(device),
                limit: self.io.num_devices() as u64,
            })?;
        let capacity = self.io.device(device as usize).capacity_blocks();
        // Skip the first line so fence reads of LBA 0 never alias array data.
        let start = (*cursor).max(bpl);
        if start + blocks > capacity {
            return Err(Error::OutOfRange {
                what: "device blocks",
                index: start + blocks,
                limit: capacity,
            });
        }
        *cursor = start + blocks;
        Ok(Extent {
            device,
            start_lba: start,
            block_count: blocks,
        })
    }

    /// Lay out an array of `length` elements split into equal contiguous
    /// parts over `devices`.
    pub fn layout<T: Element>(&self, length: u64, devices: &[u32]) -> Result<ArraySpec> {
        if devices.is_empty() {
            return Err(Error::config("array needs at least one device"));
        }
        let line = self.cache.line_size();
        let lines = (length * T::SIZE as u64).div_ceil(line).max(1);
        let parts = devices.len() as u64;
        let mut extents = Vec::with_capacity(devices.len());
        for (k, &d) in devices.iter().enumerate() {
            let k = k as u64;
            let share = lines / parts + u64::from(k < lines % parts);
            if share == 0 {
                continue;
            }
            let bytes = share * line;
            extents.push(self.reserve(d, bytes / BLOCK_SIZE as u64)?);
        }
        ArraySpec::new(T::SIZE as u64, length, extents)
    }

    /// Allocate and bind a new array spread over all devices.
    pub fn array<T: Element>(&self, length: u64) -> Result<ArrayHandle<T>> {
        let all: Vec<u32> = (0..self.num_devices() as u32).collect();
        self.array_on(length, &all)
    }

    pub fn array_on<T: Element>(&self, length: u64, devices: &[u32]) -> Result<ArrayHandle<T>> {
        let spec = self.layout::<T>(length, devices)?;
        ArrayHandle::new(spec, self.cache.clone())
    }
}
