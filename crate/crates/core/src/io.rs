//! Client-side I/O stack: every device with its queue pairs, round-robin
//! queue selection, optional mirroring and the visibility fence.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::device::{DeviceCounters, SimDevice};
use crate::error::{Error, Result};
use crate::fence::{FenceMode, FenceState};
use crate::memory::{DmaMemory, BLOCK_SIZE};
use crate::poll::PollPolicy;
use crate::queue::{CompletionEntry, IoCommand, QueuePair, Status};

#[derive(Clone, Copy, Debug)]
pub struct IoOptions {
    pub queues_per_device: u32,
    pub queue_depth: u32,
    pub fence: FenceMode,
    pub poll: PollPolicy,
}

impl Default for IoOptions {
    fn default() -> Self {
        IoOptions {
            queues_per_device: 1,
            queue_depth: 1024,
            fence: FenceMode::Off,
            poll: PollPolicy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IoStats {
    pub device: DeviceCounters,
    pub doorbell_rings: u64,
    pub doorbell_regressions: u64,
    pub slot_violations: u64,
    pub fenced: u64,
    pub extra_fence_reads: u64,
}

impl IoStats {
    pub fn io_commands(&self) -> u64 {
        self.device.commands()
    }

    pub fn bytes_transferred(&self) -> u64 {
        self.device.bytes_transferred()
    }
}

pub struct IoStack {
    memory: Arc<DmaMemory>,
    devices: Vec<SimDevice>,
    queues: Vec<Vec<Arc<QueuePair>>>,
    next_queue: Vec<AtomicUsize>,
    fences: Vec<FenceState>,
    fence_mode: FenceMode,
    mirrors: Vec<Vec<usize>>,
    next_mirror: AtomicUsize,
}

impl IoStack {
    pub fn new(memory: Arc<DmaMemory>, devices: Vec<SimDevice>, options: IoOptions) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::config("at least one device is required"));
        }
        if options.queues_per_device == 0 {
            return Err(Error::config("at least one queue pair per device is required"));
        }
        let mut queues = Vec::with_capacity(devices.len());
        let mut fences = Vec::with_capacity(devices.len());
        for (i, dev) in devices.iter().enumerate() {
            let qps = (0..options.queues_per_device)
                .map(|_| dev.attach_queue_pair(options.queue_depth))
                .collect::<Result<Vec<_>>>()?;
            queues.push(qps);
            let scratch = memory.alloc(BLOCK_SIZE as u64, BLOCK_SIZE as u64)?;
            fences.push(FenceState::new(i, scratch.offset, options.poll));
        }
        Ok(IoStack {
            next_queue: (0..devices.len()).map(|_| AtomicUsize::new(0)).collect(),
            mirrors: (0..devices.len()).map(|d| vec![d]).collect(),
            next_mirror: AtomicUsize::new(0),
            fence_mode: options.fence,
            memory,
            devices,
            queues,
            fences,
        })
    }

    pub fn memory(&self) -> &Arc<DmaMemory> {
        &self.memory
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn device(&self, i: usize) -> &SimDevice {
        &self.devices[i]
    }

    pub fn devices(&self) -> &[SimDevice] {
        &self.devices
    }

    pub fn queues(&self, device: usize) -> &[Arc<QueuePair>] {
        &self.queues[device]
    }

    pub fn fence_mode(&self) -> FenceMode {
        self.fence_mode
    }

    pub fn fence(&self, device: usize) -> &FenceState {
        &self.fences[device]
    }

    /// Treat `group` as block-for-block replicas of each other: reads
    /// rotate across members, writes go to all of them.
    pub fn set_mirrors(&mut self, group: &[usize]) -> Result<()> {
        if let Some(&bad) = group.iter().find(|&&d| d >= self.devices.len()) {
            return Err(Error::OutOfRange {
                what: "mirror device",
                index: bad as u64,
                limit: self.devices.len() as u64,
            });
        }
        for &d in group {
            self.mirrors[d] = group.to_vec();
        }
        Ok(())
    }

    /// Devices holding the same blocks as `device`, itself included.
    pub fn mirrors(&self, device: usize) -> &[usize] {
        &self.mirrors[device]
    }

    /// The next queue pair of `device` in round-robin order.
    pub fn queue_for(&self, device: usize) -> &Arc<QueuePair> {
        let qs = &self.queues[device];
        let i = self.next_queue[device].fetch_add(1, Ordering::Relaxed) % qs.len();
        &qs[i]
    }

    /// Submit on the next queue pair and wait; the status is not checked.
    pub fn submit(&self, device: usize, cmd: IoCommand) -> Result<CompletionEntry> {
        self.queue_for(device).submit_and_wait(cmd)
    }

    fn checked(&self, device: usize, qp: &QueuePair, cmd: IoCommand) -> Result<CompletionEntry> {
        let c = qp.submit_and_wait(cmd)?;
        if c.status == Status::Error {
            return Err(Error::CommandFailed { device, cid: c.cid });
        }
        Ok(c)
    }

    /// Read blocks into device-visible memory, fencing if configured.
    pub fn read(&self, device: usize, lba: u64, blocks: u32, buffer_offset: u64) -> Result<()> {
        let group = &self.mirrors[device];
        let target = if group.len() == 1 {
            device
        } else {
            group[self.next_mirror.fetch_add(1, Ordering::Relaxed) % group.len()]
        };
        let qp = self.queue_for(target);
        self.checked(target, qp, IoCommand::read(lba, blocks, buffer_offset))?;
        self.fences[target].apply(self.fence_mode, qp)
    }

    /// Write blocks from device-visible memory to every mirror of `device`.
    pub fn write(&self, device: usize, lba: u64, blocks: u32, buffer_offset: u64) -> Result<()> {
        for &d in &self.mirrors[device] {
            let qp = self.queue_for(d);
            self.checked(d, qp, IoCommand::write(lba, blocks, buffer_offset))?;
        }
        Ok(())
    }

    pub fn stats(&self) -> IoStats {
        let mut s = IoStats::default();
        for (dev, qps) in self.devices.iter().zip(&self.queues) {
            let c = dev.counters();
            s.device.reads += c.reads;
            s.device.writes += c.writes;
            s.device.read_blocks += c.read_blocks;
            s.device.write_blocks += c.write_blocks;
            s.device.errors += c.errors;
            s.device.fetched += c.fetched;
            s.device.posted += c.posted;
            for qp in qps {
                s.doorbell_rings += qp.doorbell_rings();
                s.doorbell_regressions += qp.doorbell_regressions();
                s.slot_violations += qp.slot_violations();
            }
        }
        for f in &self.fences {
            s.fenced += f.fenced();
            s.extra_fence_reads += f.extra_reads();
        }
        s
    }

    pub fn set_logging(&self, enabled: bool) {
        for d in &self.devices {
            d.set_logging(enabled);
        }
    }

    pub fn take_log(&self) -> Vec<crate::device::LogEntry> {
        self.devices.iter().flat_map(|d| d.take_log()).collect()
    }
}
