//! Simulated NVMe-like SSD controller.
//!
//! A device watches the SQ-tail doorbells of its attached queue pairs,
//! fetches new entries, services them in FIFO order against its block store
//! and posts completion entries carrying its current SQ consumption point.
//! It never fetches more commands than it has free CQ slots for, so posting
//! cannot overflow a completion queue.
//!
//! The service loop runs either on a dedicated thread ([`SimDevice::spawn`])
//! or is stepped by the caller ([`SimDevice::manual`]) for deterministic
//! single-threaded traces.

pub mod model;
mod profile;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

pub use profile::{DeviceProfile, DEFAULT_INTERCONNECT_BPS};

use crate::error::{Error, Result};
use crate::memory::{BlockStore, DmaMemory, BLOCK_SIZE};
use crate::poll::PollPolicy;
use crate::queue::{DoorbellKind, IoCommand, Opcode, QueuePair, Signal, Status};

pub const DEFAULT_COMPLETION_BATCH: usize = 16;

/// When data written by a READ becomes visible relative to its completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    /// Data lands before the completion entry is posted.
    Strict,
    /// Data lands `delay` after the completion is posted, or earlier if the
    /// device fetches another command first (a fetch orders prior writes).
    Relaxed { delay: Duration },
}

#[derive(Clone, Debug)]
pub struct DeviceOptions {
    pub capacity_blocks: u64,
    pub completion_batch: usize,
    /// Real service latency in stress mode, as a fraction of the profile's.
    pub latency_scale: f64,
    pub visibility: Visibility,
    pub poll: PollPolicy,
    /// Max entries fetched from one queue before moving to the next.
    pub fetch_burst: usize,
}

impl Default for DeviceOptions {
    fn default() -> Self {
        DeviceOptions {
            capacity_blocks: (16u64 << 30) / BLOCK_SIZE as u64,
            completion_batch: DEFAULT_COMPLETION_BATCH,
            latency_scale: 0.0,
            visibility: Visibility::Strict,
            poll: PollPolicy::default(),
            fetch_burst: 64,
        }
    }
}

/// One serviced command as recorded by the device's command log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub device: usize,
    pub queue: u32,
    pub opcode: Opcode,
    pub lba: u64,
    pub blocks: u32,
    pub status: Status,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceCounters {
    pub reads: u64,
    pub writes: u64,
    pub read_blocks: u64,
    pub write_blocks: u64,
    pub errors: u64,
    pub fetched: u64,
    pub posted: u64,
}

impl DeviceCounters {
    pub fn commands(&self) -> u64 {
        self.reads + self.writes
    }

    pub fn bytes_transferred(&self) -> u64 {
        (self.read_blocks + self.write_blocks) * BLOCK_SIZE as u64
    }
}

#[derive(Default)]
struct AtomicCounters {
    reads: AtomicU64,
    writes: AtomicU64,
    read_blocks: AtomicU64,
    write_blocks: AtomicU64,
    errors: AtomicU64,
    fetched: AtomicU64,
    posted: AtomicU64,
}

struct Cursor {
    queue: Arc<QueuePair>,
    fetched: u64,
    cq_tail: u64,
}

struct InService {
    queue: usize,
    cmd: IoCommand,
    ready_at: Instant,
}

struct Deferred {
    visible_at: Instant,
    offset: u64,
    data: Vec<u8>,
}

struct Engine {
    cursors: Vec<Cursor>,
    next_queue: usize,
    fifo: VecDeque<InService>,
    deferred: VecDeque<Deferred>,
    posts: Vec<Vec<(u32, Status)>>,
    visibility: Visibility,
    buf: Vec<u8>,
}

struct Shared {
    index: usize,
    profile: DeviceProfile,
    options: DeviceOptions,
    store: BlockStore,
    memory: Arc<DmaMemory>,
    signal: Arc<Signal>,
    queues: RwLock<Vec<Arc<QueuePair>>>,
    engine: Mutex<Engine>,
    shutdown: AtomicBool,
    counters: AtomicCounters,
    log: Mutex<Option<Vec<LogEntry>>>,
}

pub struct SimDevice {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

impl SimDevice {
    fn build(
        index: usize,
        profile: DeviceProfile,
        memory: Arc<DmaMemory>,
        options: DeviceOptions,
    ) -> Result<Arc<Shared>> {
        profile.validate()?;
        if options.completion_batch == 0 || options.fetch_burst == 0 {
            return Err(Error::config("completion batch and fetch burst must be >= 1"));
        }
        Ok(Arc::new(Shared {
            index,
            store: BlockStore::new(options.capacity_blocks),
            engine: Mutex::new(Engine {
                cursors: Vec::new(),
                next_queue: 0,
                fifo: VecDeque::new(),
                deferred: VecDeque::new(),
                posts: Vec::new(),
                visibility: options.visibility,
                buf: Vec::new(),
            }),
            profile,
            options,
            memory,
            signal: Signal::new(),
            queues: RwLock::new(Vec::new()),
            shutdown: AtomicBool::new(false),
            counters: AtomicCounters::default(),
            log: Mutex::new(None),
        }))
    }

    /// A device serviced by its own thread.
    pub fn spawn(
        index: usize,
        profile: DeviceProfile,
        memory: Arc<DmaMemory>,
        options: DeviceOptions,
    ) -> Result<Self> {
        let shared = Self::build(index, profile, memory, options)?;
        let worker = {
            let shared = shared.clone();
            thread::Builder::new()
                .name(format!("ssd{index}"))
                .spawn(move || service_loop(&shared))?
        };
        shared.signal.register(worker.thread().clone());
        Ok(SimDevice {
            shared,
            worker: Some(worker),
        })
    }

    /// A device that only makes progress when [`SimDevice::service_step`] is called.
    pub fn manual(
        index: usize,
        profile: DeviceProfile,
        memory: Arc<DmaMemory>,
        options: DeviceOptions,
    ) -> Result<Self> {
        Ok(SimDevice {
            shared: Self::build(index, profile, memory, options)?,
            worker: None,
        })
    }

    pub fn index(&self) -> usize {
        self.shared.index
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.shared.profile
    }

    pub fn store(&self) -> &BlockStore {
        &self.shared.store
    }

    pub fn memory(&self) -> &Arc<DmaMemory> {
        &self.shared.memory
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.shared.store.capacity_blocks()
    }

    pub fn attach_queue_pair(&self, depth: u32) -> Result<Arc<QueuePair>> {
        if self.shared.shutdown.load(Ordering::Acquire) {
            return Err(Error::DeviceShutdown(self.shared.index));
        }
        let mut queues = self.shared.queues.write();
        let qp = Arc::new(QueuePair::new(
            queues.len() as u32,
            depth,
            self.shared.signal.clone(),
            self.shared.options.poll,
        )?);
        let mut engine = self.shared.engine.lock();
        engine.cursors.push(Cursor {
            queue: qp.clone(),
            fetched: 0,
            cq_tail: 0,
        });
        engine.posts.push(Vec::new());
        queues.push(qp.clone());
        Ok(qp)
    }

    pub fn queue_pairs(&self) -> Vec<Arc<QueuePair>> {
        self.shared.queues.read().clone()
    }

    /// Write a doorbell register directly, as a client would over MMIO.
    pub fn doorbell_write(&self, queue: u32, kind: DoorbellKind, value: u64) -> Result<()> {
        let qp = self
            .shared
            .queues
            .read()
            .get(queue as usize)
            .cloned()
            .ok_or(Error::OutOfRange {
                what: "queue id",
                index: u64::from(queue),
                limit: self.shared.queues.read().len() as u64,
            })?;
        qp.doorbell(kind)
            .ring(value)
            .map_err(|last| Error::DoorbellRegression {
                queue,
                kind,
                value,
                last,
            })
    }

    pub fn set_visibility_mode(&self, mode: Visibility) {
        self.shared.engine.lock().visibility = mode;
    }

    /// Run one pass of fetch, service and completion posting. Returns the
    /// number of commands fetched plus completions posted.
    pub fn service_step(&self) -> usize {
        step(&self.shared)
    }

    pub fn counters(&self) -> DeviceCounters {
        let c = &self.shared.counters;
        DeviceCounters {
            reads: c.reads.load(Ordering::Relaxed),
            writes: c.writes.load(Ordering::Relaxed),
            read_blocks: c.read_blocks.load(Ordering::Relaxed),
            write_blocks: c.write_blocks.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
            fetched: c.fetched.load(Ordering::Relaxed),
            posted: c.posted.load(Ordering::Relaxed),
        }
    }

    /// Commands fetched but not yet completed.
    pub fn in_service(&self) -> usize {
        self.shared.engine.lock().fifo.len()
    }

    pub fn set_logging(&self, enabled: bool) {
        let mut log = self.shared.log.lock();
        match (enabled, log.is_some()) {
            (true, false) => *log = Some(Vec::new()),
            (false, true) => *log = None,
            _ => {}
        }
    }

    pub fn take_log(&self) -> Vec<LogEntry> {
        self.shared
            .log
            .lock()
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::Release);
        self.shared.signal.notify();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for SimDevice {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl std::fmt::Debug for SimDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimDevice")
            .field("index", &self.shared.index)
            .field("profile", &self.shared.profile.name)
            .finish()
    }
}

fn service_loop(shared: &Shared) {
    let mut idle = 0u32;
    while !shared.shutdown.load(Ordering::Acquire) {
        if step(shared) > 0 {
            idle = 0;
            continue;
        }
        idle += 1;
        let wake_at = {
            let engine = shared.engine.lock();
            let fifo = engine.fifo.front().map(|s| s.ready_at);
            let deferred = engine.deferred.iter().map(|d| d.visible_at).min();
            fifo.into_iter().chain(deferred).min()
        };
        if shared.signal.take() {
            continue;
        }
        match wake_at {
            Some(t) => {
                let now = Instant::now();
                if t > now {
                    thread::park_timeout((t - now).min(Duration::from_millis(1)));
                }
            }
            None if idle < 4 => thread::yield_now(),
            None => thread::park_timeout(Duration::from_millis(2)),
        }
    }
}

fn step(shared: &Shared) -> usize {
    let mut engine = shared.engine.lock();
    let engine = &mut *engine;
    let now = Instant::now();
    let mut progress = fetch(shared, engine, now);
    progress += service(shared, engine, now);
    progress += post(shared, engine);
    while engine
        .deferred
        .front()
        .is_some_and(|d| d.visible_at <= now)
    {
        let d = engine.deferred.pop_front().unwrap();
        let _ = shared.memory.write(d.offset, &d.data);
    }
    progress
}

fn fetch(shared: &Shared, engine: &mut Engine, now: Instant) -> usize {
    let n = engine.cursors.len();
    let mut fetched = 0;
    for k in 0..n {
        let qi = (engine.next_queue + k) % n;
        let cursor = &mut engine.cursors[qi];
        let depth = u64::from(cursor.queue.depth());
        let tail = cursor.queue.sq_doorbell().value();
        let reaped = cursor.queue.cq_doorbell().value();
        let mut burst = 0;
        while cursor.fetched < tail
            && cursor.fetched - reaped < depth
            && burst < shared.options.fetch_burst
        {
            let cmd = cursor.queue.device_fetch(cursor.fetched);
            cursor.fetched += 1;
            burst += 1;
            let latency = shared.profile.latency_us(cmd.opcode) * shared.options.latency_scale;
            engine.fifo.push_back(InService {
                queue: qi,
                cmd,
                ready_at: now + Duration::from_secs_f64(latency * 1e-6),
            });
        }
        fetched += burst;
    }
    if n > 0 {
        engine.next_queue = (engine.next_queue + 1) % n;
    }
    if fetched > 0 {
        shared
            .counters
            .fetched
            .fetch_add(fetched as u64, Ordering::Relaxed);
        // Reading a command orders every earlier data write before it.
        for d in engine.deferred.drain(..) {
            let _ = shared.memory.write(d.offset, &d.data);
        }
    }
    fetched
}

fn service(shared: &Shared, engine: &mut Engine, now: Instant) -> usize {
    let mut done = 0;
    while engine.fifo.front().is_some_and(|s| s.ready_at <= now) {
        let InService { queue, cmd, .. } = engine.fifo.pop_front().unwrap();
        let status = execute(shared, engine, cmd, now);
        if let Some(log) = shared.log.lock().as_mut() {
            log.push(LogEntry {
                device: shared.index,
                queue: engine.cursors[queue].queue.id(),
                opcode: cmd.opcode,
                lba: cmd.lba,
                blocks: cmd.block_count,
                status,
            });
        }
        engine.posts[queue].push((cmd.cid, status));
        done += 1;
    }
    done
}

fn execute(shared: &Shared, engine: &mut Engine, cmd: IoCommand, now: Instant) -> Status {
    let c = &shared.counters;
    let blocks = u64::from(cmd.block_count);
    if !shared.store.contains(cmd.lba, blocks) {
        c.errors.fetch_add(1, Ordering::Relaxed);
        return Status::Error;
    }
    let len = blocks as usize * BLOCK_SIZE;
    engine.buf.resize(len, 0);
    let ok = match cmd.opcode {
        Opcode::Read => {
            let _ = shared.store.read_blocks(cmd.lba, &mut engine.buf);
            match engine.visibility {
                Visibility::Strict => shared.memory.write(cmd.buffer_offset, &engine.buf).is_ok(),
                Visibility::Relaxed { delay } => {
                    engine.deferred.push_back(Deferred {
                        visible_at: now + delay,
                        offset: cmd.buffer_offset,
                        data: engine.buf.clone(),
                    });
                    (cmd.buffer_offset + len as u64) <= shared.memory.len() as u64
                }
            }
        }
        Opcode::Write => {
            shared.memory.read(cmd.buffer_offset, &mut engine.buf).is_ok()
                && shared.store.write_blocks(cmd.lba, &engine.buf).is_ok()
        }
    };
    if !ok {
        c.errors.fetch_add(1, Ordering::Relaxed);
        return Status::Error;
    }
    match cmd.opcode {
        Opcode::Read => {
            c.reads.fetch_add(1, Ordering::Relaxed);
            c.read_blocks.fetch_add(blocks, Ordering::Relaxed);
        }
        Opcode::Write => {
            c.writes.fetch_add(1, Ordering::Relaxed);
            c.write_blocks.fetch_add(blocks, Ordering::Relaxed);
        }
    }
    Status::Ok
}

fn post(shared: &Shared, engine: &mut Engine) -> usize {
    let batch = shared.options.completion_batch;
    let mut posted = 0;
    for (cursor, pending) in engine.cursors.iter_mut().zip(engine.posts.iter_mut()) {
        // Each episode writes at most `batch` entries for one queue.
        for chunk in pending.chunks(batch) {
            for &(cid, status) in chunk {
                cursor
                    .queue
                    .device_post(cursor.cq_tail, cid, status, cursor.fetched);
                cursor.cq_tail += 1;
            }
            posted += chunk.len();
        }
        pending.clear();
    }
    if posted > 0 {
        shared
            .counters
            .posted
            .fetch_add(posted as u64, Ordering::Relaxed);
    }
    posted
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manual() -> SimDevice {
        SimDevice::manual(
            0,
            DeviceProfile::optane_p5800x(),
            Arc::new(DmaMemory::new(1 << 16)),
            DeviceOptions {
                capacity_blocks: 1024,
                ..DeviceOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn attach_rejects_bad_depth() {
        let d = manual();
        assert!(d.attach_queue_pair(3).is_err());
        assert_eq!(d.attach_queue_pair(8).unwrap().id(), 0);
        assert_eq!(d.attach_queue_pair(8).unwrap().id(), 1);
    }

    #[test]
    fn attach_after_shutdown_fails() {
        let mut d = manual();
        d.shutdown();
        assert!(matches!(
            d.attach_queue_pair(8),
            Err(Error::DeviceShutdown(0))
        ));
    }

    #[test]
    fn doorbell_regression_is_a_fault() {
        let d = manual();
        d.attach_queue_pair(8).unwrap();
        d.doorbell_write(0, DoorbellKind::SqTail, 5).unwrap();
        let err = d.doorbell_write(0, DoorbellKind::SqTail, 5).unwrap_err();
        assert!(matches!(
            err,
            Error::DoorbellRegression {
                value: 5,
                last: 5,
                ..
            }
        ));
    }

    #[test]
    fn tail_doorbell_fetches_the_announced_entries() {
        let d = manual();
        let qp = d.attach_queue_pair(8).unwrap();
        d.doorbell_write(0, DoorbellKind::SqTail, 5).unwrap();
        d.service_step();
        assert_eq!(d.counters().fetched, 5);
        assert_eq!(d.counters().posted, 5);
        // The fetched slots were never written by a client.
        assert_eq!(qp.slot_violations(), 5);
    }

    #[test]
    fn device_stalls_on_full_cq_until_head_advances() {
        let d = manual();
        let qp = d.attach_queue_pair(4).unwrap();
        d.doorbell_write(0, DoorbellKind::SqTail, 6).unwrap();
        d.service_step();
        assert_eq!(d.counters().posted, 4);
        d.service_step();
        assert_eq!(d.counters().posted, 4, "no CQ room left");
        d.doorbell_write(0, DoorbellKind::CqHead, 2).unwrap();
        d.service_step();
        assert_eq!(d.counters().posted, 6);
        assert_eq!(qp.cq_doorbell().value(), 2);
    }

    #[test]
    fn round_trip_read_write() {
        let d = manual();
        let qp = d.attach_queue_pair(8).unwrap();
        let pattern: Vec<u8> = (0..512).map(|i| (i * 7) as u8).collect();
        d.memory().write(0, &pattern).unwrap();
        let t = qp.acquire_slot();
        let h = qp.enqueue_command(t, IoCommand::write(7, 1, 0)).unwrap();
        d.service_step();
        assert_eq!(qp.poll_completion(h).unwrap().status, Status::Ok);
        assert_eq!(d.store().snapshot(7, 1).unwrap(), pattern);

        let t = qp.acquire_slot();
        let h = qp.enqueue_command(t, IoCommand::read(7, 1, 4096)).unwrap();
        d.service_step();
        qp.poll_completion(h).unwrap();
        let mut out = vec![0; 512];
        d.memory().read(4096, &mut out).unwrap();
        assert_eq!(out, pattern);
    }

    #[test]
    fn out_of_range_lba_completes_with_error() {
        let d = manual();
        let qp = d.attach_queue_pair(8).unwrap();
        let t = qp.acquire_slot();
        let h = qp.enqueue_command(t, IoCommand::read(1020, 8, 0)).unwrap();
        d.service_step();
        let c = qp.poll_completion(h).unwrap();
        assert_eq!(c.status, Status::Error);
        assert_eq!(d.counters().errors, 1);
        assert_eq!(qp.sq_head(), 1);
    }

    #[test]
    fn spawned_device_serves_concurrent_clients() {
        let d = SimDevice::spawn(
            0,
            DeviceProfile::optane_p5800x(),
            Arc::new(DmaMemory::new(1 << 20)),
            DeviceOptions {
                capacity_blocks: 4096,
                ..DeviceOptions::default()
            },
        )
        .unwrap();
        let qp = d.attach_queue_pair(16).unwrap();
        thread::scope(|s| {
            for t in 0..8u64 {
                let qp = &qp;
                s.spawn(move || {
                    for i in 0..50u64 {
                        let c = qp
                            .submit_and_wait(IoCommand::read(t * 50 + i, 1, t * 512))
                            .unwrap();
                        assert_eq!(c.status, Status::Ok);
                    }
                });
            }
        });
        assert_eq!(d.counters().reads, 400);
        assert_eq!(qp.completed(), 400);
        assert_eq!(qp.slot_violations(), 0);
    }
}
