//! Experiment drivers: random I/O, graph traversal, columnar analytics,
//! vector add and the visibility checker.
//!
//! Every driver runs functionally against the simulated stack. In stress
//! mode the worker pool is real and `wall_seconds` is measured; in model
//! mode a single worker drives the stack deterministically, the devices
//! log every command, and each barrier-separated phase of the log is
//! replayed through the [`ThroughputModel`] to get modeled time.

pub mod analytics;
pub mod graph;
pub mod randbench;
pub mod vecadd;
pub mod visibility;

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::CacheStats;
use crate::device::model::{ModelRequest, ThroughputModel};
use crate::device::LogEntry;
use crate::error::{Error, Result};
use crate::io::IoStats;
use crate::memory::BLOCK_SIZE;
use crate::metrics::RunMetrics;
use crate::system::System;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "BAMSIM_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Stress,
    Model,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Stress => "stress",
            Mode::Model => "model",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stress" => Ok(Mode::Stress),
            "model" => Ok(Mode::Model),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

/// OS worker threads for `requested` logical threads: 1 in model mode,
/// otherwise capped by [`THREADS_ENV`] and the machine's parallelism
/// (at least 4 so concurrency is still exercised on small hosts).
pub fn worker_threads(mode: Mode, requested: u64) -> usize {
    if mode == Mode::Model {
        return 1;
    }
    let hw = std::thread::available_parallelism().map_or(4, |n| n.get()).max(4);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(hw);
    (requested.max(1) as usize).min(cap)
}

/// Run `f` over `0..items` in chunks of `chunk` on `workers` threads.
pub fn parallel_for<F>(workers: usize, items: u64, chunk: u64, f: F) -> Result<()>
where
    F: Fn(std::ops::Range<u64>) -> Result<()> + Sync,
{
    let chunk = chunk.max(1);
    if workers <= 1 || items <= chunk {
        let mut start = 0;
        while start < items {
            f(start..(start + chunk).min(items))?;
            start += chunk;
        }
        return Ok(());
    }
    let next = AtomicU64::new(0);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| loop {
                    let start = next.fetch_add(chunk, Ordering::Relaxed);
                    if start >= items {
                        return Ok(());
                    }
                    f(start..(start + chunk).min(items))?;
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect::<Result<Vec<()>>>()
            .map(|_| ())
    })
}

/// Counter deltas and command-log phases for one run.
pub struct Meter<'a> {
    sys: &'a System,
    mode: Mode,
    io0: IoStats,
    cache0: CacheStats,
    started: Instant,
    phases: Vec<Vec<ModelRequest>>,
}

impl<'a> Meter<'a> {
    pub fn start(sys: &'a System, mode: Mode) -> Self {
        if mode == Mode::Model {
            sys.io().set_logging(true);
            sys.io().take_log();
        }
        Meter {
            sys,
            mode,
            io0: sys.io().stats(),
            cache0: sys.cache().stats(),
            started: Instant::now(),
            phases: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Close the current phase (a barrier between dependent steps).
    pub fn phase(&mut self) {
        if self.mode != Mode::Model {
            return;
        }
        let reqs = interleave(
            self.sys
                .io()
                .devices()
                .iter()
                .map(|d| d.take_log())
                .collect(),
        );
        if !reqs.is_empty() {
            self.phases.push(reqs);
        }
    }

    pub fn phases(&self) -> &[Vec<ModelRequest>] {
        &self.phases
    }

    pub fn model(&self) -> ThroughputModel {
        model_for(self.sys)
    }

    /// Build the row. `issuers` is the logical thread count for the model;
    /// `modeled_seconds` overrides the phase-sum when the driver overlaps
    /// phases itself.
    pub fn finish(
        mut self,
        workload: &str,
        issuers: u64,
        bytes_used: u64,
        modeled_seconds: Option<f64>,
    ) -> RunMetrics {
        self.phase();
        let wall = self.started.elapsed().as_secs_f64();
        let io = self.sys.io().stats();
        let cache = self.sys.cache().stats();
        let cfg = self.sys.cache().config();
        let mut m = RunMetrics {
            workload: workload.to_string(),
            mode: self.mode.as_str().to_string(),
            devices: self.sys.num_devices() as u64,
            queues: self.sys.io().queues(0).len() as u64,
            depth: u64::from(self.sys.io().queues(0)[0].depth()),
            line_size: cfg.line_size,
            cache_bytes: cfg.capacity_bytes(),
            threads: issuers,
            io_commands: io.io_commands() - self.io0.io_commands(),
            bytes_transferred: io.bytes_transferred() - self.io0.bytes_transferred(),
            bytes_used,
            hits: cache.hits - self.cache0.hits,
            misses: cache.misses - self.cache0.misses,
            doorbell_rings: io.doorbell_rings - self.io0.doorbell_rings,
            extra_fence_reads: io.extra_fence_reads - self.io0.extra_fence_reads,
            ..Default::default()
        };
        m.set_amplification();
        match self.mode {
            Mode::Model => {
                let seconds = modeled_seconds.unwrap_or_else(|| {
                    self.model().run(&self.phases, issuers as usize).seconds
                });
                m.modeled_seconds = seconds;
                m.modeled_iops = if seconds > 0.0 {
                    m.io_commands as f64 / seconds
                } else {
                    0.0
                };
                // Wall time would break byte-identical reruns.
                m.wall_seconds = 0.0;
                self.sys.io().set_logging(false);
            }
            Mode::Stress => m.wall_seconds = wall,
        }
        m
    }
}

pub fn model_for(sys: &System) -> ThroughputModel {
    ThroughputModel::new(
        sys.io().devices().iter().map(|d| d.profile().clone()).collect(),
        sys.io().queues(0).len() as u32,
        sys.io().queues(0)[0].depth(),
    )
}

/// Merge per-device logs round-robin so devices overlap in the model.
fn interleave(logs: Vec<Vec<LogEntry>>) -> Vec<ModelRequest> {
    let total = logs.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut iters: Vec<_> = logs.into_iter().map(Vec::into_iter).collect();
    while out.len() < total {
        for it in iters.iter_mut() {
            if let Some(e) = it.next() {
                out.push(ModelRequest {
                    device: e.device as u32,
                    queue: e.queue,
                    op: e.opcode,
                    bytes: u64::from(e.blocks) * BLOCK_SIZE as u64,
                });
            }
        }
    }
    out
}

/// Read `blocks` blocks at `lba` into DMA memory at `offset`, split into
/// commands of at most `per_command` blocks.
pub(crate) fn read_chunked(
    sys: &System,
    device: u32,
    lba: u64,
    blocks: u64,
    offset: u64,
    per_command: u64,
) -> Result<()> {
    let mut done = 0;
    while done < blocks {
        let n = per_command.min(blocks - done);
        sys.io()
            .read(device as usize, lba + done, n as u32, offset + done * BLOCK_SIZE as u64)?;
        done += n;
    }
    Ok(())
}

pub(crate) fn write_chunked(
    sys: &System,
    device: u32,
    lba: u64,
    blocks: u64,
    offset: u64,
    per_command: u64,
) -> Result<()> {
    let mut done = 0;
    while done < blocks {
        let n = per_command.min(blocks - done);
        sys.io()
            .write(device as usize, lba + done, n as u32, offset + done * BLOCK_SIZE as u64)?;
        done += n;
    }
    Ok(())
}
