//! Random block I/O microbenchmark: every logical thread issues
//! `reqs_per_thread` requests of `access_size` bytes, spread round-robin
//! over devices and queue pairs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parallel_for, worker_threads, Mode};
use crate::device::model::ModelRequest;
use crate::error::{Error, Result};
use crate::memory::BLOCK_SIZE;
use crate::metrics::RunMetrics;
use crate::queue::{IoCommand, Opcode, Status};
use crate::system::System;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandBenchConfig {
    pub threads: u64,
    pub access_size: u64,
    pub reqs_per_thread: u64,
    pub op: Opcode,
    pub random: bool,
    /// Fraction of writes when mixing; overrides `op` when set.
    pub write_fraction: Option<f64>,
}

impl Default for RandBenchConfig {
    fn default() -> Self {
        RandBenchConfig {
            threads: 65536,
            access_size: 512,
            reqs_per_thread: 4,
            op: Opcode::Read,
            random: true,
            write_fraction: None,
        }
    }
}

impl RandBenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.access_size == 0 || !self.access_size.is_multiple_of(BLOCK_SIZE as u64) {
            return Err(Error::config(format!(
                "access size {} is not a multiple of {BLOCK_SIZE}",
                self.access_size
            )));
        }
        if self.threads == 0 || self.reqs_per_thread == 0 {
            return Err(Error::config("threads and reqs_per_thread must be >= 1"));
        }
        if let Some(f) = self.write_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("write_fraction must be within [0, 1]"));
            }
        }
        Ok(())
    }

    fn total(&self) -> u64 {
        self.threads * self.reqs_per_thread
    }

    fn op_for(&self, rng: &mut ChaCha8Rng) -> Opcode {
        match self.write_fraction {
            Some(f) if rng.gen_bool(f) => Opcode::Write,
            Some(_) => Opcode::Read,
            None => self.op,
        }
    }
}

/// The request stream the model replays: request `i` goes to device
/// `i mod D` and queue `(i / D) mod Q`.
pub fn model_requests(
    cfg: &RandBenchConfig,
    devices: u32,
    queues_per_device: u32,
    seed: u64,
) -> Vec<ModelRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.total())
        .map(|i| ModelRequest {
            device: (i % u64::from(devices)) as u32,
            queue: ((i / u64::from(devices)) % u64::from(queues_per_device)) as u32,
            op: cfg.op_for(&mut rng),
            bytes: cfg.access_size,
        })
        .collect()
}

pub fn run(sys: &System, cfg: &RandBenchConfig, mode: Mode, seed: u64) -> Result<RunMetrics> {
    cfg.validate()?;
    match mode {
        Mode::Model => Ok(run_model(sys, cfg, seed)),
        Mode::Stress => run_stress(sys, cfg, seed),
    }
}

fn base_metrics(sys: &System, cfg: &RandBenchConfig, mode: Mode, seed: u64) -> RunMetrics {
    let cache = sys.cache().config();
    RunMetrics {
        workload: "randbench".into(),
        mode: mode.as_str().into(),
        devices: sys.num_devices() as u64,
        queues: sys.io().queues(0).len() as u64,
        depth: u64::from(sys.io().queues(0)[0].depth()),
        line_size: cache.line_size,
        cache_bytes: cache.capacity_bytes(),
        threads: cfg.threads,
        seed,
        ..Default::default()
    }
}

fn run_model(sys: &System, cfg: &RandBenchConfig, seed: u64) -> RunMetrics {
    let model = super::model_for(sys);
    let reqs = model_requests(
        cfg,
        sys.num_devices() as u32,
        model.queues_per_device,
        seed,
    );
    let seconds = model.phase_seconds(&reqs, cfg.threads as usize);
    let mut m = base_metrics(sys, cfg, Mode::Model, seed);
    m.io_commands = reqs.len() as u64;
    m.bytes_transferred = m.io_commands * cfg.access_size;
    m.bytes_used = m.bytes_transferred;
    m.set_amplification();
    m.modeled_seconds = seconds;
    m.modeled_iops = m.io_commands as f64 / seconds;
    m
}

fn run_stress(sys: &System, cfg: &RandBenchConfig, seed: u64) -> Result<RunMetrics> {
    let workers = worker_threads(Mode::Stress, cfg.threads);
    let blocks = (cfg.access_size / BLOCK_SIZE as u64) as u32;
    let scratch = sys.scratch()?;
    if scratch.len < cfg.access_size * workers as u64 {
        return Err(Error::config("scratch memory too small for one buffer per worker"));
    }
    let devices = sys.num_devices() as u64;
    let span = sys.io().device(0).capacity_blocks() / u64::from(blocks);
    let before = sys.io().stats();
    let started = Instant::now();
    // One chunk per worker so each owns a buffer for its whole lifetime.
    let total = cfg.total();
    let per_worker = total.div_ceil(workers as u64);
    parallel_for(workers, total, per_worker, |range| {
        let w = range.start / per_worker;
        let buffer = scratch.at(w * cfg.access_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ w.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for i in range {
            let device = (i % devices) as usize;
            let slot = if cfg.random {
                rng.gen_range(1..span)
            } else {
                1 + (i / devices) % (span - 1)
            };
            let lba = slot * u64::from(blocks);
            let cmd = match cfg.op_for(&mut rng) {
                Opcode::Read => IoCommand::read(lba, blocks, buffer),
                Opcode::Write => IoCommand::write(lba, blocks, buffer),
            };
            let c = sys.io().submit(device, cmd)?;
            if c.status != Status::Ok {
                return Err(Error::CommandFailed {
                    device,
                    cid: c.cid,
                });
            }
        }
        Ok(())
    })?;
    let wall = started.elapsed().as_secs_f64();
    let after = sys.io().stats();
    let mut m = base_metrics(sys, cfg, Mode::Stress, seed);
    m.io_commands = after.io_commands() - before.io_commands();
    m.bytes_transferred = after.bytes_transferred() - before.bytes_transferred();
    m.bytes_used = m.bytes_transferred;
    m.doorbell_rings = after.doorbell_rings - before.doorbell_rings;
    m.set_amplification();
    m.wall_seconds = wall;
    Ok(m)
}
