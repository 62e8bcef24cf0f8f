//! Data-visibility fence for relaxed completion ordering.
//!
//! When a device may post a completion before the data of the same command
//! is visible, a thread can force ordering by issuing one more command and
//! waiting for it: the device must fetch that command, and the fetch orders
//! all earlier data writes. Doing this per thread doubles the request count.
//! The coalesced variant funnels every waiting thread through one lock; the
//! winner issues a single extra read on behalf of everyone registered
//! before it started, and the rest just wait for their coverage flag.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poll::{PollPolicy, Poller};
use crate::queue::{IoCommand, QueuePair, Status};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FenceMode {
    #[default]
    Off,
    Naive,
    Coalesced,
}

impl std::str::FromStr for FenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(FenceMode::Off),
            "naive" => Ok(FenceMode::Naive),
            "coalesced" => Ok(FenceMode::Coalesced),
            other => Err(Error::config(format!("unknown fence mode {other:?}"))),
        }
    }
}

pub struct FenceState {
    lock: Mutex<()>,
    /// Waiters are numbered from 1 in registration order.
    registered: AtomicU64,
    /// Every waiter numbered at or below this is covered.
    covered: AtomicU64,
    extra_reads: AtomicU64,
    policy: PollPolicy,
    device: usize,
    /// Device-visible block the extra reads land in.
    scratch_offset: u64,
}

impl FenceState {
    pub fn new(device: usize, scratch_offset: u64, policy: PollPolicy) -> Self {
        FenceState {
            lock: Mutex::new(()),
            registered: AtomicU64::new(0),
            covered: AtomicU64::new(0),
            extra_reads: AtomicU64::new(0),
            policy,
            device,
            scratch_offset,
        }
    }

    fn extra_read(&self, qp: &QueuePair) -> Result<()> {
        let c = qp.submit_and_wait(IoCommand::read(0, 1, self.scratch_offset))?;
        self.extra_reads.fetch_add(1, Ordering::Relaxed);
        if c.status == Status::Error {
            return Err(Error::CommandFailed {
                device: self.device,
                cid: c.cid,
            });
        }
        Ok(())
    }

    /// One extra read per fenced completion.
    pub fn naive_after_completion(&self, qp: &QueuePair) -> Result<()> {
        self.registered.fetch_add(1, Ordering::AcqRel);
        self.extra_read(qp)
    }

    /// Returns once an extra read submitted after this call began has
    /// completed, making the caller's earlier data visible.
    pub fn fence_after_completion(&self, qp: &QueuePair) -> Result<()> {
        let me = self.registered.fetch_add(1, Ordering::AcqRel) + 1;
        let mut poller = Poller::new(self.policy, "visibility fence");
        loop {
            if self.covered.load(Ordering::Acquire) >= me {
                return Ok(());
            }
            if let Some(_guard) = self.lock.try_lock() {
                if self.covered.load(Ordering::Acquire) >= me {
                    return Ok(());
                }
                let upto = self.registered.load(Ordering::Acquire);
                self.extra_read(qp)?;
                self.covered.fetch_max(upto, Ordering::AcqRel);
                return Ok(());
            }
            poller.wait()?;
        }
    }

    pub fn apply(&self, mode: FenceMode, qp: &QueuePair) -> Result<()> {
        match mode {
            FenceMode::Off => Ok(()),
            FenceMode::Naive => self.naive_after_completion(qp),
            FenceMode::Coalesced => self.fence_after_completion(qp),
        }
    }

    /// Completions that went through the fence.
    pub fn fenced(&self) -> u64 {
        self.registered.load(Ordering::Acquire)
    }

    pub fn extra_reads(&self) -> u64 {
        self.extra_reads.load(Ordering::Relaxed)
    }

    /// Extra reads per fenced completion.
    pub fn overhead_ratio(&self) -> f64 {
        match self.fenced() {
            0 => 0.0,
            n => self.extra_reads() as f64 / n as f64,
        }
    }
}
