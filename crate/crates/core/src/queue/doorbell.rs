use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::Thread;

use serde::{Deserialize, Serialize};

/// Which register a doorbell write targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DoorbellKind {
    SqTail,
    CqHead,
}

/// Wakes a device service thread when one of its doorbells is written.
#[derive(Default)]
pub struct Signal {
    pending: AtomicBool,
    waiter: OnceLock<Thread>,
}

impl Signal {
    pub fn new() -> Arc<Self> {
        Arc::new(Signal::default())
    }

    pub fn register(&self, thread: Thread) {
        let _ = self.waiter.set(thread);
    }

    pub fn notify(&self) {
        self.pending.store(true, Ordering::Release);
        if let Some(t) = self.waiter.get() {
            t.unpark();
        }
    }

    /// Consume a pending notification.
    pub fn take(&self) -> bool {
        self.pending.swap(false, Ordering::AcqRel)
    }
}

/// A write-only device register holding a virtual queue index.
///
/// Values are kept unreduced (not modulo the queue depth) so a regression
/// is detectable; the device reduces them when indexing slots.
pub struct Doorbell {
    value: AtomicU64,
    rings: AtomicU64,
    regressions: AtomicU64,
    signal: Arc<Signal>,
}

impl Doorbell {
    pub fn new(signal: Arc<Signal>) -> Self {
        Doorbell {
            value: AtomicU64::new(0),
            rings: AtomicU64::new(0),
            regressions: AtomicU64::new(0),
            signal,
        }
    }

    /// Store `value`, which must exceed the previous write. On regression the
    /// register keeps its old value and the last value is returned.
    pub fn ring(&self, value: u64) -> Result<(), u64> {
        let mut cur = self.value.load(Ordering::Acquire);
        loop {
            if value <= cur {
                self.regressions.fetch_add(1, Ordering::Relaxed);
                return Err(cur);
            }
            match self
                .value
                .compare_exchange_weak(cur, value, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => break,
                Err(seen) => cur = seen,
            }
        }
        self.rings.fetch_add(1, Ordering::Relaxed);
        self.signal.notify();
        Ok(())
    }

    pub fn value(&self) -> u64 {
        self.value.load(Ordering::Acquire)
    }

    pub fn rings(&self) -> u64 {
        self.rings.load(Ordering::Relaxed)
    }

    pub fn regressions(&self) -> u64 {
        self.regressions.load(Ordering::Relaxed)
    }
}
