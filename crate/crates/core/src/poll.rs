//! Spin-then-yield polling with an inactivity deadline.
//!
//! Every blocking wait in the simulator goes through [`Poller`] so that a
//! protocol bug turns into a [`Error::Timeout`] instead of a hang.

use std::hint;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Default inactivity timeout before a wait is declared dead.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug)]
pub struct PollPolicy {
    pub spins: u32,
    pub yields: u32,
    pub sleep: Duration,
    pub timeout: Duration,
}

impl Default for PollPolicy {
    fn default() -> Self {
        PollPolicy {
            spins: 16,
            yields: 64,
            sleep: Duration::from_micros(20),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl PollPolicy {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

pub struct Poller {
    policy: PollPolicy,
    what: &'static str,
    step: u32,
    started: Option<Instant>,
}

impl Poller {
    pub fn new(policy: PollPolicy, what: &'static str) -> Self {
        Poller {
            policy,
            what,
            step: 0,
            started: None,
        }
    }

    /// Back off once. Fails once the wait has lasted longer than the timeout.
    pub fn wait(&mut self) -> Result<()> {
        let PollPolicy {
            spins,
            yields,
            sleep,
            timeout,
        } = self.policy;
        if self.step < spins {
            hint::spin_loop();
        } else if self.step < spins + yields {
            thread::yield_now();
        } else {
            let started = *self.started.get_or_insert_with(Instant::now);
            let waited = started.elapsed();
            if waited > timeout {
                return Err(Error::Timeout {
                    what: self.what,
                    waited,
                });
            }
            thread::sleep(sleep);
        }
        self.step = self.step.saturating_add(1);
        Ok(())
    }

    /// Call after observable progress; restarts the inactivity clock.
    pub fn progressed(&mut self) {
        self.step = 0;
        self.started = None;
    }
}
