//! Virtual-clock throughput model.
//!
//! Replays a request stream against token buckets for every resource a
//! request crosses (queue pair, device, host link) and a fixed service
//! latency. A pool of closed-loop issuers each keeps one request in flight,
//! so throughput comes out as the minimum of the issuers' Little's-law rate
//! and the tightest resource cap. Phases are separated by barriers, the way
//! successive kernel launches are.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use num_traits::Float;

use super::profile::{DeviceProfile, DEFAULT_INTERCONNECT_BPS};
use crate::error::{Error, Result};
use crate::queue::Opcode;

/// Bytes a request moves over the host link besides its payload: the 64 B
/// submission entry the device fetches and the 16 B completion it posts.
pub const COMMAND_OVERHEAD_BYTES: u64 = 64 + 16;

/// Per-queue-pair ceiling on commands per second from protocol
/// serialization (lock hand-off and doorbell write per batch).
pub const DEFAULT_QUEUE_IOPS_CAP: f64 = 40e3;

/// Minimum number of requests that must be in flight to sustain
/// `throughput` (per second) at `latency` (seconds): T·L, rounded to the
/// nearest whole request.
pub fn littles_law_qd<F: Float>(throughput: F, latency: F) -> Result<u64> {
    if !(throughput > F::zero() && latency > F::zero()) {
        return Err(Error::config("throughput and latency must be positive"));
    }
    let qd = (throughput * latency).round();
    qd.to_u64()
        .ok_or_else(|| Error::config("queue depth does not fit in u64"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelRequest {
    pub device: u32,
    pub queue: u32,
    pub op: Opcode,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelOutcome {
    pub commands: u64,
    pub seconds: f64,
}

impl ModelOutcome {
    pub fn iops(&self) -> f64 {
        if self.seconds > 0.0 {
            self.commands as f64 / self.seconds
        } else {
            0.0
        }
    }

    pub fn then(self, other: ModelOutcome) -> ModelOutcome {
        ModelOutcome {
            commands: self.commands + other.commands,
            seconds: self.seconds + other.seconds,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ThroughputModel {
    pub devices: Vec<DeviceProfile>,
    pub queues_per_device: u32,
    pub queue_depth: u32,
    pub queue_iops_cap: f64,
    pub interconnect_bps: f64,
}

impl ThroughputModel {
    pub fn new(devices: Vec<DeviceProfile>, queues_per_device: u32, queue_depth: u32) -> Self {
        ThroughputModel {
            devices,
            queues_per_device,
            queue_depth,
            queue_iops_cap: DEFAULT_QUEUE_IOPS_CAP,
            interconnect_bps: DEFAULT_INTERCONNECT_BPS,
        }
    }

    /// Simulate one phase starting at t=0; returns its makespan in seconds.
    pub fn phase_seconds(&self, requests: &[ModelRequest], issuers: usize) -> f64 {
        if requests.is_empty() {
            return 0.0;
        }
        let mut state = State::new(self);
        let issuers = issuers.clamp(1, requests.len());
        let mut free: BinaryHeap<Reverse<(Time, usize)>> =
            (0..issuers).map(|w| Reverse((Time(0.0), w))).collect();
        let mut end = 0.0f64;
        for r in requests {
            let Reverse((Time(t), w)) = free.pop().expect("issuer pool is non-empty");
            let done = state.issue(self, r, t);
            end = end.max(done);
            free.push(Reverse((Time(done), w)));
        }
        end
    }

    /// Run barrier-separated phases back to back.
    pub fn run(&self, phases: &[Vec<ModelRequest>], issuers: usize) -> ModelOutcome {
        phases
            .iter()
            .map(|p| ModelOutcome {
                commands: p.len() as u64,
                seconds: self.phase_seconds(p, issuers),
            })
            .fold(ModelOutcome::default(), ModelOutcome::then)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Admits one request per `interval`; an idle bucket admits immediately.
#[derive(Clone, Copy, Debug, Default)]
struct TokenBucket {
    next: f64,
}

impl TokenBucket {
    fn admit(&mut self, at: f64, interval: f64) -> f64 {
        let start = at.max(self.next);
        self.next = start + interval;
        start
    }
}

struct QueueState {
    bucket: TokenBucket,
    in_flight: BinaryHeap<Reverse<Time>>,
}

struct State {
    queues: Vec<QueueState>,
    device_read: Vec<TokenBucket>,
    device_write: Vec<TokenBucket>,
    link_read: TokenBucket,
    link_write: TokenBucket,
}

impl State {
    fn new(m: &ThroughputModel) -> Self {
        let nq = m.devices.len() * m.queues_per_device.max(1) as usize;
        State {
            queues: (0..nq)
                .map(|_| QueueState {
                    bucket: TokenBucket::default(),
                    in_flight: BinaryHeap::new(),
                })
                .collect(),
            device_read: vec![TokenBucket::default(); m.devices.len()],
            device_write: vec![TokenBucket::default(); m.devices.len()],
            link_read: TokenBucket::default(),
            link_write: TokenBucket::default(),
        }
    }

    fn issue(&mut self, m: &ThroughputModel, r: &ModelRequest, at: f64) -> f64 {
        let dev = r.device as usize % m.devices.len();
        let profile = &m.devices[dev];
        let qpd = m.queues_per_device.max(1);
        let q = &mut self.queues[dev * qpd as usize + (r.queue % qpd) as usize];

        let mut t = at;
        while q.in_flight.peek().is_some_and(|Reverse(Time(c))| *c <= t) {
            q.in_flight.pop();
        }
        if q.in_flight.len() >= m.queue_depth as usize {
            let Reverse(Time(c)) = q.in_flight.pop().unwrap();
            t = t.max(c);
        }
        t = q.bucket.admit(t, 1.0 / m.queue_iops_cap);

        let (device, link) = match r.op {
            Opcode::Read => (&mut self.device_read[dev], &mut self.link_read),
            Opcode::Write => (&mut self.device_write[dev], &mut self.link_write),
        };
        t = device.admit(t, 1.0 / profile.iops_cap(r.op, r.bytes));
        t = link.admit(
            t,
            (r.bytes + COMMAND_OVERHEAD_BYTES) as f64 / m.interconnect_bps,
        );
        let done = t + profile.latency_us(r.op) * 1e-6;
        q.in_flight.push(Reverse(Time(done)));
        done
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reads(n: usize, devices: u32, qpd: u32, bytes: u64) -> Vec<ModelRequest> {
        (0..n)
            .map(|i| ModelRequest {
                device: i as u32 % devices,
                queue: (i as u32 / devices) % qpd,
                op: Opcode::Read,
                bytes,
            })
            .collect()
    }

    #[test]
    fn littles_law_examples() {
        assert_eq!(littles_law_qd(51e6, 11e-6).unwrap(), 561);
        assert_eq!(littles_law_qd(6.35e6, 11e-6).unwrap(), 70);
        assert_eq!(littles_law_qd(51e6, 324e-6).unwrap(), 16524);
        assert_eq!(littles_law_qd(6.35e6, 324e-6).unwrap(), 2057);
        assert_eq!(littles_law_qd(51e6f32, 11e-6f32).unwrap(), 561);
        assert!(littles_law_qd(0.0, 1.0).is_err());
        assert!(littles_law_qd(1.0, -1.0).is_err());
    }

    #[test]
    fn single_issuer_is_latency_bound() {
        let m = ThroughputModel::new(vec![DeviceProfile::optane_p5800x()], 128, 1024);
        let out = m.run(&[reads(1000, 1, 128, 512)], 1);
        let expect = 1.0 / 11e-6;
        assert!((out.iops() - expect).abs() / expect < 1e-9, "{}", out.iops());
    }

    #[test]
    fn many_issuers_hit_the_device_cap() {
        let m = ThroughputModel::new(vec![DeviceProfile::optane_p5800x()], 128, 1024);
        let out = m.run(&[reads(200_000, 1, 128, 512)], 65_536);
        assert!((out.iops() - 5.1e6).abs() / 5.1e6 < 0.02, "{}", out.iops());
    }

    #[test]
    fn few_queues_bind_before_the_device() {
        let m = ThroughputModel::new(vec![DeviceProfile::optane_p5800x()], 8, 1024);
        let out = m.run(&[reads(50_000, 1, 8, 4096)], 16_384);
        let cap = 8.0 * DEFAULT_QUEUE_IOPS_CAP;
        assert!((out.iops() - cap).abs() / cap < 0.02, "{}", out.iops());
    }

    #[test]
    fn deterministic() {
        let m = ThroughputModel::new(vec![DeviceProfile::samsung_pm1735(); 3], 16, 64);
        let r = reads(10_000, 3, 16, 4096);
        assert_eq!(m.phase_seconds(&r, 777), m.phase_seconds(&r, 777));
    }
}
