use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use bamsim::cache::LineId;
use bamsim::device::{DeviceOptions, DeviceProfile, SimDevice};
use bamsim::memory::DmaMemory;
use bamsim::poll::PollPolicy;
use bamsim::queue::{IoCommand, SubmittedHandle};
use bamsim::{Element, System};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum QueueOp {
    Submit,
    Step,
    Poll,
}

fn queue_op() -> impl Strategy<Value = QueueOp> {
    prop_oneof![
        4 => Just(QueueOp::Submit),
        2 => Just(QueueOp::Step),
        3 => Just(QueueOp::Poll),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Single client, manually stepped device: completions come back in
    /// submission order and a slot's turn counter is odd exactly while the
    /// slot holds an unconsumed-by-head command.
    #[test]
    fn queue_matches_fifo(depth in prop::sample::select(vec![2u32, 4, 8, 32]),
                          ops in prop::collection::vec(queue_op(), 1..200)) {
        let device = SimDevice::manual(
            0,
            DeviceProfile::optane_p5800x(),
            Arc::new(DmaMemory::new(4096)),
            DeviceOptions {
                capacity_blocks: 64,
                poll: PollPolicy::default().with_timeout(Duration::from_secs(1)),
                ..DeviceOptions::default()
            },
        ).unwrap();
        let qp = device.attach_queue_pair(depth).unwrap();
        let mut fifo: VecDeque<SubmittedHandle> = VecDeque::new();
        let mut next_cid = 0u32;
        let mut posted = 0u64;
        let mut polled = 0u64;
        for op in ops {
            match op {
                QueueOp::Submit => {
                    if qp.sq_tail() - qp.sq_head() >= u64::from(depth) {
                        continue;
                    }
                    let t = qp.acquire_slot();
                    let h = qp.enqueue_command(t, IoCommand::read(u64::from(next_cid) % 64, 1, 0)).unwrap();
                    prop_assert_eq!(h.cid, next_cid);
                    next_cid += 1;
                    fifo.push_back(h);
                }
                QueueOp::Step => {
                    device.service_step();
                    posted = device.counters().posted;
                }
                QueueOp::Poll => {
                    if polled == posted {
                        continue;
                    }
                    let h = fifo.pop_front().unwrap();
                    let c = qp.poll_completion(h).unwrap();
                    prop_assert_eq!(c.cid, h.cid);
                    polled += 1;
                }
            }
            let (head, tail) = (qp.sq_head(), qp.sq_tail());
            prop_assert!(head <= tail && tail <= head + u64::from(depth));
            prop_assert_eq!(qp.cq_head(), polled);
            for slot in 0..depth {
                let busy = (head..tail).any(|v| v % u64::from(depth) == u64::from(slot));
                prop_assert_eq!(qp.turn_counter(slot) % 2 == 1, busy, "slot {}", slot);
            }
        }
        prop_assert_eq!(qp.slot_violations(), 0);
        prop_assert_eq!(qp.doorbell_regressions(), 0);
    }
}

#[derive(Clone, Debug)]
enum CacheOp {
    Probe(u64),
    Group(Vec<u64>),
    Write(u64, u8),
    Release(usize),
    Flush(u64),
}

fn cache_op() -> impl Strategy<Value = CacheOp> {
    prop_oneof![
        3 => (0..24u64).prop_map(CacheOp::Probe),
        1 => prop::collection::vec(0..24u64, 1..6).prop_map(CacheOp::Group),
        2 => (0..24u64, any::<u8>()).prop_map(|(l, b)| CacheOp::Write(l, b)),
        3 => any::<usize>().prop_map(CacheOp::Release),
        1 => (0..24u64).prop_map(CacheOp::Flush),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Pins held by the test always equal the cache's refcounts, and line
    /// contents survive eviction and write-back.
    #[test]
    fn cache_refcounts_balance(ops in prop::collection::vec(cache_op(), 1..300)) {
        let sys = System::builder()
            .capacity_blocks(256)
            .cache(512, 8 * 512)
            .scratch_bytes(0)
            .build()
            .unwrap();
        let cache = sys.cache();
        let mut held = Vec::new();
        let mut contents: HashMap<u64, u8> = HashMap::new();
        for op in ops {
            let pinned_lines = |held: &Vec<bamsim::cache::LineRef<'_>>| {
                let mut v: Vec<u64> = held.iter().map(|r| r.line().index).collect();
                v.sort_unstable();
                v.dedup();
                v.len()
            };
            match op {
                CacheOp::Probe(l) => {
                    if pinned_lines(&held) >= 6 {
                        continue;
                    }
                    let r = cache.probe(LineId::new(0, l)).unwrap();
                    let mut b = [0u8; 1];
                    r.read(0, &mut b).unwrap();
                    prop_assert_eq!(b[0], contents.get(&l).copied().unwrap_or(0));
                    held.push(r);
                }
                CacheOp::Group(lines) => {
                    if pinned_lines(&held) + lines.len() > 6 {
                        continue;
                    }
                    let ids: Vec<LineId> = lines.iter().map(|&l| LineId::new(0, l)).collect();
                    held.extend(cache.probe_group(&ids).unwrap());
                }
                CacheOp::Write(l, b) => {
                    if pinned_lines(&held) >= 6 {
                        continue;
                    }
                    let r = cache.probe(LineId::new(0, l)).unwrap();
                    r.write(0, &[b]).unwrap();
                    contents.insert(l, b);
                }
                CacheOp::Release(i) => {
                    if !held.is_empty() {
                        let r = held.swap_remove(i % held.len());
                        r.release().unwrap();
                    }
                }
                CacheOp::Flush(l) => {
                    cache.flush_line(LineId::new(0, l)).unwrap();
                }
            }
            let mut want: HashMap<u64, u32> = HashMap::new();
            for r in &held {
                *want.entry(r.line().index).or_default() += 1;
            }
            for l in 0..24 {
                let meta = cache.line_meta(LineId::new(0, l)).unwrap();
                prop_assert_eq!(meta.refcount, want.get(&l).copied().unwrap_or(0), "line {}", l);
            }
            prop_assert_eq!(cache.live_pins(), held.len() as u64);
        }
        drop(held);
        cache.flush_all().unwrap();
        for (l, b) in contents {
            let on_disk = sys.io().device(0).store().snapshot(l, 1).unwrap();
            prop_assert_eq!(on_disk[0], b);
        }
        prop_assert_eq!(cache.stats().pin_violations, 0);
    }
}

fn gather_scatter<T: Element + std::fmt::Debug>(
    len: u64,
    devices: usize,
    line: u64,
    batches: &[(Vec<u64>, bool)],
    value: impl Fn(u64, usize) -> T,
) -> Result<(), TestCaseError> {
    let sys = System::builder()
        .devices(vec![DeviceProfile::samsung_pm1735(); devices])
        .capacity_blocks(4096)
        .cache(line, 16 * line)
        .scratch_bytes(0)
        .build()
        .unwrap();
    let all: Vec<u32> = (0..devices as u32).collect();
    let arr = sys.array_on::<T>(len, &all).unwrap();
    let mut flat = vec![T::zero(); len as usize];
    for (round, (raw, write)) in batches.iter().enumerate() {
        let mut idx: Vec<u64> = raw.iter().map(|i| i % len).collect();
        if *write {
            idx.sort_unstable();
            idx.dedup();
            let vals: Vec<T> = idx.iter().map(|&i| value(i, round)).collect();
            arr.write_group(&idx, &vals).unwrap();
            for (&i, &v) in idx.iter().zip(&vals) {
                flat[i as usize] = v;
            }
        } else {
            let got = arr.read_group(&idx).unwrap();
            let want: Vec<T> = idx.iter().map(|&i| flat[i as usize]).collect();
            prop_assert_eq!(got, want);
        }
    }
    sys.cache().flush_all().unwrap();
    prop_assert_eq!(arr.load_direct(0, len).unwrap(), flat);
    Ok(())
}

fn batches() -> impl Strategy<Value = Vec<(Vec<u64>, bool)>> {
    prop::collection::vec((prop::collection::vec(any::<u64>(), 1..=32), any::<bool>()), 1..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn array_f64_matches_flat_oracle(len in 1u64..5000, devices in 1usize..=3,
                                     line in prop::sample::select(vec![512u64, 2048]),
                                     b in batches()) {
        gather_scatter::<f64>(len, devices, line, &b, |i, r| i as f64 * 0.5 + r as f64)?;
    }

    #[test]
    fn array_u32_matches_flat_oracle(len in 1u64..5000, devices in 1usize..=3,
                                     b in batches()) {
        gather_scatter::<u32>(len, devices, 512, &b, |i, r| (i as u32) ^ ((r as u32) << 20))?;
    }

    #[test]
    fn array_f32_matches_flat_oracle(len in 1u64..3000, b in batches()) {
        gather_scatter::<f32>(len, 2, 1024, &b, |i, r| (i % 4096) as f32 - r as f32)?;
    }
}
