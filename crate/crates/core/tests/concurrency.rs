use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bamsim::cache::LineId;
use bamsim::device::{DeviceOptions, DeviceProfile, SimDevice};
use bamsim::memory::DmaMemory;
use bamsim::queue::{IoCommand, Opcode, Status};
use bamsim::System;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn shallow_queues_wrap_many_times_without_losing_commands() {
    const THREADS: usize = 48;
    const PER_THREAD: u64 = 400;
    let device = SimDevice::spawn(
        0,
        DeviceProfile::samsung_980pro(),
        Arc::new(DmaMemory::new(THREADS * 512)),
        DeviceOptions {
            capacity_blocks: 1 << 12,
            completion_batch: 3,
            fetch_burst: 5,
            ..DeviceOptions::default()
        },
    )
    .unwrap();
    // Depth far below the number of clients forces turn-counter waits.
    let qps: Vec<_> = (0..3).map(|_| device.attach_queue_pair(8).unwrap()).collect();
    thread::scope(|s| {
        for t in 0..THREADS {
            let qp = &qps[t % qps.len()];
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                for _ in 0..PER_THREAD {
                    let lba = rng.gen_range(0..1 << 12);
                    let c = qp.submit_and_wait(IoCommand::read(lba, 1, t as u64 * 512)).unwrap();
                    assert_eq!(c.status, Status::Ok);
                }
            });
        }
    });
    let total: u64 = qps.iter().map(|q| q.completed()).sum();
    assert_eq!(total, THREADS as u64 * PER_THREAD);
    assert_eq!(device.counters().reads, total);
    for qp in &qps {
        assert_eq!(qp.slot_violations(), 0);
        assert_eq!(qp.doorbell_regressions(), 0);
        assert_eq!(qp.sq_head(), qp.sq_tail());
    }
}

#[test]
fn individual_probes_of_a_cold_line_share_one_fetch() {
    let sys = System::builder()
        .manual(true)
        .capacity_blocks(1 << 12)
        .cache(1024, 64 << 10)
        .scratch_bytes(0)
        .build()
        .unwrap();
    let cache = sys.cache();
    sys.io().set_logging(true);
    for trial in 0..5u64 {
        let line = LineId::new(0, 3 + trial);
        let threads = 64;
        let done = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..threads {
                let done = &done;
                s.spawn(move || {
                    let r = cache.probe(line).unwrap();
                    let mut b = [0u8; 8];
                    r.read(0, &mut b).unwrap();
                    drop(r);
                    done.fetch_add(1, Ordering::Release);
                });
            }
            let started = Instant::now();
            while cache.line_meta(line).unwrap().refcount < threads as u32 {
                assert!(started.elapsed() < Duration::from_secs(20));
                thread::yield_now();
            }
            while done.load(Ordering::Acquire) < threads {
                sys.io().device(0).service_step();
                thread::yield_now();
            }
        });
        let reads = sys
            .io()
            .take_log()
            .iter()
            .filter(|e| e.opcode == Opcode::Read)
            .count();
        assert_eq!(reads, 1, "trial {trial}");
        let stats = cache.stats();
        assert_eq!(stats.misses, trial + 1);
    }
}

#[test]
fn concurrent_writers_on_shared_lines_keep_every_element() {
    let sys = System::builder()
        .devices(vec![DeviceProfile::optane_p5800x(); 3])
        .capacity_blocks(1 << 12)
        .cache(512, 64 * 512)
        .scratch_bytes(0)
        .build()
        .unwrap();
    let n = 30_000u64;
    let arr = sys.array_on::<u32>(n, &[0, 1, 2]).unwrap();
    let workers = 6u64;
    thread::scope(|s| {
        for t in 0..workers {
            let arr = &arr;
            s.spawn(move || {
                let idx: Vec<u64> = (t..n).step_by(workers as usize).collect();
                for chunk in idx.chunks(32) {
                    let vals: Vec<u32> = chunk.iter().map(|&i| i as u32 * 3 + 1).collect();
                    arr.write_group(chunk, &vals).unwrap();
                }
            });
        }
    });
    sys.cache().flush_all().unwrap();
    let got = arr.load_direct(0, n).unwrap();
    for (i, v) in got.iter().enumerate() {
        assert_eq!(*v, i as u32 * 3 + 1, "element {i}");
    }
    assert_eq!(sys.cache().live_pins(), 0);
}
