//! Lock-minimal submission/completion queue pair.
//!
//! Many client threads share one SQ/CQ pair. Slots are handed out by an
//! atomic ticket counter (bumped by two per caller); a per-slot turn counter
//! orders successive users of the same physical slot; mark bit-vectors let
//! whichever thread holds the SQ (or CQ) lock move the tail (or head) past a
//! run of finished entries and ring the doorbell once for all of them.
//!
//! Turn counter parity: even means the slot is free for the round `value/2`,
//! odd means a command sits in it waiting for the device to consume it. The
//! enqueuer bumps it to odd after the tail has moved past its entry; the CQ
//! lock holder bumps it to even when a completion reports the SQ head moved
//! past the slot. Both are `fetch_add(1)` so their relative order does not
//! matter.

mod doorbell;
mod marks;

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};
use serde::{Deserialize, Serialize};

pub use doorbell::{Doorbell, DoorbellKind, Signal};
pub use marks::MarkBits;

use crate::error::{Error, Result};
use crate::poll::{PollPolicy, Poller};

pub const MIN_DEPTH: u32 = 2;
pub const MAX_DEPTH: u32 = 65536;

/// Ticket-derived virtual indices live in `[0, 2^31)`.
const VIRT_MASK: u32 = (1 << 31) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IoCommand {
    pub opcode: Opcode,
    /// Assigned by [`QueuePair::enqueue_command`] from the caller's ticket.
    pub cid: u32,
    pub lba: u64,
    pub block_count: u32,
    /// Byte offset into device-visible memory.
    pub buffer_offset: u64,
}

impl IoCommand {
    pub fn read(lba: u64, block_count: u32, buffer_offset: u64) -> Self {
        IoCommand {
            opcode: Opcode::Read,
            cid: 0,
            lba,
            block_count,
            buffer_offset,
        }
    }

    pub fn write(lba: u64, block_count: u32, buffer_offset: u64) -> Self {
        IoCommand {
            opcode: Opcode::Write,
            ..IoCommand::read(lba, block_count, buffer_offset)
        }
    }

    fn pack(&self) -> u64 {
        let op = match self.opcode {
            Opcode::Read => 0u64,
            Opcode::Write => 1u64 << 63,
        };
        op | (u64::from(self.block_count) & 0x7fff_ffff) << 32 | u64::from(self.cid)
    }

    fn unpack(word: u64, lba: u64, buffer_offset: u64) -> Self {
        IoCommand {
            opcode: if word >> 63 == 1 {
                Opcode::Write
            } else {
                Opcode::Read
            },
            cid: word as u32,
            lba,
            block_count: ((word >> 32) & 0x7fff_ffff) as u32,
            buffer_offset,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompletionEntry {
    pub cid: u32,
    pub status: Status,
    /// Device's SQ consumption point when the entry was posted (virtual).
    pub sq_head: u64,
    pub phase: bool,
}

/// A slot reservation returned by [`QueuePair::acquire_slot`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ticket {
    pub raw: u32,
    pub slot: u32,
    pub turn: u32,
}

impl Ticket {
    pub fn from_raw(raw: u32, depth: u32) -> Self {
        let virt = raw / 2;
        Ticket {
            raw,
            slot: virt % depth,
            turn: virt / depth,
        }
    }

    /// Position in the virtual queue; doubles as the command id.
    pub fn virtual_index(&self) -> u32 {
        self.raw / 2
    }
}

/// Whether a slot whose turn counter reads `counter` is open for `turn`.
///
/// The ticket counter wraps at 2^32, so turns wrap at 2^31/depth and the
/// comparison is taken modulo 2^32/depth.
pub fn turn_ready(counter: u32, turn: u32, depth: u32) -> bool {
    let modulus = (1u64 << 32) / u64::from(depth);
    u64::from(counter) % modulus == (2 * u64::from(turn)) % modulus
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubmittedHandle {
    pub cid: u32,
    pub slot: u32,
}

struct SqSlot {
    word: AtomicU64,
    lba: AtomicU64,
    buffer: AtomicU64,
    /// Virtual index of the command last written here.
    stamp: AtomicU32,
    /// Virtual index of the command the device last fetched from here.
    consumed: AtomicU32,
}

struct CqSlot {
    sq_head: AtomicU64,
    /// cid | status << 32 | phase << 33
    tag: AtomicU64,
}

impl CqSlot {
    fn decode(tag: u64, sq_head: u64) -> CompletionEntry {
        CompletionEntry {
            cid: tag as u32,
            status: if tag >> 32 & 1 == 1 {
                Status::Error
            } else {
                Status::Ok
            },
            sq_head,
            phase: tag >> 33 & 1 == 1,
        }
    }
}

fn phase_for(virt: u64, depth: u32) -> bool {
    (virt / u64::from(depth)).is_multiple_of(2)
}

#[derive(Default)]
struct QueueStats {
    submitted: AtomicU64,
    completed: AtomicU64,
    slot_violations: AtomicU64,
}

/// Holds the SQ or CQ lock; required by [`QueuePair::reset_marks`].
pub struct QueueLock<'a> {
    kind: DoorbellKind,
    _guard: MutexGuard<'a, ()>,
}

/// Point-in-time view of a queue pair's protocol state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueueSnapshot {
    pub ticket: u32,
    pub sq_tail: u64,
    pub sq_head: u64,
    pub cq_head: u64,
    pub turn_counters: Vec<u32>,
    pub sq_marks: Vec<bool>,
    pub cq_marks: Vec<bool>,
    pub sq_doorbell: u64,
    pub cq_doorbell: u64,
}

pub struct QueuePair {
    id: u32,
    depth: u32,
    mask: u64,
    ticket: AtomicU32,
    turn_counter: Box<[AtomicU32]>,
    sq: Box<[SqSlot]>,
    cq: Box<[CqSlot]>,
    sq_mark: MarkBits,
    cq_mark: MarkBits,
    sq_tail: AtomicU64,
    sq_head: AtomicU64,
    cq_head: AtomicU64,
    sq_lock: Mutex<()>,
    cq_lock: Mutex<()>,
    sq_doorbell: Doorbell,
    cq_doorbell: Doorbell,
    stats: QueueStats,
    policy: PollPolicy,
}

pub fn check_depth(depth: u32) -> Result<()> {
    if !depth.is_power_of_two() || !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
        return Err(Error::config(format!(
            "queue depth {depth} must be a power of two in [{MIN_DEPTH}, {MAX_DEPTH}]"
        )));
    }
    Ok(())
}

impl QueuePair {
    pub fn new(id: u32, depth: u32, signal: Arc<Signal>, policy: PollPolicy) -> Result<Self> {
        check_depth(depth)?;
        // At most 2·depth commands are in flight (depth queued, depth fetched
        // but not yet reaped), far inside the 2^31 virtual window.
        debug_assert!(2 * u64::from(depth) < u64::from(VIRT_MASK) / 2);
        let sq = (0..depth)
            .map(|e| SqSlot {
                word: AtomicU64::new(0),
                lba: AtomicU64::new(0),
                buffer: AtomicU64::new(0),
                stamp: AtomicU32::new(e.wrapping_sub(depth) & VIRT_MASK),
                consumed: AtomicU32::new(e.wrapping_sub(depth) & VIRT_MASK),
            })
            .collect();
        let cq = (0..depth)
            .map(|_| CqSlot {
                sq_head: AtomicU64::new(0),
                tag: AtomicU64::new(0),
            })
            .collect();
        Ok(QueuePair {
            id,
            depth,
            mask: u64::from(depth) - 1,
            ticket: AtomicU32::new(0),
            turn_counter: (0..depth).map(|_| AtomicU32::new(0)).collect(),
            sq,
            cq,
            sq_mark: MarkBits::new(depth as usize),
            cq_mark: MarkBits::new(depth as usize),
            sq_tail: AtomicU64::new(0),
            sq_head: AtomicU64::new(0),
            cq_head: AtomicU64::new(0),
            sq_lock: Mutex::new(()),
            cq_lock: Mutex::new(()),
            sq_doorbell: Doorbell::new(signal.clone()),
            cq_doorbell: Doorbell::new(signal),
            stats: QueueStats::default(),
            policy,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    #[inline]
    fn pos(&self, virt: u64) -> usize {
        (virt & self.mask) as usize
    }

    pub fn acquire_slot(&self) -> Ticket {
        let raw = self.ticket.fetch_add(2, Ordering::AcqRel);
        Ticket::from_raw(raw, self.depth)
    }

    /// Wait for the ticket's turn, publish `cmd` in its slot and return once
    /// the SQ tail has moved past it.
    pub fn enqueue_command(&self, t: Ticket, mut cmd: IoCommand) -> Result<SubmittedHandle> {
        let slot = t.slot as usize;
        let virt = t.virtual_index();
        cmd.cid = virt;

        let mut poller = Poller::new(self.policy, "submission slot turn");
        while !turn_ready(
            self.turn_counter[slot].load(Ordering::Acquire),
            t.turn,
            self.depth,
        ) {
            poller.wait()?;
        }

        let entry = &self.sq[slot];
        if entry.consumed.load(Ordering::Acquire) != virt.wrapping_sub(self.depth) & VIRT_MASK {
            self.stats.slot_violations.fetch_add(1, Ordering::Relaxed);
        }
        entry.lba.store(cmd.lba, Ordering::Relaxed);
        entry.buffer.store(cmd.buffer_offset, Ordering::Relaxed);
        entry.word.store(cmd.pack(), Ordering::Relaxed);
        entry.stamp.store(virt, Ordering::Release);
        self.sq_mark.set(slot);

        self.move_tail(t.slot)?;
        self.turn_counter[slot].fetch_add(1, Ordering::AcqRel);
        self.stats.submitted.fetch_add(1, Ordering::Relaxed);
        Ok(SubmittedHandle {
            cid: virt,
            slot: t.slot,
        })
    }

    pub fn try_lock(&self, kind: DoorbellKind) -> Option<QueueLock<'_>> {
        let lock = match kind {
            DoorbellKind::SqTail => &self.sq_lock,
            DoorbellKind::CqHead => &self.cq_lock,
        };
        lock.try_lock().map(|g| QueueLock { kind, _guard: g })
    }

    /// Keep trying to take the SQ lock and advance the tail until the mark
    /// at `my_slot` has been consumed by some lock holder.
    pub fn move_tail(&self, my_slot: u32) -> Result<()> {
        let mut poller = Poller::new(self.policy, "submission tail movement");
        while self.sq_mark.is_set(my_slot as usize) {
            let mut moved = false;
            if let Some(lock) = self.try_lock(DoorbellKind::SqTail) {
                let tail = self.sq_tail.load(Ordering::Acquire);
                let count = self.reset_marks(&lock, tail);
                if count > 0 {
                    let new_tail = tail + count;
                    self.sq_tail.store(new_tail, Ordering::Release);
                    self.ring(DoorbellKind::SqTail, new_tail)?;
                    moved = true;
                }
            }
            if moved {
                poller.progressed();
            } else {
                poller.wait()?;
            }
        }
        Ok(())
    }

    /// Clear the run of set marks starting at virtual position `from` and
    /// return its length. On the SQ the walk also stops at `head + depth`.
    pub fn reset_marks(&self, lock: &QueueLock<'_>, from: u64) -> u64 {
        let (marks, limit) = match lock.kind {
            DoorbellKind::SqTail => (
                &self.sq_mark,
                self.sq_head.load(Ordering::Acquire) + u64::from(self.depth),
            ),
            DoorbellKind::CqHead => (&self.cq_mark, from + u64::from(self.depth)),
        };
        let mut count = 0;
        while from + count < limit && marks.test_and_clear(self.pos(from + count)) {
            count += 1;
        }
        count
    }

    fn ring(&self, kind: DoorbellKind, value: u64) -> Result<()> {
        let db = match kind {
            DoorbellKind::SqTail => &self.sq_doorbell,
            DoorbellKind::CqHead => &self.cq_doorbell,
        };
        db.ring(value).map_err(|last| Error::DoorbellRegression {
            queue: self.id,
            kind,
            value,
            last,
        })
    }

    /// Look for a posted completion with `cid` without blocking.
    fn find_completion(&self, cid: u32) -> Option<(u64, CompletionEntry)> {
        let head = self.cq_head.load(Ordering::Acquire);
        for virt in head..head + u64::from(self.depth) {
            let slot = &self.cq[self.pos(virt)];
            let tag = slot.tag.load(Ordering::Acquire);
            let entry = CqSlot::decode(tag, slot.sq_head.load(Ordering::Relaxed));
            if entry.phase != phase_for(virt, self.depth) {
                break;
            }
            if entry.cid == cid {
                // The scan may have straddled a head move; the position is
                // only trustworthy if the head has not passed it.
                if self.cq_head.load(Ordering::Acquire) <= virt {
                    return Some((virt, entry));
                }
                return None;
            }
        }
        None
    }

    /// Wait for the completion of `h`, mark its CQ entry consumed and help
    /// move the CQ head (and, through it, the SQ head) forward.
    pub fn poll_completion(&self, h: SubmittedHandle) -> Result<CompletionEntry> {
        let mut poller = Poller::new(self.policy, "completion poll");
        let (virt, entry) = loop {
            match self.find_completion(h.cid) {
                Some(found) => break found,
                None => poller.wait()?,
            }
        };
        self.cq_mark.set(self.pos(virt));
        self.move_cq_head(virt)?;
        self.stats.completed.fetch_add(1, Ordering::Relaxed);
        Ok(entry)
    }

    fn move_cq_head(&self, my_virt: u64) -> Result<()> {
        let mut poller = Poller::new(self.policy, "completion head movement");
        while self.cq_head.load(Ordering::Acquire) <= my_virt {
            let mut moved = false;
            if let Some(lock) = self.try_lock(DoorbellKind::CqHead) {
                let head = self.cq_head.load(Ordering::Acquire);
                let count = self.reset_marks(&lock, head);
                if count > 0 {
                    let new_head = head + count;
                    let last = &self.cq[self.pos(new_head - 1)];
                    let new_sq_head = last.sq_head.load(Ordering::Relaxed);
                    self.cq_head.store(new_head, Ordering::Release);
                    self.ring(DoorbellKind::CqHead, new_head)?;
                    self.advance_sq_head(new_sq_head);
                    moved = true;
                }
            }
            if moved {
                poller.progressed();
            } else {
                poller.wait()?;
            }
        }
        Ok(())
    }

    /// Called with the CQ lock held.
    fn advance_sq_head(&self, new_head: u64) {
        let old = self.sq_head.load(Ordering::Acquire);
        if new_head <= old {
            return;
        }
        self.sq_head.store(new_head, Ordering::Release);
        for virt in old..new_head {
            self.turn_counter[self.pos(virt)].fetch_add(1, Ordering::AcqRel);
        }
    }

    /// acquire_slot, enqueue_command and poll_completion in sequence.
    pub fn submit_and_wait(&self, cmd: IoCommand) -> Result<CompletionEntry> {
        let t = self.acquire_slot();
        let h = self.enqueue_command(t, cmd)?;
        self.poll_completion(h)
    }

    pub fn sq_doorbell(&self) -> &Doorbell {
        &self.sq_doorbell
    }

    pub fn cq_doorbell(&self) -> &Doorbell {
        &self.cq_doorbell
    }

    pub fn doorbell(&self, kind: DoorbellKind) -> &Doorbell {
        match kind {
            DoorbellKind::SqTail => &self.sq_doorbell,
            DoorbellKind::CqHead => &self.cq_doorbell,
        }
    }

    pub fn doorbell_rings(&self) -> u64 {
        self.sq_doorbell.rings() + self.cq_doorbell.rings()
    }

    pub fn doorbell_regressions(&self) -> u64 {
        self.sq_doorbell.regressions() + self.cq_doorbell.regressions()
    }

    pub fn slot_violations(&self) -> u64 {
        self.stats.slot_violations.load(Ordering::Relaxed)
    }

    pub fn submitted(&self) -> u64 {
        self.stats.submitted.load(Ordering::Relaxed)
    }

    pub fn completed(&self) -> u64 {
        self.stats.completed.load(Ordering::Relaxed)
    }

    pub fn sq_tail(&self) -> u64 {
        self.sq_tail.load(Ordering::Acquire)
    }

    pub fn sq_head(&self) -> u64 {
        self.sq_head.load(Ordering::Acquire)
    }

    pub fn cq_head(&self) -> u64 {
        self.cq_head.load(Ordering::Acquire)
    }

    pub fn turn_counter(&self, slot: u32) -> u32 {
        self.turn_counter[slot as usize].load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            ticket: self.ticket.load(Ordering::Acquire),
            sq_tail: self.sq_tail(),
            sq_head: self.sq_head(),
            cq_head: self.cq_head(),
            turn_counters: (0..self.depth).map(|s| self.turn_counter(s)).collect(),
            sq_marks: self.sq_mark.to_vec(),
            cq_marks: self.cq_mark.to_vec(),
            sq_doorbell: self.sq_doorbell.value(),
            cq_doorbell: self.cq_doorbell.value(),
        }
    }

    // Device side. These are only called by the owning device.

    /// Read the command at virtual SQ position `virt`, checking its stamp.
    pub(crate) fn device_fetch(&self, virt: u64) -> IoCommand {
        let entry = &self.sq[self.pos(virt)];
        let expect = (virt as u32) & VIRT_MASK;
        if entry.stamp.load(Ordering::Acquire) != expect {
            self.stats.slot_violations.fetch_add(1, Ordering::Relaxed);
        }
        let cmd = IoCommand::unpack(
            entry.word.load(Ordering::Relaxed),
            entry.lba.load(Ordering::Relaxed),
            entry.buffer.load(Ordering::Relaxed),
        );
        entry.consumed.store(expect, Ordering::Release);
        cmd
    }

    /// Write a completion at virtual CQ position `virt`.
    pub(crate) fn device_post(&self, virt: u64, cid: u32, status: Status, sq_head: u64) {
        let slot = &self.cq[self.pos(virt)];
        let phase = phase_for(virt, self.depth);
        let tag = u64::from(cid)
            | u64::from(status == Status::Error) << 32
            | u64::from(phase) << 33;
        slot.sq_head.store(sq_head, Ordering::Relaxed);
        slot.tag.store(tag, Ordering::Release);
    }
}

impl std::fmt::Debug for QueuePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QueuePair")
            .field("id", &self.id)
            .field("depth", &self.depth)
            .field("sq_tail", &self.sq_tail())
            .field("sq_head", &self.sq_head())
            .field("cq_head", &self.cq_head())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(depth: u32) -> QueuePair {
        QueuePair::new(0, depth, Signal::new(), PollPolicy::default()).unwrap()
    }

    #[test]
    fn ticket_arithmetic() {
        assert_eq!(
            Ticket::from_raw(0, 128),
            Ticket {
                raw: 0,
                slot: 0,
                turn: 0
            }
        );
        let t = Ticket::from_raw(260, 128);
        assert_eq!((t.slot, t.turn), (2, 1));
        for raw in (0..100_000u32).step_by(2) {
            let t = Ticket::from_raw(raw, 64);
            assert_eq!(raw, 2 * (t.turn * 64 + t.slot));
        }
    }

    #[test]
    fn first_callers_get_sequential_tickets() {
        let q = qp(128);
        let tickets: Vec<_> = (0..131).map(|_| q.acquire_slot()).collect();
        assert_eq!(tickets[0].raw, 0);
        assert_eq!((tickets[130].raw, tickets[130].slot, tickets[130].turn), (260, 2, 1));
    }

    #[test]
    fn turn_ready_survives_counter_wrap() {
        let depth = 1024;
        let last_turn = (1u32 << 31) / depth - 1;
        // Counter after exactly `last_turn` full rounds.
        let counter = 2 * last_turn;
        assert!(turn_ready(counter, last_turn, depth));
        // One more round wraps the turn back to zero.
        assert!(turn_ready(counter.wrapping_add(2), 0, depth));
        assert!(!turn_ready(counter.wrapping_add(1), 0, depth));
        // Raw counter wrapping at 2^32 keeps agreeing.
        assert!(turn_ready(0u32.wrapping_sub(2).wrapping_add(2), 0, depth));
    }

    #[test]
    fn depth_validation() {
        for bad in [0, 1, 3, 100, 131072] {
            assert!(check_depth(bad).is_err(), "{bad}");
        }
        for good in [2, 8, 1024, 65536] {
            assert!(check_depth(good).is_ok());
        }
    }

    #[test]
    fn reset_marks_stops_at_first_gap() {
        let q = qp(8);
        for s in [0, 1, 2, 4] {
            q.sq_mark.set(s);
        }
        let lock = q.try_lock(DoorbellKind::SqTail).unwrap();
        assert_eq!(q.reset_marks(&lock, 0), 3);
        assert_eq!(q.sq_mark.to_vec(), [false, false, false, false, true, false, false, false]);
        assert_eq!(q.reset_marks(&lock, 3), 0);
    }

    #[test]
    fn reset_marks_all_clear() {
        let q = qp(8);
        let lock = q.try_lock(DoorbellKind::CqHead).unwrap();
        assert_eq!(q.reset_marks(&lock, 0), 0);
    }

    #[test]
    fn reset_marks_bounded_by_head_plus_depth() {
        let q = qp(4);
        for s in 0..4 {
            q.sq_mark.set(s);
        }
        let lock = q.try_lock(DoorbellKind::SqTail).unwrap();
        assert_eq!(q.reset_marks(&lock, 0), 4);
        // Full queue: another pass from tail=4 with head=0 may not move.
        q.sq_mark.set(0);
        assert_eq!(q.reset_marks(&lock, 4), 0);
        assert!(q.sq_mark.is_set(0));
    }

    #[test]
    fn move_tail_with_gap_does_not_advance() {
        let q = qp(8);
        q.sq_mark.set(1);
        {
            let lock = q.try_lock(DoorbellKind::SqTail).unwrap();
            assert_eq!(q.reset_marks(&lock, q.sq_tail()), 0);
        }
        assert_eq!(q.sq_tail(), 0);
        assert_eq!(q.sq_doorbell.rings(), 0);
    }

    #[test]
    fn coalesced_tail_move_rings_once() {
        let q = qp(8);
        for s in 0..5 {
            q.sq_mark.set(s);
        }
        q.move_tail(4).unwrap();
        assert_eq!(q.sq_tail(), 5);
        assert_eq!(q.sq_doorbell.rings(), 1);
        assert_eq!(q.sq_doorbell.value(), 5);
    }

    #[test]
    fn command_packing() {
        let c = IoCommand {
            opcode: Opcode::Write,
            cid: 0x7abc_dead,
            lba: 99,
            block_count: 8,
            buffer_offset: 4096,
        };
        assert_eq!(IoCommand::unpack(c.pack(), 99, 4096), c);
    }
}
