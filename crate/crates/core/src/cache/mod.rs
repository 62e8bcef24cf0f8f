//! Fully associative write-back software cache over device blocks.
//!
//! Every line of every device has one state word in a lazily allocated
//! directory:
//!
//! ```text
//!  63     61..62   32..60     0..31
//! dirty | state | refcount | slot
//! ```
//!
//! States are INVALID, FETCHING, VALID and WRITEBACK (the latter two BUSY
//! flavours of the usual three-state machine). Hits are a single CAS on the
//! word. A miss CASes INVALID to FETCHING, which makes the caller the only
//! thread that will fetch the line; concurrent probers add their pins to the
//! FETCHING word and wait for it to turn VALID, so the published refcount
//! already counts them. A failed fetch leaves INVALID with the waiters' pins
//! in place; each waiter removes its own pins, and no new fetch starts until
//! they are gone.
//!
//! Slots are chosen by a clock hand shared by all evictors. A slot is
//! reusable if it is empty or its line is VALID with no pins; the evictor
//! moves that line to WRITEBACK, writes it back if dirty, remaps the slot
//! and finally invalidates the old line.

mod directory;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use self::directory::LineDirectory;
use crate::error::{Error, Result};
use crate::io::IoStack;
use crate::memory::{Region, BLOCK_SIZE};
use crate::poll::{PollPolicy, Poller};
use crate::scalar::Element;

const SLOT_MASK: u64 = 0xffff_ffff;
const RC_SHIFT: u32 = 32;
const RC_MASK: u64 = (1 << 29) - 1;
const STATE_SHIFT: u32 = 61;
const STATE_MASK: u64 = 0b11 << STATE_SHIFT;
const DIRTY: u64 = 1 << 63;

const EMPTY: u64 = u64::MAX;

/// Clock passes over all slots before an evictor starts backing off.
pub const DEFAULT_CLOCK_PASSES: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineState {
    Invalid,
    Fetching,
    Valid,
    Writeback,
}

impl LineState {
    fn of(word: u64) -> Self {
        match (word & STATE_MASK) >> STATE_SHIFT {
            0 => LineState::Invalid,
            1 => LineState::Fetching,
            2 => LineState::Valid,
            _ => LineState::Writeback,
        }
    }

    fn bits(self) -> u64 {
        let v = match self {
            LineState::Invalid => 0,
            LineState::Fetching => 1,
            LineState::Valid => 2,
            LineState::Writeback => 3,
        };
        v << STATE_SHIFT
    }
}

#[inline]
fn refcount(word: u64) -> u64 {
    (word >> RC_SHIFT) & RC_MASK
}

#[inline]
fn slot_of(word: u64) -> u32 {
    (word & SLOT_MASK) as u32
}

#[inline]
fn with_state(word: u64, state: LineState) -> u64 {
    (word & !STATE_MASK) | state.bits()
}

#[inline]
fn with_refcount(word: u64, rc: u64) -> u64 {
    debug_assert!(rc <= RC_MASK, "refcount overflow");
    (word & !(RC_MASK << RC_SHIFT)) | (rc << RC_SHIFT)
}

#[inline]
fn with_slot(word: u64, slot: u32) -> u64 {
    (word & !SLOT_MASK) | u64::from(slot)
}

/// A line of backing storage: device and line-sized index on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LineId {
    pub device: u32,
    pub index: u64,
}

impl LineId {
    pub fn new(device: u32, index: u64) -> Self {
        LineId { device, index }
    }

    fn key(self) -> u64 {
        (u64::from(self.device) << 48) | self.index
    }

    fn from_key(key: u64) -> Self {
        LineId {
            device: (key >> 48) as u32,
            index: key & ((1 << 48) - 1),
        }
    }
}

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.device, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub line_size: u64,
    pub num_slots: u32,
}

impl CacheConfig {
    pub fn new(line_size: u64, capacity_bytes: u64) -> Result<Self> {
        let cfg = CacheConfig {
            line_size,
            num_slots: u32::try_from(capacity_bytes / line_size.max(1))
                .map_err(|_| Error::config("cache has too many slots"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.line_size * u64::from(self.num_slots)
    }

    pub fn blocks_per_line(&self) -> u32 {
        (self.line_size / BLOCK_SIZE as u64) as u32
    }

    pub fn validate(&self) -> Result<()> {
        if !self.line_size.is_power_of_two() || self.line_size < BLOCK_SIZE as u64 {
            return Err(Error::config(format!(
                "line size {} must be a power of two >= {BLOCK_SIZE}",
                self.line_size
            )));
        }
        if self.num_slots == 0 {
            return Err(Error::config("cache needs at least one slot"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub pin_violations: u64,
}

#[derive(Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    writebacks: AtomicU64,
    pin_violations: AtomicU64,
}

pub struct Cache {
    io: Arc<IoStack>,
    config: CacheConfig,
    region: Region,
    owners: Box<[AtomicU64]>,
    directory: LineDirectory,
    hand: AtomicU64,
    counters: Counters,
    policy: PollPolicy,
    clock_passes: u32,
}

impl Cache {
    pub fn new(io: Arc<IoStack>, config: CacheConfig, policy: PollPolicy) -> Result<Self> {
        config.validate()?;
        let region = io
            .memory()
            .alloc(config.capacity_bytes(), config.line_size)?;
        let bpl = u64::from(config.blocks_per_line());
        let lines: Vec<u64> = io
            .devices()
            .iter()
            .map(|d| d.capacity_blocks() / bpl)
            .collect();
        Ok(Cache {
            directory: LineDirectory::new(&lines),
            owners: (0..config.num_slots).map(|_| AtomicU64::new(EMPTY)).collect(),
            hand: AtomicU64::new(0),
            counters: Counters::default(),
            clock_passes: DEFAULT_CLOCK_PASSES,
            io,
            config,
            region,
            policy,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn io(&self) -> &Arc<IoStack> {
        &self.io
    }

    pub fn line_size(&self) -> u64 {
        self.config.line_size
    }

    fn word(&self, line: LineId) -> Result<&AtomicU64> {
        if !self.directory.contains(line.device, line.index) {
            return Err(Error::OutOfRange {
                what: "cache line",
                index: line.index,
                limit: self
                    .io
                    .devices()
                    .get(line.device as usize)
                    .map_or(0, |d| d.capacity_blocks() / u64::from(self.config.blocks_per_line())),
            });
        }
        Ok(self.directory.word(line.device, line.index))
    }

    fn slot_offset(&self, slot: u32) -> u64 {
        self.region.offset + u64::from(slot) * self.config.line_size
    }

    fn lba(&self, line: LineId) -> u64 {
        line.index * u64::from(self.config.blocks_per_line())
    }

    /// Pin `line` once.
    pub fn probe(&self, line: LineId) -> Result<LineRef<'_>> {
        let slot = self.acquire(line, 1)?;
        Ok(LineRef::new(self, line, slot))
    }

    /// Coalesced probe for a group of requesters: each distinct line is
    /// probed once by its first requester with one pin per member, and
    /// every member gets its own reference. Output order matches `lines`.
    pub fn probe_group(&self, lines: &[LineId]) -> Result<Vec<LineRef<'_>>> {
        let mut groups: HashMap<LineId, (u32, u32)> = HashMap::with_capacity(lines.len());
        let mut leaders = Vec::new();
        for &l in lines {
            groups
                .entry(l)
                .and_modify(|g| g.0 += 1)
                .or_insert_with(|| {
                    leaders.push(l);
                    (1, 0)
                });
        }
        for l in &leaders {
            let g = groups.get_mut(l).unwrap();
            match self.acquire(*l, g.0) {
                Ok(slot) => g.1 = slot,
                Err(e) => {
                    // Leaders that already succeeded hand their pins back.
                    for done in leaders.iter().take_while(|d| *d != l) {
                        let (pins, _) = groups[done];
                        for _ in 0..pins {
                            let _ = self.release_raw(*done);
                        }
                    }
                    return Err(e);
                }
            }
        }
        Ok(lines
            .iter()
            .map(|l| LineRef::new(self, *l, groups[l].1))
            .collect())
    }

    /// Add `pins` references to `line`, fetching it if needed; returns its slot.
    fn acquire(&self, line: LineId, pins: u32) -> Result<u32> {
        let word = self.word(line)?;
        let pins = u64::from(pins.max(1));
        let mut poller = Poller::new(self.policy, "cache line state");
        loop {
            let w = word.load(Ordering::Acquire);
            match LineState::of(w) {
                LineState::Valid => {
                    let next = with_refcount(w, refcount(w) + pins);
                    if word
                        .compare_exchange_weak(w, next, Ordering::AcqRel, Ordering::Acquire)
                        .is_ok()
                    {
                        self.counters.hits.fetch_add(1, Ordering::Relaxed);
                        return Ok(slot_of(w));
                    }
                }
                LineState::Invalid if refcount(w) == 0 => {
                    let next = with_refcount(LineState::Fetching.bits(), pins);
                    if word
                        .compare_exchange(w, next, Ordering::AcqRel, Ordering::Acquire)
                        .is_ok()
                    {
                        return self.fetch(line, word, pins);
                    }
                }
                LineState::Fetching => {
                    let next = with_refcount(w, refcount(w) + pins);
                    if word
                        .compare_exchange_weak(w, next, Ordering::AcqRel, Ordering::Acquire)
                        .is_ok()
                    {
                        self.counters.hits.fetch_add(1, Ordering::Relaxed);
                        return self.await_fetch(line, word, pins);
                    }
                }
                // Draining a failed fetch, or being written back.
                LineState::Invalid | LineState::Writeback => poller.wait()?,
            }
        }
    }

    fn await_fetch(&self, line: LineId, word: &AtomicU64, pins: u64) -> Result<u32> {
        let mut poller = Poller::new(self.policy, "shared line fetch");
        loop {
            let w = word.load(Ordering::Acquire);
            match LineState::of(w) {
                LineState::Fetching => poller.wait()?,
                LineState::Valid => return Ok(slot_of(w)),
                LineState::Invalid => {
                    let _ = word.fetch_update(Ordering::AcqRel, Ordering::Acquire, |w| {
                        Some(with_refcount(w, refcount(w) - pins))
                    });
                    return Err(Error::FetchFailed {
                        line: line.to_string(),
                    });
                }
                LineState::Writeback => unreachable!("pinned line {line} entered writeback"),
            }
        }
    }

    /// Called by the thread that moved `line` to FETCHING.
    fn fetch(&self, line: LineId, word: &AtomicU64, pins: u64) -> Result<u32> {
        let outcome = self.evict_victim(line).and_then(|slot| {
            let r = self.io.read(
                line.device as usize,
                self.lba(line),
                self.config.blocks_per_line(),
                self.slot_offset(slot),
            );
            if r.is_err() {
                self.owners[slot as usize].store(EMPTY, Ordering::Release);
            }
            r.map(|_| slot)
        });
        match outcome {
            Ok(slot) => {
                self.counters.misses.fetch_add(1, Ordering::Relaxed);
                let _ = word.fetch_update(Ordering::AcqRel, Ordering::Acquire, |w| {
                    Some(with_slot(with_state(w, LineState::Valid), slot) & !DIRTY)
                });
                Ok(slot)
            }
            Err(e) => {
                let _ = word.fetch_update(Ordering::AcqRel, Ordering::Acquire, |w| {
                    Some(with_refcount(with_state(w, LineState::Invalid), refcount(w) - pins))
                });
                Err(e)
            }
        }
    }

    /// Advance the clock until a slot can be taken for `incoming`; writes
    /// back the evicted line first if it is dirty. Returns the slot, now
    /// owned by `incoming`.
    pub fn evict_victim(&self, incoming: LineId) -> Result<u32> {
        let n = u64::from(self.config.num_slots);
        let mut examined = 0u64;
        let mut poller = Poller::new(self.policy, "cache eviction (all lines pinned)");
        loop {
            let slot = (self.hand.fetch_add(1, Ordering::AcqRel) % n) as u32;
            if self.try_claim(slot, Some(incoming))?.is_some() {
                return Ok(slot);
            }
            examined += 1;
            if examined >= n * u64::from(self.clock_passes) {
                poller.wait()?;
            }
        }
    }

    /// Evict the next unpinned line under the clock hand, leaving its slot
    /// empty. Gives up after one full rotation.
    pub fn evict_one(&self) -> Result<Option<LineId>> {
        let n = u64::from(self.config.num_slots);
        for _ in 0..n {
            let slot = (self.hand.fetch_add(1, Ordering::AcqRel) % n) as u32;
            if let Some(prev) = self.try_claim(slot, None)? {
                return Ok(Some(LineId::from_key(prev)));
            }
        }
        Ok(None)
    }

    /// Take `slot` for `incoming`, or empty it when `incoming` is `None`.
    /// Returns the previous owner key (`EMPTY` if there was none) on success.
    fn try_claim(&self, slot: u32, incoming: Option<LineId>) -> Result<Option<u64>> {
        let owner = &self.owners[slot as usize];
        let current = owner.load(Ordering::Acquire);
        let next = incoming.map_or(EMPTY, LineId::key);
        if current == EMPTY {
            let ok = incoming.is_some()
                && owner
                    .compare_exchange(EMPTY, next, Ordering::AcqRel, Ordering::Acquire)
                    .is_ok();
            return Ok(ok.then_some(EMPTY));
        }
        let victim = LineId::from_key(current);
        let word = self.directory.word(victim.device, victim.index);
        let w = word.load(Ordering::Acquire);
        if LineState::of(w) != LineState::Valid || refcount(w) != 0 || slot_of(w) != slot {
            return Ok(None);
        }
        if word
            .compare_exchange(
                w,
                with_state(w, LineState::Writeback),
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_err()
        {
            return Ok(None);
        }
        if w & DIRTY != 0 {
            if let Err(e) = self.write_back(victim, slot) {
                word.store(w, Ordering::Release);
                return Err(e);
            }
        }
        owner.store(next, Ordering::Release);
        word.store(0, Ordering::Release);
        self.counters.evictions.fetch_add(1, Ordering::Relaxed);
        Ok(Some(current))
    }

    fn write_back(&self, line: LineId, slot: u32) -> Result<()> {
        self.io.write(
            line.device as usize,
            self.lba(line),
            self.config.blocks_per_line(),
            self.slot_offset(slot),
        )?;
        self.counters.writebacks.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Drop one pin on `line`. Fails if the line holds no pins.
    pub fn release_raw(&self, line: LineId) -> Result<()> {
        let word = self.word(line)?;
        word.fetch_update(Ordering::AcqRel, Ordering::Acquire, |w| {
            (LineState::of(w) == LineState::Valid && refcount(w) > 0)
                .then(|| with_refcount(w, refcount(w) - 1))
        })
        .map(|_| ())
        .map_err(|_| Error::DoubleRelease {
            line: line.to_string(),
        })
    }

    /// Write `line` back if it is VALID and dirty. Returns whether a write
    /// was issued.
    pub fn flush_line(&self, line: LineId) -> Result<bool> {
        let word = self.word(line)?;
        // Pin while writing so the slot cannot be recycled under the write.
        let pinned = word.fetch_update(Ordering::AcqRel, Ordering::Acquire, |w| {
            (LineState::of(w) == LineState::Valid && w & DIRTY != 0)
                .then(|| with_refcount(w, refcount(w) + 1) & !DIRTY)
        });
        let Ok(w) = pinned else {
            return Ok(false);
        };
        let result = self.write_back(line, slot_of(w));
        if result.is_err() {
            word.fetch_or(DIRTY, Ordering::AcqRel);
        }
        self.release_raw(line)?;
        result.map(|_| true)
    }

    /// Write back every dirty line; returns how many were written.
    pub fn flush_all(&self) -> Result<u64> {
        let mut written = 0;
        for owner in self.owners.iter() {
            let key = owner.load(Ordering::Acquire);
            if key != EMPTY && self.flush_line(LineId::from_key(key))? {
                written += 1;
            }
        }
        Ok(written)
    }

    pub fn stats(&self) -> CacheStats {
        let c = &self.counters;
        CacheStats {
            hits: c.hits.load(Ordering::Relaxed),
            misses: c.misses.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
            writebacks: c.writebacks.load(Ordering::Relaxed),
            pin_violations: c.pin_violations.load(Ordering::Relaxed),
        }
    }

    /// State, refcount and dirty flag of `line`.
    pub fn line_meta(&self, line: LineId) -> Result<LineMeta> {
        let w = self.word(line)?.load(Ordering::Acquire);
        Ok(LineMeta {
            state: LineState::of(w),
            refcount: refcount(w) as u32,
            dirty: w & DIRTY != 0,
            slot: matches!(LineState::of(w), LineState::Valid | LineState::Writeback)
                .then(|| slot_of(w)),
        })
    }

    /// Which line each slot currently maps, if any.
    pub fn slot_owner(&self, slot: u32) -> Option<LineId> {
        match self.owners[slot as usize].load(Ordering::Acquire) {
            EMPTY => None,
            k => Some(LineId::from_key(k)),
        }
    }

    /// Sum of refcounts over all mapped lines.
    pub fn live_pins(&self) -> u64 {
        (0..self.config.num_slots)
            .filter_map(|s| self.slot_owner(s))
            .map(|l| refcount(self.directory.word(l.device, l.index).load(Ordering::Acquire)))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineMeta {
    pub state: LineState,
    pub refcount: u32,
    pub dirty: bool,
    pub slot: Option<u32>,
}

/// A pinned cache line. Dropping it releases the pin.
pub struct LineRef<'a> {
    cache: &'a Cache,
    line: LineId,
    slot: u32,
    live: bool,
}

impl<'a> LineRef<'a> {
    fn new(cache: &'a Cache, line: LineId, slot: u32) -> Self {
        LineRef {
            cache,
            line,
            slot,
            live: true,
        }
    }

    pub fn line(&self) -> LineId {
        self.line
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }

    fn check(&self, offset: u64, len: usize) -> Result<()> {
        let end = offset + len as u64;
        if end > self.cache.config.line_size {
            return Err(Error::OutOfRange {
                what: "line offset",
                index: end,
                limit: self.cache.config.line_size,
            });
        }
        Ok(())
    }

    pub fn read(&self, offset: u64, out: &mut [u8]) -> Result<()> {
        self.check(offset, out.len())?;
        self.cache
            .io
            .memory()
            .read(self.cache.slot_offset(self.slot) + offset, out)
    }

    pub fn write(&self, offset: u64, src: &[u8]) -> Result<()> {
        self.check(offset, src.len())?;
        self.cache
            .io
            .memory()
            .write(self.cache.slot_offset(self.slot) + offset, src)?;
        let word = self.cache.directory.word(self.line.device, self.line.index);
        word.fetch_or(DIRTY, Ordering::AcqRel);
        Ok(())
    }

    pub fn read_element<T: Element>(&self, offset: u64) -> Result<T> {
        let mut buf = [0u8; 16];
        self.read(offset, &mut buf[..T::SIZE])?;
        Ok(T::read_le(&buf))
    }

    pub fn write_element<T: Element>(&self, offset: u64, value: T) -> Result<()> {
        let mut buf = [0u8; 16];
        value.write_le(&mut buf);
        self.write(offset, &buf[..T::SIZE])
    }

    /// Take an extra pin on the same line.
    pub fn share(&self) -> LineRef<'a> {
        let word = self.cache.directory.word(self.line.device, self.line.index);
        word.fetch_update(Ordering::AcqRel, Ordering::Acquire, |w| {
            Some(with_refcount(w, refcount(w) + 1))
        })
        .expect("infallible update");
        LineRef::new(self.cache, self.line, self.slot)
    }

    pub fn release(mut self) -> Result<()> {
        self.live = false;
        self.release_inner()
    }

    fn release_inner(&self) -> Result<()> {
        let word = self.cache.directory.word(self.line.device, self.line.index);
        let w = word.load(Ordering::Acquire);
        if LineState::of(w) != LineState::Valid
            || slot_of(w) != self.slot
            || self.cache.slot_owner(self.slot) != Some(self.line)
        {
            self.cache
                .counters
                .pin_violations
                .fetch_add(1, Ordering::Relaxed);
        }
        self.cache.release_raw(self.line)
    }
}

impl Drop for LineRef<'_> {
    fn drop(&mut self) {
        if self.live {
            self.live = false;
            let _ = self.release_inner();
        }
    }
}

impl fmt::Debug for LineRef<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LineRef")
            .field("line", &self.line)
            .field("slot", &self.slot)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::system::System;

    fn system(line: u64, slots: u64) -> System {
        System::builder()
            .capacity_blocks(1 << 12)
            .cache(line, line * slots)
            .scratch_bytes(0)
            .build()
            .unwrap()
    }

    fn reads(sys: &System) -> u64 {
        sys.io().stats().device.reads
    }

    #[test]
    fn second_probe_hits() {
        let sys = system(512, 4);
        let c = sys.cache();
        let l = LineId::new(0, 3);
        c.probe(l).unwrap().release().unwrap();
        let r = c.probe(l).unwrap();
        assert_eq!(c.line_meta(l).unwrap().refcount, 1);
        drop(r);
        assert_eq!(reads(&sys), 1);
        let s = c.stats();
        assert_eq!((s.hits, s.misses), (1, 1));
        assert_eq!(c.live_pins(), 0);
    }

    #[test]
    fn dirty_lines_reach_storage_on_eviction_and_flush() {
        let sys = system(512, 1);
        let c = sys.cache();
        let (a, b) = (LineId::new(0, 1), LineId::new(0, 2));
        c.probe(a).unwrap().write_element(8, 0xabcdu64).unwrap();
        assert!(c.line_meta(a).unwrap().dirty);
        // Only one slot, so fetching b evicts a.
        assert_eq!(c.probe(b).unwrap().read_element::<u64>(0).unwrap(), 0);
        let stored = sys.io().device(0).store().snapshot(1, 1).unwrap();
        assert_eq!(u64::from_le_bytes(stored[8..16].try_into().unwrap()), 0xabcd);
        assert_eq!(c.stats().writebacks, 1);

        c.probe(b).unwrap().write(0, &[7; 4]).unwrap();
        assert_eq!(c.flush_all().unwrap(), 1);
        assert_eq!(c.flush_all().unwrap(), 0);
        assert_eq!(&sys.io().device(0).store().snapshot(2, 1).unwrap()[..5], &[7, 7, 7, 7, 0]);
    }

    #[test]
    fn releasing_an_unpinned_line_fails() {
        let sys = system(512, 2);
        let c = sys.cache();
        let l = LineId::new(0, 0);
        c.probe(l).unwrap().release().unwrap();
        assert!(matches!(c.release_raw(l), Err(Error::DoubleRelease { .. })));
    }

    #[test]
    fn group_probe_fetches_each_line_once() {
        let sys = system(1024, 8);
        let c = sys.cache();
        let (a, b) = (LineId::new(0, 5), LineId::new(0, 6));
        let refs = c.probe_group(&[a, b, a, a]).unwrap();
        assert_eq!(reads(&sys), 2);
        assert_eq!(c.line_meta(a).unwrap().refcount, 3);
        assert_eq!(refs[0].slot(), refs[2].slot());
        drop(refs);
        assert_eq!(c.live_pins(), 0);
    }

    #[test]
    fn pinned_lines_are_never_victims() {
        let policy = PollPolicy::default().with_timeout(Duration::from_millis(50));
        let sys = System::builder()
            .capacity_blocks(1 << 12)
            .cache(512, 1024)
            .scratch_bytes(0)
            .poll(policy)
            .build()
            .unwrap();
        let c = sys.cache();
        let _a = c.probe(LineId::new(0, 1)).unwrap();
        let _b = c.probe(LineId::new(0, 2)).unwrap();
        assert!(matches!(c.probe(LineId::new(0, 3)), Err(Error::Timeout { .. })));
        assert_eq!(c.evict_one().unwrap(), None);
        // The failed fetch leaves the line clean for the next attempt.
        assert_eq!(c.line_meta(LineId::new(0, 3)).unwrap().state, LineState::Invalid);
        assert_eq!(c.line_meta(LineId::new(0, 3)).unwrap().refcount, 0);
        drop(_a);
        assert!(c.probe(LineId::new(0, 3)).is_ok());
    }

    #[test]
    fn lines_outside_the_device_are_rejected() {
        let sys = system(512, 2);
        let err = sys.cache().probe(LineId::new(0, 1 << 12)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
        assert!(sys.cache().probe(LineId::new(1, 0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CacheConfig::new(4096, 64 << 20).is_ok());
        assert!(CacheConfig::new(1000, 64 << 20).is_err());
        assert!(CacheConfig::new(256, 64 << 20).is_err());
        assert!(CacheConfig::new(4096, 100).is_err());
    }
}
