//! Word-based software transactional memory (TL2 lineage).
//!
//! A shared stripe table of ownership records guards 8-byte words by hash.
//! Readers validate each loaded word against its stripe version and a
//! transaction-start timestamp, which keeps every executing transaction on a
//! consistent snapshot; writers buffer locally and lock their stripes only
//! at commit. Single attempt per call: any conflict surfaces as
//! `StmStop::Conflict` and the caller decides on backoff and retry.
//!
//! Two commit flavors:
//! * volatile: write-back is one atomic publication group, no log traffic.
//! * persistent: the write set is funneled through a redo log transaction
//!   (entries, commit record, replay, eager truncation), emitting exactly
//!   the constant redo fence sequence under TransientCaches and plain
//!   stores under PersistentCaches.

use crate::pmem::{Memory, ThreadId};
use crate::wal::{TxMode, WalEngine};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

const LOCK_BIT: u64 = 1 << 63;
const OWNER_SHIFT: u32 = 32;
const OWNER_MASK: u64 = 0x7FFF_FFFF;
const VERSION_MASK: u64 = 0xFFFF_FFFF;

#[derive(Debug, Clone, PartialEq)]
pub enum StmStop {
    /// Snapshot or lock conflict; the attempt is dead, retry from begin.
    Conflict,
    /// Memory fault or log exhaustion escalated from below.
    Fatal(crate::Error),
}

impl From<crate::Error> for StmStop {
    fn from(e: crate::Error) -> Self {
        StmStop::Fatal(e)
    }
}

pub type StmResult<T> = std::result::Result<T, StmStop>;

fn locked(o: u64) -> bool {
    o & LOCK_BIT != 0
}

fn owner_of(o: u64) -> Option<ThreadId> {
    if locked(o) {
        Some((((o >> OWNER_SHIFT) & OWNER_MASK) - 1) as ThreadId)
    } else {
        None
    }
}

fn version_of(o: u64) -> u64 {
    o & VERSION_MASK
}

fn lock_word(owner: ThreadId, version: u64) -> u64 {
    LOCK_BIT | ((owner as u64 + 1) << OWNER_SHIFT) | (version & VERSION_MASK)
}

/// Shared STM state: stripe table plus the global version clock.
pub struct StmRuntime {
    orecs: Box<[AtomicU64]>,
    clock: AtomicU64,
    mask: u64,
}

impl StmRuntime {
    pub fn new() -> Self {
        Self::with_stripe_bits(14)
    }

    pub fn with_stripe_bits(bits: u32) -> Self {
        let n = 1usize << bits;
        let orecs = (0..n).map(|_| AtomicU64::new(0)).collect::<Vec<_>>();
        StmRuntime {
            orecs: orecs.into_boxed_slice(),
            clock: AtomicU64::new(0),
            mask: (n - 1) as u64,
        }
    }

    fn stripe(&self, word_addr: u64) -> usize {
        let h = (word_addr >> 3).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ((h >> 32) & self.mask) as usize
    }

    fn stripes_for(&self, addr: u64, len: u64) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        if len == 0 {
            return out;
        }
        let mut w = addr & !7;
        let last = (addr + len - 1) & !7;
        while w <= last {
            out.insert(self.stripe(w));
            w += 8;
        }
        out
    }
}

impl Default for StmRuntime {
    fn default() -> Self {
        Self::new()
    }
}

/// One transaction attempt. Dropping an attempt mid-flight is safe: no
/// shared state is touched until commit.
pub struct StmTx {
    rt: Arc<StmRuntime>,
    mem: Arc<Memory>,
    thread: ThreadId,
    rv: u64,
    read_set: BTreeSet<usize>,
    overlay: BTreeMap<u64, u8>,
    writes: Vec<(u64, Vec<u8>)>,
}

impl StmTx {
    pub fn begin(rt: Arc<StmRuntime>, mem: Arc<Memory>, thread: ThreadId) -> Self {
        let rv = rt.clock.load(Ordering::SeqCst);
        StmTx {
            rt,
            mem,
            thread,
            rv,
            read_set: BTreeSet::new(),
            overlay: BTreeMap::new(),
            writes: Vec::new(),
        }
    }

    pub fn thread(&self) -> ThreadId {
        self.thread
    }

    fn stripe_ok_for_read(&self, o: u64) -> bool {
        !locked(o) && version_of(o) <= self.rv
    }

    /// Snapshot-consistent read with own-write overlay.
    pub fn read(&mut self, addr: u64, len: u64) -> StmResult<Vec<u8>> {
        let fully_buffered = len > 0
            && (0..len).all(|i| self.overlay.contains_key(&(addr + i)));
        if fully_buffered {
            return Ok((0..len).map(|i| self.overlay[&(addr + i)]).collect());
        }
        let stripes = self.rt.stripes_for(addr, len);
        let mut pre = Vec::with_capacity(stripes.len());
        for &s in &stripes {
            let o = self.rt.orecs[s].load(Ordering::SeqCst);
            if !self.stripe_ok_for_read(o) {
                return Err(StmStop::Conflict);
            }
            pre.push((s, o));
        }
        let mut bytes = self.mem.load(self.thread, addr, len)?;
        for (s, o) in pre {
            if self.rt.orecs[s].load(Ordering::SeqCst) != o {
                return Err(StmStop::Conflict);
            }
            self.read_set.insert(s);
        }
        for (i, b) in bytes.iter_mut().enumerate() {
            if let Some(v) = self.overlay.get(&(addr + i as u64)) {
                *b = *v;
            }
        }
        Ok(bytes)
    }

    /// Buffered write; home memory is untouched until commit.
    pub fn write(&mut self, addr: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.overlay.insert(addr + i as u64, *b);
        }
        self.writes.push((addr, bytes.to_vec()));
    }

    pub fn write_count(&self) -> usize {
        self.writes.len()
    }

    fn release(&self, held: &[(usize, u64)]) {
        for (s, restore) in held {
            self.rt.orecs[*s].store(*restore, Ordering::SeqCst);
        }
    }

    /// Lock, validate, publish, release. `persist` routes the write set
    /// through the caller's redo log for crash atomicity.
    pub fn commit(self, mut persist: Option<(&mut WalEngine, u64)>) -> StmResult<()> {
        if self.writes.is_empty() {
            return Ok(());
        }
        let mut write_stripes = BTreeSet::new();
        for (addr, bytes) in &self.writes {
            write_stripes.extend(self.rt.stripes_for(*addr, bytes.len() as u64));
        }
        let mut held: Vec<(usize, u64)> = Vec::with_capacity(write_stripes.len());
        for &s in &write_stripes {
            let o = self.rt.orecs[s].load(Ordering::SeqCst);
            if locked(o) {
                self.release(&held);
                return Err(StmStop::Conflict);
            }
            let l = lock_word(self.thread, version_of(o));
            if self.rt.orecs[s]
                .compare_exchange(o, l, Ordering::SeqCst, Ordering::SeqCst)
                .is_err()
            {
                self.release(&held);
                return Err(StmStop::Conflict);
            }
            held.push((s, o));
        }
        let wv = self.rt.clock.fetch_add(1, Ordering::SeqCst) + 1;
        for &s in &self.read_set {
            let o = self.rt.orecs[s].load(Ordering::SeqCst);
            let ok = match owner_of(o) {
                Some(t) => t == self.thread && version_of(o) <= self.rv,
                None => version_of(o) <= self.rv,
            };
            if !ok {
                self.release(&held);
                return Err(StmStop::Conflict);
            }
        }
        let publish_result = match persist.as_mut() {
            None => {
                // One publication group: under persistent caches the whole
                // write set reaches the crash image atomically.
                self.mem
                    .store_group(self.thread, &self.writes)
                    .map_err(StmStop::from)
            }
            Some((wal, tx_id)) => (|| {
                wal.begin(*tx_id, TxMode::Redo)?;
                for (addr, bytes) in &self.writes {
                    wal.write(*addr, bytes)?;
                }
                wal.commit()
            })()
            .map_err(StmStop::from),
        };
        if let Err(e) = publish_result {
            self.release(&held);
            return Err(e);
        }
        for (s, _) in &held {
            self.rt.orecs[*s].store(wv & VERSION_MASK, Ordering::SeqCst);
        }
        Ok(())
    }
}
