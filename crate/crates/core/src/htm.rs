//! Hardware transactional memory simulator with an optional logged fast
//! path.
//!
//! Transactions execute against a copy-on-write buffer of whole cache
//! lines. Conflict detection is line-granular and requester-wins: the
//! thread asking for a conflicting claim immediately strips the victim's
//! claims and dooms it; the victim notices at its next operation. Commit
//! publishes the dirty lines as one atomic publication group, which models
//! the all-or-nothing visibility of a hardware commit.
//!
//! The logged fast path (`cc`) streams redo entries into the owning
//! thread's log region with non-temporal stores as writes happen, no
//! fences. Commit then costs a constant four: drain entries, persist the
//! tail advance (commit record), publish, and eagerly truncate. Aborts
//! just rewind the volatile cursor; abandoned entry bytes above the tail
//! are dead by construction.
//!
//! A single global fallback lock serializes transactions that give up on
//! speculation. Acquiring it dooms every active hardware transaction, and
//! no hardware transaction can begin while it is held (lock subscription).

use crate::pmem::{Memory, ThreadId};
use crate::wal::{self, LOG_HEADER_SIZE};
use crate::Error;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HtmAbort {
    /// Lost a line claim to another transaction (requester wins).
    Conflict,
    /// Read or write footprint exceeded the line budget.
    Capacity,
    /// The fallback lock was held at begin, or taken mid-transaction.
    LockHeld,
    /// The logged fast path ran out of log region.
    NoLogSpace,
    /// User-requested abort.
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HtmStop {
    Abort(HtmAbort),
    Fatal(Error),
}

impl From<Error> for HtmStop {
    fn from(e: Error) -> Self {
        HtmStop::Fatal(e)
    }
}

pub type HtmResult<T> = std::result::Result<T, HtmStop>;

#[derive(Debug, Clone, Copy)]
pub struct HtmConfig {
    /// Combined read+write footprint limit, in distinct lines.
    pub capacity_lines: usize,
    /// Conflict/lock retries before the caller should take the fallback.
    pub max_retries: u32,
}

impl Default for HtmConfig {
    fn default() -> Self {
        HtmConfig {
            capacity_lines: 1024,
            max_retries: 8,
        }
    }
}

#[derive(Default)]
struct LineClaim {
    writer: Option<ThreadId>,
    readers: HashSet<ThreadId>,
}

#[derive(Default)]
struct ClaimTable {
    lines: HashMap<u64, LineClaim>,
    active: HashSet<ThreadId>,
}

/// Shared simulator state: claim table, doom flags, fallback lock.
pub struct HtmRuntime {
    mem: Arc<Memory>,
    config: HtmConfig,
    table: Mutex<ClaimTable>,
    doomed: Box<[AtomicBool]>,
    // 0 = free, else thread id + 1.
    fallback_lock: AtomicU64,
    lock_waits: AtomicU64,
}

impl HtmRuntime {
    pub fn new(mem: Arc<Memory>, config: HtmConfig, n_threads: usize) -> Arc<Self> {
        Arc::new(HtmRuntime {
            mem,
            config,
            table: Mutex::new(ClaimTable::default()),
            doomed: (0..n_threads).map(|_| AtomicBool::new(false)).collect(),
            fallback_lock: AtomicU64::new(0),
            lock_waits: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> HtmConfig {
        self.config
    }

    pub fn lock_held(&self) -> bool {
        self.fallback_lock.load(Ordering::SeqCst) != 0
    }

    /// Times a fallback acquisition attempt found the lock busy.
    pub fn lock_waits(&self) -> u64 {
        self.lock_waits.load(Ordering::SeqCst)
    }

    /// Non-blocking fallback lock acquisition. Success dooms every active
    /// hardware transaction; they observe it at their next operation.
    pub fn try_lock_fallback(&self, me: ThreadId) -> bool {
        if self
            .fallback_lock
            .compare_exchange(0, me as u64 + 1, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            self.lock_waits.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        let mut table = self.table.lock().unwrap();
        let victims: Vec<ThreadId> = table.active.iter().copied().collect();
        for v in victims {
            self.doom_locked(&mut table, v);
        }
        true
    }

    pub fn unlock_fallback(&self, me: ThreadId) {
        let cur = self.fallback_lock.load(Ordering::SeqCst);
        assert_eq!(cur, me as u64 + 1, "fallback unlock by non-owner");
        self.fallback_lock.store(0, Ordering::SeqCst);
    }

    fn doom_locked(&self, table: &mut ClaimTable, victim: ThreadId) {
        if !table.active.remove(&victim) {
            return;
        }
        self.doomed[victim].store(true, Ordering::SeqCst);
        table.lines.retain(|_, c| {
            if c.writer == Some(victim) {
                c.writer = None;
            }
            c.readers.remove(&victim);
            c.writer.is_some() || !c.readers.is_empty()
        });
    }

    /// Begins a hardware transaction. `tx_id` tags logged-fast-path entries
    /// and is unused otherwise.
    pub fn begin(
        self: &Arc<Self>,
        thread: ThreadId,
        tx_id: u64,
        log: Option<wal::RegionDesc>,
    ) -> std::result::Result<HwTx, HtmAbort> {
        // Lock check, doom reset, and activation are one atomic step: a
        // fallback acquirer dooms the active set under the same table lock,
        // so a transaction can neither slip in behind the lock nor have its
        // doom erased by a racing reset.
        let mut table = self.table.lock().unwrap();
        if self.lock_held() {
            return Err(HtmAbort::LockHeld);
        }
        self.doomed[thread].store(false, Ordering::SeqCst);
        assert!(
            table.active.insert(thread),
            "thread {thread} already in a hardware tx"
        );
        drop(table);
        Ok(HwTx {
            rt: self.clone(),
            thread,
            tx_id,
            log,
            log_head: LOG_HEADER_SIZE,
            log_entries: 0,
            spec: BTreeMap::new(),
            read_lines: BTreeSet::new(),
            write_lines: BTreeSet::new(),
            finished: false,
        })
    }
}

/// One hardware transaction attempt.
pub struct HwTx {
    rt: Arc<HtmRuntime>,
    thread: ThreadId,
    tx_id: u64,
    log: Option<wal::RegionDesc>,
    log_head: u64,
    log_entries: u64,
    spec: BTreeMap<u64, Vec<u8>>,
    read_lines: BTreeSet<u64>,
    write_lines: BTreeSet<u64>,
    finished: bool,
}

impl HwTx {
    pub fn thread(&self) -> ThreadId {
        self.thread
    }

    pub fn logged_entries(&self) -> u64 {
        self.log_entries
    }

    fn fail(&mut self, reason: HtmAbort) -> HtmStop {
        self.teardown();
        HtmStop::Abort(reason)
    }

    fn teardown(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let mut table = self.rt.table.lock().unwrap();
        if table.active.remove(&self.thread) {
            let me = self.thread;
            table.lines.retain(|_, c| {
                if c.writer == Some(me) {
                    c.writer = None;
                }
                c.readers.remove(&me);
                c.writer.is_some() || !c.readers.is_empty()
            });
        }
    }

    fn doomed(&self) -> bool {
        self.rt.doomed[self.thread].load(Ordering::SeqCst)
    }

    /// Claims each line, winning conflicts by dooming current holders.
    fn claim(&mut self, lines: &[u64], exclusive: bool) -> std::result::Result<(), HtmAbort> {
        // Checked under the table lock: dooming happens under it too.
        let mut table = self.rt.table.lock().unwrap();
        if self.doomed() {
            return Err(HtmAbort::Conflict);
        }
        if self.rt.lock_held() {
            return Err(HtmAbort::LockHeld);
        }
        for &l in lines {
            let mut victims: Vec<ThreadId> = Vec::new();
            if let Some(c) = table.lines.get(&l) {
                if let Some(w) = c.writer {
                    if w != self.thread {
                        victims.push(w);
                    }
                }
                if exclusive {
                    victims.extend(c.readers.iter().copied().filter(|r| *r != self.thread));
                }
            }
            for v in victims {
                self.rt.doom_locked(&mut table, v);
            }
            let c = table.lines.entry(l).or_default();
            if exclusive {
                c.readers.remove(&self.thread);
                c.writer = Some(self.thread);
                self.write_lines.insert(l);
            } else if c.writer != Some(self.thread) {
                c.readers.insert(self.thread);
                self.read_lines.insert(l);
            }
        }
        let footprint = self
            .read_lines
            .union(&self.write_lines)
            .count();
        if footprint > self.rt.config.capacity_lines {
            return Err(HtmAbort::Capacity);
        }
        Ok(())
    }

    fn fill(&mut self, lines: &[u64]) -> crate::Result<()> {
        let ls = self.rt.mem.line_size();
        for &l in lines {
            if !self.spec.contains_key(&l) {
                let bytes = self.rt.mem.peek(l, ls)?;
                self.spec.insert(l, bytes);
            }
        }
        Ok(())
    }

    fn spec_read(&self, addr: u64, len: u64) -> Vec<u8> {
        let ls = self.rt.mem.line_size();
        let mut out = Vec::with_capacity(len as usize);
        let mut a = addr;
        let end = addr + len;
        while a < end {
            let base = a & !(ls - 1);
            let off = (a - base) as usize;
            let take = ((base + ls).min(end) - a) as usize;
            out.extend_from_slice(&self.spec[&base][off..off + take]);
            a += take as u64;
        }
        out
    }

    pub fn read(&mut self, addr: u64, len: u64) -> HtmResult<Vec<u8>> {
        let lines = wal::lines_of(self.rt.mem.line_size(), addr, len);
        if let Err(a) = self.claim(&lines, false) {
            return Err(self.fail(a));
        }
        // The architectural read is visible to the event log; line fills
        // are not.
        if let Err(e) = self.rt.mem.load(self.thread, addr, len) {
            self.teardown();
            return Err(e.into());
        }
        if let Err(e) = self.fill(&lines) {
            self.teardown();
            return Err(e.into());
        }
        Ok(self.spec_read(addr, len))
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> HtmResult<()> {
        if bytes.is_empty() {
            return Ok(());
        }
        let lines = wal::lines_of(self.rt.mem.line_size(), addr, bytes.len() as u64);
        if let Err(a) = self.claim(&lines, true) {
            return Err(self.fail(a));
        }
        if let Err(e) = self.fill(&lines) {
            self.teardown();
            return Err(e.into());
        }
        if let Some(region) = self.log {
            // Logged fast path: stream the redo entry, fence-free.
            let entry = wal::encode_entry(self.tx_id, wal::TxMode::Redo, addr, bytes);
            let need = entry.len() as u64;
            if self.log_head + need > region.capacity {
                return Err(self.fail(HtmAbort::NoLogSpace));
            }
            if let Err(e) = self
                .rt
                .mem
                .nt_store(self.thread, region.base + self.log_head, &entry)
            {
                self.teardown();
                return Err(e.into());
            }
            self.log_head += need;
            self.log_entries += 1;
        }
        let ls = self.rt.mem.line_size();
        let mut a = addr;
        let mut src = bytes;
        while !src.is_empty() {
            let base = a & !(ls - 1);
            let off = (a - base) as usize;
            let take = (ls as usize - off).min(src.len());
            self.spec.get_mut(&base).unwrap()[off..off + take].copy_from_slice(&src[..take]);
            a += take as u64;
            src = &src[take..];
        }
        Ok(())
    }

    pub fn abort_explicit(mut self) -> HtmStop {
        self.fail(HtmAbort::Explicit)
    }

    /// Commits: logged fast path persists entries and the commit record,
    /// then both paths publish dirty lines as one atomic group, and the
    /// logged path truncates eagerly. Volatile commit emits no
    /// synchronization at all.
    pub fn commit(mut self) -> HtmResult<()> {
        let mem = self.rt.mem.clone();
        let rt = self.rt.clone();
        let t = self.thread;
        let publish: Vec<(u64, Vec<u8>)> = self
            .write_lines
            .iter()
            .map(|l| (*l, self.spec[l].clone()))
            .collect();
        // The table lock is held across the final doom check and the whole
        // publication: dooming (conflict or fallback acquisition) happens
        // under the same lock, so a transaction that passed the check here
        // has retired before any rival can doom it or read its homes.
        let mut table = rt.table.lock().unwrap();
        if self.doomed() {
            drop(table);
            return Err(self.fail(HtmAbort::Conflict));
        }
        if self.rt.lock_held() {
            drop(table);
            return Err(self.fail(HtmAbort::LockHeld));
        }
        let result: crate::Result<()> = (|| {
            if let Some(region) = self.log {
                if self.log_entries > 0 {
                    mem.sfence(t);
                    mem.nt_store(t, region.base, &self.log_head.to_le_bytes())?;
                    mem.sfence(t);
                }
            }
            if !publish.is_empty() {
                mem.store_group(t, &publish)?;
            }
            if let Some(region) = self.log {
                if self.log_entries > 0 {
                    wal::truncate_eager(&mem, t, region.base, &self.write_lines)?;
                }
            }
            Ok(())
        })();
        self.finished = true;
        table.active.remove(&t);
        table.lines.retain(|_, c| {
            if c.writer == Some(t) {
                c.writer = None;
            }
            c.readers.remove(&t);
            c.writer.is_some() || !c.readers.is_empty()
        });
        drop(table);
        result.map_err(HtmStop::from)
    }
}

impl Drop for HwTx {
    fn drop(&mut self) {
        self.teardown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::PersistenceDomain;
    use crate::wal::RegionDesc;

    const DATA: u64 = 0x1000;
    const LOG: u64 = 0x100000;
    const LOG_CAP: u64 = 65536;

    fn setup(domain: PersistenceDomain) -> (Arc<Memory>, Arc<HtmRuntime>) {
        let mem = Arc::new(Memory::new(domain));
        mem.map_region(DATA, 0x1000).unwrap();
        mem.map_region(LOG, LOG_CAP).unwrap();
        let rt = HtmRuntime::new(mem.clone(), HtmConfig::default(), 4);
        (mem, rt)
    }

    fn log_region() -> RegionDesc {
        RegionDesc {
            base: LOG,
            capacity: LOG_CAP,
        }
    }

    #[test]
    fn speculative_writes_invisible_until_commit() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut tx = rt.begin(0, 1, None).unwrap();
        tx.write(DATA, &7u64.to_le_bytes()).unwrap();
        assert_eq!(mem.peek(DATA, 8).unwrap(), vec![0; 8]);
        assert_eq!(tx.read(DATA, 8).unwrap(), 7u64.to_le_bytes());
        tx.commit().unwrap();
        assert_eq!(mem.peek(DATA, 8).unwrap(), 7u64.to_le_bytes().to_vec());
    }

    #[test]
    fn volatile_commit_emits_no_sync_events() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut tx = rt.begin(0, 1, None).unwrap();
        let v = tx.read(DATA + 8, 8).unwrap();
        tx.write(DATA, &v).unwrap();
        tx.commit().unwrap();
        let c = mem.counters().total;
        assert_eq!((c.sfences, c.clwbs, c.nt_stores), (0, 0, 0));
    }

    #[test]
    fn requester_wins_dooms_active_writer() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut a = rt.begin(0, 1, None).unwrap();
        a.write(DATA, &1u64.to_le_bytes()).unwrap();
        let mut b = rt.begin(1, 2, None).unwrap();
        b.write(DATA, &2u64.to_le_bytes()).unwrap();
        // B stole the line; A is doomed and fails at its next step.
        assert_eq!(
            a.write(DATA + 64, &3u64.to_le_bytes()).unwrap_err(),
            HtmStop::Abort(HtmAbort::Conflict)
        );
        b.commit().unwrap();
        assert_eq!(mem.peek(DATA, 8).unwrap(), 2u64.to_le_bytes().to_vec());
    }

    #[test]
    fn writer_dooms_readers_but_readers_share() {
        let (_mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut r1 = rt.begin(0, 1, None).unwrap();
        let mut r2 = rt.begin(1, 2, None).unwrap();
        r1.read(DATA, 8).unwrap();
        r2.read(DATA, 8).unwrap();

        let mut w = rt.begin(2, 3, None).unwrap();
        w.write(DATA, &9u64.to_le_bytes()).unwrap();
        assert!(matches!(
            r1.read(DATA + 8, 8),
            Err(HtmStop::Abort(HtmAbort::Conflict))
        ));
        assert!(matches!(
            r2.commit(),
            Err(HtmStop::Abort(HtmAbort::Conflict))
        ));
        w.commit().unwrap();
    }

    #[test]
    fn capacity_abort_on_footprint_overflow() {
        let mem = Arc::new(Memory::new(PersistenceDomain::TransientCaches));
        mem.map_region(DATA, 0x10000).unwrap();
        let rt = HtmRuntime::new(
            mem.clone(),
            HtmConfig {
                capacity_lines: 4,
                max_retries: 8,
            },
            1,
        );
        let mut tx = rt.begin(0, 1, None).unwrap();
        for i in 0..4u64 {
            tx.write(DATA + 64 * i, &[1u8; 8]).unwrap();
        }
        assert_eq!(
            tx.write(DATA + 64 * 4, &[1u8; 8]).unwrap_err(),
            HtmStop::Abort(HtmAbort::Capacity)
        );
    }

    #[test]
    fn lock_subscription_blocks_begin_and_dooms_actives() {
        let (_mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut tx = rt.begin(0, 1, None).unwrap();
        tx.write(DATA, &1u64.to_le_bytes()).unwrap();

        assert!(rt.try_lock_fallback(1));
        assert!(!rt.try_lock_fallback(2), "lock is exclusive");
        assert!(matches!(rt.begin(2, 9, None), Err(HtmAbort::LockHeld)));
        assert!(matches!(
            tx.commit(),
            Err(HtmStop::Abort(HtmAbort::Conflict | HtmAbort::LockHeld))
        ));
        rt.unlock_fallback(1);
        assert!(rt.begin(2, 9, None).is_ok());
    }

    #[test]
    fn publication_is_atomic_under_persistent_caches() {
        let (mem, rt) = setup(PersistenceDomain::PersistentCaches);
        let mut tx = rt.begin(0, 1, None).unwrap();
        tx.write(DATA, &1u64.to_le_bytes()).unwrap();
        tx.write(DATA + 300, &2u64.to_le_bytes()).unwrap();
        tx.commit().unwrap();
        mem.crash();
        for st in mem.crash_states(1024).unwrap() {
            let a = st.persisted.read_u64(DATA).unwrap();
            let b = st.persisted.read_u64(DATA + 300).unwrap();
            assert!((a, b) == (0, 0) || (a, b) == (1, 2));
        }
    }

    #[test]
    fn logged_path_streams_entries_and_commits_with_four_fences() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut tx = rt.begin(0, 5, Some(log_region())).unwrap();
        for w in 0..8u64 {
            tx.write(DATA + 8 * w, &(w + 1).to_le_bytes()).unwrap();
        }
        let c = mem.counters().total;
        assert_eq!(c.sfences, 0, "write phase is fence-free");
        assert_eq!(c.nt_stores, 8, "one streamed entry per write");
        assert_eq!(c.clwbs, 0);
        tx.commit().unwrap();
        let c = mem.counters().total;
        assert_eq!(c.sfences, 4, "constant commit fence count");
        for w in 0..8u64 {
            assert_eq!(mem.peek(DATA + 8 * w, 8).unwrap(), (w + 1).to_le_bytes());
        }
        assert_eq!(mem.peek(LOG, 8).unwrap(), vec![0; 8], "log truncated");
    }

    #[test]
    fn logged_commit_recovers_all_or_nothing_at_every_cut() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut tx = rt.begin(0, 5, Some(log_region())).unwrap();
        tx.write(DATA, &0x11u64.to_le_bytes()).unwrap();
        tx.write(DATA + 200, &0x22u64.to_le_bytes()).unwrap();
        tx.commit().unwrap();

        let events = mem.events();
        let regions = mem.regions();
        for upto in 0..=events.len() {
            let replayed = Memory::replay_prefix(
                PersistenceDomain::TransientCaches,
                mem.line_size(),
                &regions,
                &events,
                upto,
            )
            .unwrap();
            for st in replayed.crash_states(2048).unwrap() {
                let mut img = st.persisted.clone();
                wal::recover(&mut img, &[log_region()]).unwrap();
                let a = img.read_u64(DATA).unwrap();
                let b = img.read_u64(DATA + 200).unwrap();
                assert!(
                    (a, b) == (0, 0) || (a, b) == (0x11, 0x22),
                    "partial recovery at cut {upto}: a={a:#x} b={b:#x}"
                );
            }
        }
    }

    #[test]
    fn aborted_logged_tx_leaves_no_recoverable_entries() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut tx = rt.begin(0, 5, Some(log_region())).unwrap();
        tx.write(DATA, &0x77u64.to_le_bytes()).unwrap();
        let _ = tx.abort_explicit();
        mem.crash();
        for st in mem.crash_states(512).unwrap() {
            let mut img = st.persisted.clone();
            wal::recover(&mut img, &[log_region()]).unwrap();
            assert_eq!(img.read_u64(DATA).unwrap(), 0, "no effects recovered");
        }
    }

    #[test]
    fn retry_after_abort_reuses_log_from_scratch() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let mut tx = rt.begin(0, 5, Some(log_region())).unwrap();
        tx.write(DATA, &0xAAu64.to_le_bytes()).unwrap();
        let _ = tx.abort_explicit();

        let mut tx = rt.begin(0, 6, Some(log_region())).unwrap();
        tx.write(DATA + 8, &0xBBu64.to_le_bytes()).unwrap();
        tx.commit().unwrap();
        mem.crash();
        for st in mem.crash_states(2048).unwrap() {
            let mut img = st.persisted.clone();
            wal::recover(&mut img, &[log_region()]).unwrap();
            assert_eq!(img.read_u64(DATA).unwrap(), 0);
            let b = img.read_u64(DATA + 8).unwrap();
            assert!(b == 0 || b == 0xBB);
        }
    }

    #[test]
    fn no_log_space_aborts_cleanly() {
        let (mem, rt) = setup(PersistenceDomain::TransientCaches);
        let tiny = RegionDesc {
            base: LOG,
            capacity: LOG_HEADER_SIZE + 40,
        };
        let mut tx = rt.begin(0, 5, Some(tiny)).unwrap();
        tx.write(DATA, &1u64.to_le_bytes()).unwrap();
        assert_eq!(
            tx.write(DATA + 8, &2u64.to_le_bytes()).unwrap_err(),
            HtmStop::Abort(HtmAbort::NoLogSpace)
        );
        assert_eq!(mem.peek(DATA, 8).unwrap(), vec![0; 8]);
    }

    #[test]
    fn dropped_tx_releases_claims() {
        let (_mem, rt) = setup(PersistenceDomain::TransientCaches);
        {
            let mut tx = rt.begin(0, 1, None).unwrap();
            tx.write(DATA, &1u64.to_le_bytes()).unwrap();
        }
        // The dropped transaction's claims must not doom the next one.
        let mut tx = rt.begin(1, 2, None).unwrap();
        tx.write(DATA, &2u64.to_le_bytes()).unwrap();
        tx.commit().unwrap();
    }
}
