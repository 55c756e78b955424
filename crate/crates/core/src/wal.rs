//! Write-ahead logging over the simulated NVM.
//!
//! Each thread owns one log region: an 8-byte tail word at the region base,
//! followed by packed entries `{tx_id: u64, addr: u64, len: u32, checksum:
//! u32, payload}`. The persisted tail word doubles as the commit/validity
//! marker: entries are considered by recovery only below it, and resetting it
//! to zero truncates the log. The top bit of the stored tx_id records the
//! entry discipline (set = redo/replay, clear = undo/rollback), so recovery
//! can handle regions where hardware fast-path and software fallback
//! transactions interleave.
//!
//! Fence discipline under TransientCaches:
//! * undo: per write, append entry (old value), clwb entry lines, advance
//!   tail, one sfence, then store in place. Commit: clwb written home lines,
//!   sfence, reset tail (8-byte non-temporal store), sfence. A W-write tx
//!   emits exactly W+2 sfences.
//! * redo: writes touch only the log and the tx-local redirect map. Commit:
//!   clwb entry lines, sfence, advance tail (commit record), sfence, replay
//!   values home, clwb home lines, sfence, then eager truncation (clwb
//!   write-set lines, sfence, reset tail, sfence). Constant five sfences
//!   regardless of W.
//!
//! Under PersistentCaches every clwb/sfence is elided and the tail word is
//! updated with plain stores; program order alone keeps log-then-data and
//! commit-then-replay ordering.

use crate::pmem::{Memory, PersistedImage, PersistenceDomain, ThreadId};
use crate::util::{crc32, u32_le, u64_le};
use crate::{Error, Result};
use std::collections::BTreeSet;
use std::sync::Arc;

/// Offset of the first entry; the 8-byte tail word sits at the region base.
pub const LOG_HEADER_SIZE: u64 = 8;
/// Entry header: tx_id (8) + addr (8) + len (4) + checksum (4).
pub const ENTRY_HEADER_SIZE: u64 = 24;
/// Default per-thread log capacity.
pub const DEFAULT_LOG_CAPACITY: u64 = 10 * 1024 * 1024;

const MODE_REDO_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum TxMode {
    Undo,
    Redo,
}

impl TxMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "undo" => Ok(TxMode::Undo),
            "redo" => Ok(TxMode::Redo),
            other => Err(Error::usage(format!("unknown log mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegionDesc {
    pub base: u64,
    pub capacity: u64,
}

/// Protocol fault injection for sensitivity tests: checks that the crash
/// checker actually depends on the fences it is supposed to verify.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mutations {
    /// Omit the sfence between an undo entry append and the in-place store.
    pub skip_undo_append_fence: bool,
    /// Persist the undo commit record (tail reset) before the write-set
    /// flush instead of after it.
    pub undo_commit_before_writeset: bool,
}

pub fn entry_size(payload_len: usize) -> u64 {
    ENTRY_HEADER_SIZE + payload_len as u64
}

pub(crate) fn encode_entry(tx_id: u64, mode: TxMode, addr: u64, payload: &[u8]) -> Vec<u8> {
    debug_assert!(tx_id & MODE_REDO_BIT == 0, "tx ids use the low 63 bits");
    let tagged = match mode {
        TxMode::Undo => tx_id,
        TxMode::Redo => tx_id | MODE_REDO_BIT,
    };
    let mut body = Vec::with_capacity(20 + payload.len());
    body.extend_from_slice(&tagged.to_le_bytes());
    body.extend_from_slice(&addr.to_le_bytes());
    body.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    body.extend_from_slice(payload);
    let crc = crc32(&body);
    let mut out = Vec::with_capacity(24 + payload.len());
    out.extend_from_slice(&body[..20]);
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Lines covered by [addr, addr+len).
pub(crate) fn lines_of(line_size: u64, addr: u64, len: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    let mut base = addr & !(line_size - 1);
    let last = (addr + len - 1) & !(line_size - 1);
    while base <= last {
        out.push(base);
        base += line_size;
    }
    out
}

/// clwb + sfence over a line set (no-op under PersistentCaches).
pub(crate) fn persist_lines<I: IntoIterator<Item = u64>>(
    mem: &Memory,
    t: ThreadId,
    lines: I,
) -> Result<()> {
    if mem.domain() == PersistenceDomain::PersistentCaches {
        return Ok(());
    }
    for l in lines {
        mem.clwb(t, l)?;
    }
    mem.sfence(t);
    Ok(())
}

/// Eager log truncation: persist the transaction's write-set lines, then
/// atomically reset the tail word so every entry becomes invalid.
pub(crate) fn truncate_eager(
    mem: &Memory,
    t: ThreadId,
    region_base: u64,
    write_set_lines: &BTreeSet<u64>,
) -> Result<()> {
    match mem.domain() {
        PersistenceDomain::TransientCaches => {
            for l in write_set_lines {
                mem.clwb(t, *l)?;
            }
            mem.sfence(t);
            mem.nt_store(t, region_base, &0u64.to_le_bytes())?;
            mem.sfence(t);
        }
        PersistenceDomain::PersistentCaches => {
            mem.store(t, region_base, &0u64.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct WriteRec {
    addr: u64,
    new: Vec<u8>,
}

#[derive(Debug)]
struct ActiveTx {
    tx_id: u64,
    mode: TxMode,
    head: u64,
    writes: Vec<WriteRec>,
    // Undo: old values for volatile rollback, newest last.
    undo_set: Vec<(u64, Vec<u8>)>,
    // Redo: byte-granular read redirection.
    redo_map: std::collections::BTreeMap<u64, u8>,
    entry_lines: BTreeSet<u64>,
}

/// Single-thread write-ahead transaction engine. Callers provide mutual
/// exclusion (spinlock, orec locks, or the HTM fallback lock); the engine
/// provides crash atomicity.
pub struct WalEngine {
    mem: Arc<Memory>,
    thread: ThreadId,
    region: RegionDesc,
    mutations: Mutations,
    active: Option<ActiveTx>,
}

impl WalEngine {
    pub fn new(mem: Arc<Memory>, thread: ThreadId, region: RegionDesc) -> Self {
        Self::with_mutations(mem, thread, region, Mutations::default())
    }

    pub fn with_mutations(
        mem: Arc<Memory>,
        thread: ThreadId,
        region: RegionDesc,
        mutations: Mutations,
    ) -> Self {
        WalEngine {
            mem,
            thread,
            region,
            mutations,
            active: None,
        }
    }

    pub fn thread(&self) -> ThreadId {
        self.thread
    }

    pub fn region(&self) -> RegionDesc {
        self.region
    }

    pub fn in_tx(&self) -> bool {
        self.active.is_some()
    }

    pub fn begin(&mut self, tx_id: u64, mode: TxMode) -> Result<()> {
        if self.active.is_some() {
            return Err(Error::usage("nested wal transaction"));
        }
        if tx_id & MODE_REDO_BIT != 0 {
            return Err(Error::usage("tx_id exceeds 63 bits"));
        }
        self.active = Some(ActiveTx {
            tx_id,
            mode,
            head: LOG_HEADER_SIZE,
            writes: Vec::new(),
            undo_set: Vec::new(),
            redo_map: std::collections::BTreeMap::new(),
            entry_lines: BTreeSet::new(),
        });
        Ok(())
    }

    pub fn read(&mut self, addr: u64, len: u64) -> Result<Vec<u8>> {
        let tx = self
            .active
            .as_ref()
            .ok_or_else(|| Error::usage("wal read outside transaction"))?;
        let mut bytes = self.mem.load(self.thread, addr, len)?;
        if tx.mode == TxMode::Redo {
            for (i, b) in bytes.iter_mut().enumerate() {
                if let Some(v) = tx.redo_map.get(&(addr + i as u64)) {
                    *b = *v;
                }
            }
        }
        Ok(bytes)
    }

    /// Transactional write. Undo mode persists an old-value entry before the
    /// in-place store; redo mode buffers the new value in the log and the
    /// redirect map, leaving home untouched until commit.
    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<()> {
        if bytes.is_empty() {
            return Err(Error::usage("zero-length transactional write"));
        }
        let mode = match self.active.as_ref() {
            Some(tx) => tx.mode,
            None => return Err(Error::usage("wal write outside transaction")),
        };
        let line_size = self.mem.line_size();
        // One entry per line fragment keeps every entry's payload within one
        // home line.
        let mut frags = Vec::new();
        {
            let mut a = addr;
            let mut src = bytes;
            while !src.is_empty() {
                let line_end = (a & !(line_size - 1)) + line_size;
                let take = ((line_end - a) as usize).min(src.len());
                frags.push((a, src[..take].to_vec()));
                a += take as u64;
                src = &src[take..];
            }
        }
        for (fa, fbytes) in frags {
            match mode {
                TxMode::Undo => self.write_undo_frag(fa, &fbytes)?,
                TxMode::Redo => self.write_redo_frag(fa, &fbytes)?,
            }
        }
        Ok(())
    }

    fn append_space(&mut self, need: u64) -> Result<u64> {
        let tx = self.active.as_ref().unwrap();
        let avail = self.region.capacity.saturating_sub(tx.head);
        if need > avail {
            Err(Error::LogFull { need, avail })
        } else {
            Ok(tx.head)
        }
    }

    fn write_undo_frag(&mut self, addr: u64, bytes: &[u8]) -> Result<()> {
        let old = self.mem.load(self.thread, addr, bytes.len() as u64)?;
        let need = entry_size(old.len());
        let head = match self.append_space(need) {
            Ok(h) => h,
            Err(e) => {
                // The tx is dead; restore the in-place writes made so far.
                self.rollback_volatile()?;
                self.active = None;
                return Err(e);
            }
        };
        let t = self.thread;
        let tx = self.active.as_mut().unwrap();
        let entry = encode_entry(tx.tx_id, TxMode::Undo, addr, &old);
        let entry_addr = self.region.base + head;
        let new_head = head + need;
        self.mem.store(t, entry_addr, &entry)?;
        match self.mem.domain() {
            PersistenceDomain::TransientCaches => {
                for l in lines_of(self.mem.line_size(), entry_addr, need) {
                    self.mem.clwb(t, l)?;
                }
                self.mem
                    .nt_store(t, self.region.base, &new_head.to_le_bytes())?;
                if !self.mutations.skip_undo_append_fence {
                    self.mem.sfence(t);
                }
            }
            PersistenceDomain::PersistentCaches => {
                self.mem
                    .store(t, self.region.base, &new_head.to_le_bytes())?;
            }
        }
        self.mem.store(t, addr, bytes)?;
        let tx = self.active.as_mut().unwrap();
        tx.head = new_head;
        tx.undo_set.push((addr, old));
        tx.writes.push(WriteRec {
            addr,
            new: bytes.to_vec(),
        });
        Ok(())
    }

    fn write_redo_frag(&mut self, addr: u64, bytes: &[u8]) -> Result<()> {
        let need = entry_size(bytes.len());
        let head = match self.append_space(need) {
            Ok(h) => h,
            Err(e) => {
                // Redo never touched home; dropping the tx state is enough.
                self.active = None;
                return Err(e);
            }
        };
        let t = self.thread;
        let line_size = self.mem.line_size();
        let entry_addr = self.region.base + head;
        let tx = self.active.as_mut().unwrap();
        let entry = encode_entry(tx.tx_id, TxMode::Redo, addr, bytes);
        for l in lines_of(line_size, entry_addr, need) {
            tx.entry_lines.insert(l);
        }
        tx.head = head + need;
        for (i, b) in bytes.iter().enumerate() {
            tx.redo_map.insert(addr + i as u64, *b);
        }
        tx.writes.push(WriteRec {
            addr,
            new: bytes.to_vec(),
        });
        self.mem.store(t, entry_addr, &entry)?;
        Ok(())
    }

    fn write_set_lines(&self) -> BTreeSet<u64> {
        let line_size = self.mem.line_size();
        let tx = self.active.as_ref().unwrap();
        tx.writes
            .iter()
            .flat_map(|w| lines_of(line_size, w.addr, w.new.len() as u64))
            .collect()
    }

    /// Durably commits and eagerly truncates. A transaction with no writes
    /// appends nothing and emits no synchronization events.
    pub fn commit(&mut self) -> Result<()> {
        let mode = match self.active.as_ref() {
            Some(tx) => tx.mode,
            None => return Err(Error::usage("wal commit outside transaction")),
        };
        if self.active.as_ref().unwrap().writes.is_empty() {
            self.active = None;
            return Ok(());
        }
        let t = self.thread;
        let base = self.region.base;
        match mode {
            TxMode::Undo => {
                let lines = self.write_set_lines();
                match self.mem.domain() {
                    PersistenceDomain::TransientCaches => {
                        if self.mutations.undo_commit_before_writeset {
                            self.mem.nt_store(t, base, &0u64.to_le_bytes())?;
                            self.mem.sfence(t);
                            for l in &lines {
                                self.mem.clwb(t, *l)?;
                            }
                            self.mem.sfence(t);
                        } else {
                            // Commit record and truncation coincide: the tail
                            // reset invalidates every undo entry.
                            truncate_eager(&self.mem, t, base, &lines)?;
                        }
                    }
                    PersistenceDomain::PersistentCaches => {
                        self.mem.store(t, base, &0u64.to_le_bytes())?;
                    }
                }
            }
            TxMode::Redo => {
                let head = self.active.as_ref().unwrap().head;
                let entry_lines: Vec<u64> = self
                    .active
                    .as_ref()
                    .unwrap()
                    .entry_lines
                    .iter()
                    .copied()
                    .collect();
                match self.mem.domain() {
                    PersistenceDomain::TransientCaches => {
                        persist_lines(&self.mem, t, entry_lines)?;
                        self.mem.nt_store(t, base, &head.to_le_bytes())?;
                        self.mem.sfence(t);
                    }
                    PersistenceDomain::PersistentCaches => {
                        self.mem.store(t, base, &head.to_le_bytes())?;
                    }
                }
                // The tx is durable; move the values home and truncate.
                let writes = self.active.as_ref().unwrap().writes.clone();
                for w in &writes {
                    self.mem.store(t, w.addr, &w.new)?;
                }
                let lines = self.write_set_lines();
                persist_lines(&self.mem, t, lines.iter().copied())?;
                truncate_eager(&self.mem, t, base, &lines)?;
            }
        }
        self.active = None;
        Ok(())
    }

    fn rollback_volatile(&mut self) -> Result<()> {
        let t = self.thread;
        let undo: Vec<(u64, Vec<u8>)> = self
            .active
            .as_ref()
            .map(|tx| tx.undo_set.iter().rev().cloned().collect())
            .unwrap_or_default();
        for (addr, old) in &undo {
            self.mem.store(t, *addr, old)?;
        }
        Ok(())
    }

    /// Aborts the active transaction. Undo mode restores old values in place
    /// and truncates durably (the restored lines are persisted first so an
    /// empty log can never coexist with speculative home values); redo mode
    /// just discards buffered state.
    pub fn abort(&mut self) -> Result<()> {
        let tx = match self.active.as_ref() {
            Some(tx) => tx,
            None => return Err(Error::usage("wal abort outside transaction")),
        };
        match tx.mode {
            TxMode::Undo => {
                if !tx.writes.is_empty() {
                    self.rollback_volatile()?;
                    let lines = self.write_set_lines();
                    truncate_eager(&self.mem, self.thread, self.region.base, &lines)?;
                }
            }
            TxMode::Redo => {}
        }
        self.active = None;
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RegionRecovery {
    pub base: u64,
    pub mode: Option<TxMode>,
    pub entries_applied: usize,
    pub stopped_at_torn_entry: bool,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct RecoveryReport {
    pub regions: Vec<RegionRecovery>,
}

struct ParsedEntry {
    mode: TxMode,
    addr: u64,
    payload: Vec<u8>,
}

/// Recovers every log region against `img`, then resets all tail words.
///
/// Regions never contend: commit-time locking guarantees that concurrently
/// committed-but-untruncated transactions have disjoint write sets, so the
/// region application order cannot change the result. Running recovery on an
/// already-recovered image is the identity.
pub fn recover(img: &mut PersistedImage, regions: &[RegionDesc]) -> Result<RecoveryReport> {
    let mut report = RecoveryReport::default();
    for r in regions {
        let rec = recover_region(img, r)?;
        report.regions.push(rec);
    }
    Ok(report)
}

fn recover_region(img: &mut PersistedImage, r: &RegionDesc) -> Result<RegionRecovery> {
    let tail = img.read_u64(r.base)?;
    let mut rec = RegionRecovery {
        base: r.base,
        mode: None,
        entries_applied: 0,
        stopped_at_torn_entry: false,
    };
    if tail == 0 {
        return Ok(rec);
    }
    if tail < LOG_HEADER_SIZE + ENTRY_HEADER_SIZE || tail > r.capacity {
        return Err(Error::Corruption(format!(
            "region {:#x}: tail {tail} out of bounds",
            r.base
        )));
    }
    let mut entries: Vec<ParsedEntry> = Vec::new();
    let mut off = LOG_HEADER_SIZE;
    let mut torn = false;
    // The first entry shares the tail's cache line and is stored before the
    // tail advances, so a tail covering one entry proves that entry is the
    // in-flight transaction's. Later entries sit on other lines and may
    // lag; the id comparison below detects that.
    let mut in_flight_id: Option<u64> = None;
    while off < tail {
        if off + ENTRY_HEADER_SIZE > tail {
            return Err(Error::Corruption(format!(
                "region {:#x}: tail {tail} splits an entry header at {off}",
                r.base
            )));
        }
        let header = img.read(r.base + off, ENTRY_HEADER_SIZE)?;
        let tagged = u64_le(&header[0..8]);
        let addr = u64_le(&header[8..16]);
        let len = u32_le(&header[16..20]) as u64;
        let stored_crc = u32_le(&header[20..24]);
        if off + ENTRY_HEADER_SIZE + len > tail {
            return Err(Error::Corruption(format!(
                "region {:#x}: entry at {off} extends past tail",
                r.base
            )));
        }
        let payload = img.read(r.base + off + ENTRY_HEADER_SIZE, len)?;
        let mut body = Vec::with_capacity(20 + payload.len());
        body.extend_from_slice(&header[0..20]);
        body.extend_from_slice(&payload);
        let mode = if tagged & MODE_REDO_BIT != 0 {
            TxMode::Redo
        } else {
            TxMode::Undo
        };
        if crc32(&body) != stored_crc {
            match rec.mode {
                // Redo entries are persisted before the tail ever covers
                // them, so a bad checksum there is real corruption.
                Some(TxMode::Redo) => {
                    return Err(Error::Corruption(format!(
                        "region {:#x}: redo entry at {off} fails checksum",
                        r.base
                    )));
                }
                // The in-flight undo entry races its own tail advance; a torn
                // final entry is an admissible crash artifact. Its in-place
                // store never executed, so skipping it is sound.
                _ => {
                    torn = true;
                    break;
                }
            }
        }
        let id = tagged & !MODE_REDO_BIT;
        match in_flight_id {
            None => in_flight_id = Some(id),
            Some(first) if id == first => {}
            // A foreign id marks bytes left over from an earlier,
            // already-truncated transaction. The undo tail races ahead of
            // entry persistence, so an intact leftover below it is an
            // admissible crash artifact: the in-flight write set ends at
            // the id flip. Redo fences every entry before publishing the
            // tail, so a leftover can never sit below a redo tail.
            Some(_) => match rec.mode {
                Some(TxMode::Redo) => {
                    return Err(Error::Corruption(format!(
                        "region {:#x}: entry at {off} belongs to another transaction",
                        r.base
                    )));
                }
                _ => break,
            },
        }
        if rec.mode.is_none() {
            rec.mode = Some(mode);
        }
        entries.push(ParsedEntry {
            mode,
            addr,
            payload,
        });
        off += ENTRY_HEADER_SIZE + len;
    }
    rec.stopped_at_torn_entry = torn;
    match rec.mode {
        Some(TxMode::Undo) => {
            for e in entries.iter().rev() {
                if e.mode != TxMode::Undo {
                    return Err(Error::Corruption(format!(
                        "region {:#x}: mixed entry modes below one tail",
                        r.base
                    )));
                }
                img.write(e.addr, &e.payload)?;
                rec.entries_applied += 1;
            }
        }
        Some(TxMode::Redo) => {
            for e in &entries {
                if e.mode != TxMode::Redo {
                    return Err(Error::Corruption(format!(
                        "region {:#x}: mixed entry modes below one tail",
                        r.base
                    )));
                }
                img.write(e.addr, &e.payload)?;
                rec.entries_applied += 1;
            }
        }
        None => {}
    }
    img.write_u64(r.base, 0)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::Memory;

    const DATA: u64 = 0x1000;
    const LOG: u64 = 0x10000;
    const LOG_CAP: u64 = 4096;

    fn setup(domain: PersistenceDomain) -> (Arc<Memory>, WalEngine) {
        let mem = Arc::new(Memory::new(domain));
        mem.map_region(DATA, 0x1000).unwrap();
        mem.map_region(LOG, LOG_CAP).unwrap();
        let eng = WalEngine::new(
            mem.clone(),
            0,
            RegionDesc {
                base: LOG,
                capacity: LOG_CAP,
            },
        );
        (mem, eng)
    }

    fn sfences(mem: &Memory) -> u64 {
        mem.counters().total.sfences
    }

    #[test]
    fn undo_write_phase_emits_one_fence_per_write() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        eng.begin(1, TxMode::Undo).unwrap();
        for w in 0..4u64 {
            let before = sfences(&mem);
            eng.write(DATA + 8 * w, &[w as u8 + 1; 8]).unwrap();
            assert_eq!(sfences(&mem) - before, 1);
        }
        let before = sfences(&mem);
        eng.commit().unwrap();
        assert_eq!(sfences(&mem) - before, 2, "undo commit is two fences");
        assert_eq!(sfences(&mem), 6, "W+2 for W=4");
    }

    #[test]
    fn redo_write_phase_emits_no_fences_and_commit_is_constant() {
        for w_count in [1usize, 2, 8] {
            let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
            eng.begin(1, TxMode::Redo).unwrap();
            for w in 0..w_count as u64 {
                eng.write(DATA + 8 * w, &[w as u8 + 1; 8]).unwrap();
            }
            assert_eq!(sfences(&mem), 0, "redo write phase is fence-free");
            eng.commit().unwrap();
            assert_eq!(sfences(&mem), 5, "redo commit fence count is constant");
        }
    }

    #[test]
    fn persistent_caches_elides_all_sync() {
        for mode in [TxMode::Undo, TxMode::Redo] {
            let (mem, mut eng) = setup(PersistenceDomain::PersistentCaches);
            eng.begin(1, mode).unwrap();
            eng.write(DATA, &[1u8; 8]).unwrap();
            eng.write(DATA + 64, &[2u8; 8]).unwrap();
            eng.commit().unwrap();
            let c = mem.counters().total;
            assert_eq!(c.sfences, 0);
            assert_eq!(c.clwbs, 0);
            assert_eq!(c.nt_stores, 0);
        }
    }

    #[test]
    fn empty_tx_appends_nothing_and_syncs_nothing() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        eng.begin(1, TxMode::Undo).unwrap();
        eng.commit().unwrap();
        let c = mem.counters().total;
        assert_eq!((c.stores, c.sfences, c.clwbs, c.nt_stores), (0, 0, 0, 0));
        assert_eq!(mem.peek(LOG, 8).unwrap(), vec![0u8; 8]);
    }

    #[test]
    fn redo_read_sees_pending_write_home_stays_old() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        mem.store(0, DATA, &[0xAA; 8]).unwrap();
        eng.begin(1, TxMode::Redo).unwrap();
        eng.write(DATA + 2, &[1, 2, 3]).unwrap();
        // Byte-granular merge over home bytes.
        assert_eq!(
            eng.read(DATA, 8).unwrap(),
            vec![0xAA, 0xAA, 1, 2, 3, 0xAA, 0xAA, 0xAA]
        );
        assert_eq!(mem.peek(DATA, 8).unwrap(), vec![0xAA; 8], "home untouched");
        eng.commit().unwrap();
        assert_eq!(
            mem.peek(DATA, 8).unwrap(),
            vec![0xAA, 0xAA, 1, 2, 3, 0xAA, 0xAA, 0xAA]
        );
    }

    #[test]
    fn undo_read_is_direct_and_write_is_in_place() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        eng.begin(1, TxMode::Undo).unwrap();
        eng.write(DATA, &[7u8; 8]).unwrap();
        assert_eq!(eng.read(DATA, 8).unwrap(), vec![7u8; 8]);
        assert_eq!(mem.peek(DATA, 8).unwrap(), vec![7u8; 8]);
        eng.commit().unwrap();
    }

    #[test]
    fn undo_abort_restores_old_values() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        mem.store(0, DATA, &[0x11; 8]).unwrap();
        eng.begin(1, TxMode::Undo).unwrap();
        eng.write(DATA, &[0x22; 8]).unwrap();
        eng.abort().unwrap();
        assert_eq!(mem.peek(DATA, 8).unwrap(), vec![0x11; 8]);
        assert_eq!(mem.peek(LOG, 8).unwrap(), vec![0u8; 8], "log truncated");
        assert!(!eng.in_tx());
    }

    #[test]
    fn log_full_undo_rolls_back_and_redo_discards() {
        let tiny = RegionDesc {
            base: LOG,
            capacity: LOG_HEADER_SIZE + 2 * entry_size(8),
        };
        let mem = Arc::new(Memory::new(PersistenceDomain::TransientCaches));
        mem.map_region(DATA, 0x1000).unwrap();
        mem.map_region(LOG, 4096).unwrap();

        let mut eng = WalEngine::new(mem.clone(), 0, tiny);
        mem.store(0, DATA, &[0x55; 24]).unwrap();
        eng.begin(1, TxMode::Undo).unwrap();
        eng.write(DATA, &[1u8; 8]).unwrap();
        eng.write(DATA + 8, &[2u8; 8]).unwrap();
        let err = eng.write(DATA + 16, &[3u8; 8]).unwrap_err();
        assert!(matches!(err, Error::LogFull { .. }));
        assert!(!eng.in_tx(), "the transaction is dead");
        assert_eq!(
            mem.peek(DATA, 24).unwrap(),
            vec![0x55; 24],
            "in-place writes rolled back"
        );

        let mut eng = WalEngine::new(mem.clone(), 0, tiny);
        eng.begin(2, TxMode::Redo).unwrap();
        eng.write(DATA, &[1u8; 8]).unwrap();
        eng.write(DATA + 8, &[2u8; 8]).unwrap();
        assert!(matches!(
            eng.write(DATA + 16, &[3u8; 8]),
            Err(Error::LogFull { .. })
        ));
        assert_eq!(mem.peek(DATA, 24).unwrap(), vec![0x55; 24]);
    }

    #[test]
    fn recovery_rolls_back_uncommitted_undo_tx() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        mem.store(0, DATA, &[0x11; 8]).unwrap();
        mem.clwb(0, DATA).unwrap();
        mem.sfence(0);
        eng.begin(1, TxMode::Undo).unwrap();
        eng.write(DATA, &[0x22; 8]).unwrap();
        // Crash before commit: the entry and tail advance are guaranteed,
        // the in-place store may or may not have persisted.
        mem.crash();
        for st in mem.crash_states(256).unwrap() {
            let mut img = st.persisted.clone();
            let report = recover(
                &mut img,
                &[RegionDesc {
                    base: LOG,
                    capacity: LOG_CAP,
                }],
            )
            .unwrap();
            assert_eq!(img.read(DATA, 8).unwrap(), vec![0x11; 8]);
            assert_eq!(img.read_u64(LOG).unwrap(), 0);
            assert!(report.regions[0].entries_applied <= 1);
        }
    }

    #[test]
    fn recovery_replays_committed_redo_tx() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        eng.begin(1, TxMode::Redo).unwrap();
        eng.write(DATA, &[0x33; 8]).unwrap();
        eng.write(DATA + 64, &[0x44; 8]).unwrap();
        eng.commit().unwrap();
        mem.crash();
        for st in mem.crash_states(4096).unwrap() {
            let mut img = st.persisted.clone();
            recover(
                &mut img,
                &[RegionDesc {
                    base: LOG,
                    capacity: LOG_CAP,
                }],
            )
            .unwrap();
            assert_eq!(img.read(DATA, 8).unwrap(), vec![0x33; 8]);
            assert_eq!(img.read(DATA + 64, 8).unwrap(), vec![0x44; 8]);
        }
    }

    #[test]
    fn recovery_is_idempotent() {
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        eng.begin(1, TxMode::Undo).unwrap();
        eng.write(DATA, &[9u8; 8]).unwrap();
        mem.crash();
        let regions = [RegionDesc {
            base: LOG,
            capacity: LOG_CAP,
        }];
        for st in mem.crash_states(64).unwrap() {
            let mut once = st.persisted.clone();
            recover(&mut once, &regions).unwrap();
            let mut twice = once.clone();
            recover(&mut twice, &regions).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn recovery_rejects_structural_corruption() {
        let (mem, _eng) = setup(PersistenceDomain::TransientCaches);
        mem.crash();
        let st = &mem.crash_states(4).unwrap()[0];

        // Tail beyond capacity.
        let mut img = st.persisted.clone();
        img.write_u64(LOG, LOG_CAP + 64).unwrap();
        let r = recover(
            &mut img,
            &[RegionDesc {
                base: LOG,
                capacity: LOG_CAP,
            }],
        );
        assert!(matches!(r, Err(Error::Corruption(_))));

        // Tail that splits an entry header.
        let mut img = st.persisted.clone();
        img.write_u64(LOG, LOG_HEADER_SIZE + 4).unwrap();
        let r = recover(
            &mut img,
            &[RegionDesc {
                base: LOG,
                capacity: LOG_CAP,
            }],
        );
        assert!(matches!(r, Err(Error::Corruption(_))));
    }

    #[test]
    fn recovery_ignores_zero_filled_log_with_forged_tail() {
        // A zeroed region below a forged tail must not be mistaken for valid
        // entries: the zero checksum does not verify.
        let (mem, _eng) = setup(PersistenceDomain::TransientCaches);
        mem.store(0, DATA, &[0x77; 8]).unwrap();
        mem.clwb(0, DATA).unwrap();
        mem.sfence(0);
        mem.crash();
        let st = &mem.crash_states(4).unwrap()[0];
        let mut img = st.persisted.clone();
        img.write_u64(LOG, LOG_HEADER_SIZE + ENTRY_HEADER_SIZE + 8)
            .unwrap();
        let report = recover(
            &mut img,
            &[RegionDesc {
                base: LOG,
                capacity: LOG_CAP,
            }],
        )
        .unwrap();
        assert_eq!(report.regions[0].entries_applied, 0);
        assert!(report.regions[0].stopped_at_torn_entry);
        assert_eq!(img.read(DATA, 8).unwrap(), vec![0x77; 8]);
        assert_eq!(img.read_u64(LOG).unwrap(), 0, "tail reset after recovery");
    }

    #[test]
    fn torn_final_undo_entry_is_skipped_never_fatal() {
        // Crash inside the append window: the tail advance (non-temporal
        // store) may persist opportunistically while the entry lines do not.
        // Recovery must treat the half-written final entry as absent and
        // still roll back everything before it.
        let (mem, mut eng) = setup(PersistenceDomain::TransientCaches);
        mem.store(0, DATA, &[0x11; 8]).unwrap();
        mem.store(0, DATA + 8, &[0x55; 8]).unwrap();
        mem.clwb(0, DATA).unwrap();
        mem.sfence(0);
        eng.begin(1, TxMode::Undo).unwrap();
        eng.write(DATA, &[0x22; 8]).unwrap();
        // Second append by hand, stopped before its sfence. Entry 2 occupies
        // [40, 72) within the region and so straddles a line boundary; its
        // tail advance lands in line 0.
        let entry2 = encode_entry(1, TxMode::Undo, DATA + 8, &[0x55; 8]);
        let head2 = LOG_HEADER_SIZE + entry_size(8);
        mem.store(0, LOG + head2, &entry2).unwrap();
        mem.clwb(0, LOG).unwrap();
        mem.clwb(0, LOG + 64).unwrap();
        mem.nt_store(0, LOG, &(head2 + entry_size(8)).to_le_bytes())
            .unwrap();
        mem.crash();
        let mut saw_torn = false;
        for st in mem.crash_states(4096).unwrap() {
            let mut img = st.persisted.clone();
            let report = recover(
                &mut img,
                &[RegionDesc {
                    base: LOG,
                    capacity: LOG_CAP,
                }],
            )
            .unwrap();
            saw_torn |= report.regions[0].stopped_at_torn_entry;
            assert_eq!(img.read(DATA, 8).unwrap(), vec![0x11; 8]);
            assert_eq!(img.read(DATA + 8, 8).unwrap(), vec![0x55; 8]);
            assert_eq!(img.read_u64(LOG).unwrap(), 0);
        }
        assert!(saw_torn, "expected at least one torn-tail state");
    }

    #[test]
    fn undo_recovery_stops_at_a_leftover_entry_from_an_earlier_tx() {
        // The tail advance for entry N can persist before entry N itself,
        // exposing whatever the previous transaction left at that offset.
        // If those leftover bytes happen to be an intact entry, rollback
        // must not apply it: the id flip bounds the in-flight write set.
        let (mem, _eng) = setup(PersistenceDomain::TransientCaches);
        // Home state at the crash: tx 7 is mid-flight on DATA, tx 6
        // committed DATA+8 earlier and its log got truncated.
        mem.store(0, DATA, &[0x22; 8]).unwrap();
        mem.store(0, DATA + 8, &[0x55; 8]).unwrap();
        mem.clwb(0, DATA).unwrap();
        mem.sfence(0);
        mem.crash();
        let mut img = mem.crash_states(4).unwrap()[0].persisted.clone();
        let entry1 = encode_entry(7, TxMode::Undo, DATA, &[0x11; 8]);
        let entry2 = encode_entry(6, TxMode::Undo, DATA + 8, &[0x99; 8]);
        img.write(LOG + LOG_HEADER_SIZE, &entry1).unwrap();
        img.write(LOG + LOG_HEADER_SIZE + entry_size(8), &entry2)
            .unwrap();
        img.write_u64(LOG, LOG_HEADER_SIZE + 2 * entry_size(8))
            .unwrap();
        let report = recover(
            &mut img,
            &[RegionDesc {
                base: LOG,
                capacity: LOG_CAP,
            }],
        )
        .unwrap();
        let rec = &report.regions[0];
        assert_eq!(rec.entries_applied, 1, "only the in-flight tx rolls back");
        assert!(!rec.stopped_at_torn_entry, "an intact leftover is not torn");
        assert_eq!(img.read(DATA, 8).unwrap(), vec![0x11; 8]);
        assert_eq!(
            img.read(DATA + 8, 8).unwrap(),
            vec![0x55; 8],
            "the earlier commit must survive"
        );
        assert_eq!(img.read_u64(LOG).unwrap(), 0);
    }

    #[test]
    fn redo_recovery_rejects_a_foreign_id_below_the_tail() {
        // A redo tail is published only after every entry is fenced, so a
        // foreign id below it can never be a benign leftover.
        let (mem, _eng) = setup(PersistenceDomain::TransientCaches);
        mem.store(0, DATA, &[0u8; 8]).unwrap();
        mem.clwb(0, DATA).unwrap();
        mem.sfence(0);
        mem.crash();
        let mut img = mem.crash_states(4).unwrap()[0].persisted.clone();
        let entry1 = encode_entry(7, TxMode::Redo, DATA, &[0x11; 8]);
        let entry2 = encode_entry(6, TxMode::Redo, DATA + 8, &[0x99; 8]);
        img.write(LOG + LOG_HEADER_SIZE, &entry1).unwrap();
        img.write(LOG + LOG_HEADER_SIZE + entry_size(8), &entry2)
            .unwrap();
        img.write_u64(LOG, LOG_HEADER_SIZE + 2 * entry_size(8))
            .unwrap();
        let r = recover(
            &mut img,
            &[RegionDesc {
                base: LOG,
                capacity: LOG_CAP,
            }],
        );
        assert!(matches!(r, Err(Error::Corruption(_))));
    }

    #[test]
    fn undo_mutation_skips_append_fence() {
        let mem = Arc::new(Memory::new(PersistenceDomain::TransientCaches));
        mem.map_region(DATA, 0x1000).unwrap();
        mem.map_region(LOG, LOG_CAP).unwrap();
        let mut eng = WalEngine::with_mutations(
            mem.clone(),
            0,
            RegionDesc {
                base: LOG,
                capacity: LOG_CAP,
            },
            Mutations {
                skip_undo_append_fence: true,
                ..Default::default()
            },
        );
        eng.begin(1, TxMode::Undo).unwrap();
        eng.write(DATA, &[1u8; 8]).unwrap();
        assert_eq!(sfences(&mem), 0);
        eng.commit().unwrap();
        assert_eq!(sfences(&mem), 2);
    }
}
