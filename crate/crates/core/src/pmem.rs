//! Cache-accurate simulated NVM.
//!
//! Memory is a set of mapped, line-aligned regions. Every access goes through
//! one of five primitives (`store`, `nt_store`, `load`, `clwb`, `sfence`)
//! whose volatile effect is immediate and whose persistence effect depends on
//! the configured [`PersistenceDomain`]:
//!
//! * `TransientCaches`: a store dirties its line; `clwb` marks the line
//!   flush-pending for the issuing thread; `sfence` makes the current value
//!   of that thread's flush-pending lines (and its prior non-temporal stores)
//!   persist-guaranteed. At a crash, every line may persist any prefix of its
//!   store history no shorter than the guaranteed prefix, independently of
//!   other lines.
//! * `PersistentCaches`: stores drain to persistence in per-thread program
//!   order. At a crash each thread contributes a program-order prefix of its
//!   stores; a value observed by a load from another thread has necessarily
//!   drained, so the observing load promotes the writer's prefix up to that
//!   store to guaranteed. Store groups (used for atomic commit publication)
//!   are never split by a prefix.
//!
//! Every primitive appends to a totally ordered event log and bumps per-thread
//! counters; [`Memory::crash_states`] enumerates the admissible persisted
//! images at the recorded crash point.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::sync::Mutex;

pub type ThreadId = usize;

pub const DEFAULT_LINE_SIZE: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PersistenceDomain {
    /// Caches are lost on power failure; persistence requires explicit
    /// flush + fence (or non-temporal stores + fence).
    TransientCaches,
    /// Caches are inside the persistence domain; data is persistent once it
    /// leaves the store buffer, which drains in program order (TSO).
    PersistentCaches,
}

impl PersistenceDomain {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transient" | "transientcaches" | "tc" => Ok(Self::TransientCaches),
            "persistent" | "persistentcaches" | "pc" => Ok(Self::PersistentCaches),
            other => Err(Error::usage(format!("unknown domain '{other}'"))),
        }
    }
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TransientCaches => "transient",
            Self::PersistentCaches => "persistent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Store,
    NtStore,
    Clwb,
    Sfence,
    Load,
    Crash,
}

impl EventKind {
    fn name(&self) -> &'static str {
        match self {
            EventKind::Store => "store",
            EventKind::NtStore => "nt_store",
            EventKind::Clwb => "clwb",
            EventKind::Sfence => "sfence",
            EventKind::Load => "load",
            EventKind::Crash => "crash",
        }
    }
}

/// One entry of the total-order event log. `bytes` carries store data; loads
/// record only their length (they are kept so that prefix replay reproduces
/// the persistent-caches read closure, and are omitted from text traces).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub thread: ThreadId,
    pub kind: EventKind,
    pub addr: u64,
    pub len: u32,
    pub bytes: Vec<u8>,
    pub group: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct KindCounts {
    pub stores: u64,
    pub nt_stores: u64,
    pub clwbs: u64,
    pub sfences: u64,
    pub loads: u64,
}

impl KindCounts {
    fn bump(&mut self, kind: EventKind) {
        match kind {
            EventKind::Store => self.stores += 1,
            EventKind::NtStore => self.nt_stores += 1,
            EventKind::Clwb => self.clwbs += 1,
            EventKind::Sfence => self.sfences += 1,
            EventKind::Load => self.loads += 1,
            EventKind::Crash => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct EventCounters {
    pub per_thread: Vec<KindCounts>,
    pub total: KindCounts,
}

impl EventCounters {
    pub fn thread(&self, t: ThreadId) -> KindCounts {
        self.per_thread.get(t).copied().unwrap_or_default()
    }
}

/// A persisted byte image over the mapped regions. Sparse: a mapped line
/// with no entry reads as zeros. Also used as the mutable image recovery
/// operates on.
#[derive(Debug, Clone)]
pub struct PersistedImage {
    line_size: u64,
    regions: Vec<(u64, u64)>,
    lines: BTreeMap<u64, Vec<u8>>,
}

impl PersistedImage {
    /// All-zero image over the given mapped regions.
    pub fn empty(line_size: u64, regions: Vec<(u64, u64)>) -> Self {
        assert!(
            line_size.is_power_of_two() && line_size >= 8,
            "line size must be a power of two >= 8"
        );
        PersistedImage {
            line_size,
            regions,
            lines: BTreeMap::new(),
        }
    }

    pub fn line_size(&self) -> u64 {
        self.line_size
    }

    pub fn regions(&self) -> &[(u64, u64)] {
        &self.regions
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        if len == 0 {
            return false;
        }
        let Some(end) = addr.checked_add(len) else {
            return false;
        };
        let mut a = addr & !(self.line_size - 1);
        while a < end {
            if !self.regions.iter().any(|(b, l)| a >= *b && a < b + l) {
                return false;
            }
            a += self.line_size;
        }
        true
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>> {
        if len == 0 {
            return Ok(Vec::new());
        }
        if !self.contains(addr, len) {
            return Err(Error::Fault { addr, len });
        }
        let mut out = Vec::with_capacity(len as usize);
        let mut a = addr;
        let end = addr + len;
        while a < end {
            let base = a & !(self.line_size - 1);
            let off = (a - base) as usize;
            let take = ((base + self.line_size).min(end) - a) as usize;
            match self.lines.get(&base) {
                Some(data) => out.extend_from_slice(&data[off..off + take]),
                None => out.extend(std::iter::repeat(0u8).take(take)),
            }
            a += take as u64;
        }
        Ok(out)
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<()> {
        if bytes.is_empty() {
            return Ok(());
        }
        if !self.contains(addr, bytes.len() as u64) {
            return Err(Error::Fault {
                addr,
                len: bytes.len() as u64,
            });
        }
        let ls = self.line_size as usize;
        let mut a = addr;
        let mut src = bytes;
        while !src.is_empty() {
            let base = a & !(self.line_size - 1);
            let off = (a - base) as usize;
            let take = (ls - off).min(src.len());
            let line = self.lines.entry(base).or_insert_with(|| vec![0u8; ls]);
            line[off..off + take].copy_from_slice(&src[..take]);
            a += take as u64;
            src = &src[take..];
        }
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64> {
        Ok(crate::util::u64_le(&self.read(addr, 8)?))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Result<()> {
        self.write(addr, &v.to_le_bytes())
    }

    /// Stable content digest, normalized: all-zero lines contribute nothing,
    /// so sparse and materialized representations of the same bytes agree.
    pub fn digest(&self) -> String {
        crate::util::fnv64_hex(
            self.lines
                .iter()
                .filter(|(_, data)| data.iter().any(|b| *b != 0))
                .flat_map(|(base, data)| [base.to_le_bytes().to_vec(), data.clone()]),
        )
    }

    fn line_norm(&self, base: u64) -> Option<&[u8]> {
        self.lines
            .get(&base)
            .map(|v| v.as_slice())
            .filter(|v| v.iter().any(|b| *b != 0))
    }

    /// Equality restricted to the lines overlapping [addr, addr+len).
    pub fn eq_range(&self, other: &PersistedImage, addr: u64, len: u64) -> bool {
        if len == 0 {
            return true;
        }
        let first = addr & !(self.line_size - 1);
        let last = (addr + len - 1) & !(self.line_size - 1);
        let mut base = first;
        while base <= last {
            if self.line_norm(base) != other.line_norm(base) {
                return false;
            }
            base += self.line_size;
        }
        true
    }

    /// Materialized lines only; absent mapped lines are zero-filled.
    pub fn lines(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.lines.iter().map(|(b, v)| (*b, v.as_slice()))
    }
}

impl PartialEq for PersistedImage {
    fn eq(&self, other: &Self) -> bool {
        if self.line_size != other.line_size || self.regions != other.regions {
            return false;
        }
        let keys: std::collections::BTreeSet<u64> = self
            .lines
            .keys()
            .chain(other.lines.keys())
            .copied()
            .collect();
        keys.into_iter()
            .all(|b| self.line_norm(b) == other.line_norm(b))
    }
}

impl Eq for PersistedImage {}

/// How the per-line (transient) or per-thread (persistent) persistence cuts
/// were chosen for one crash state. Enough to rebuild the state exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CutChoices {
    /// (line base, persisted prefix length of that line's store history)
    Lines(Vec<(u64, usize)>),
    /// (thread id, persisted prefix length of that thread's store sequence)
    Threads(Vec<(ThreadId, usize)>),
}

impl CutChoices {
    pub fn compact(&self) -> String {
        let mut s = String::new();
        match self {
            CutChoices::Lines(v) => {
                s.push('L');
                for (base, p) in v {
                    let _ = write!(s, ":{base:x}={p}");
                }
            }
            CutChoices::Threads(v) => {
                s.push('T');
                for (t, p) in v {
                    let _ = write!(s, ":{t}={p}");
                }
            }
        }
        s
    }
}

/// One admissible post-crash persisted state.
#[derive(Debug, Clone)]
pub struct CrashState {
    /// Sequence numbers of store events whose bytes are fully contained in
    /// the persisted image (persist-guaranteed events always appear).
    pub witness: Vec<u64>,
    pub choices: CutChoices,
    pub persisted: PersistedImage,
}

// Per-line fragment of a store event.
#[derive(Debug, Clone)]
struct Frag {
    ev: usize,
    thread: ThreadId,
    // Index of the owning event in the thread's store sequence.
    tpos: usize,
    off: usize,
    bytes: Vec<u8>,
}

#[derive(Debug, Default)]
struct Line {
    volatile: Vec<u8>,
    hist: Vec<Frag>,
    // Prefix of `hist` that must appear in every crash state.
    guaranteed: usize,
    flush_marks: HashSet<ThreadId>,
}

#[derive(Debug, Clone, Copy)]
struct PcStore {
    ev: usize,
    group: Option<u64>,
}

struct Inner {
    domain: PersistenceDomain,
    line_size: u64,
    tracing: bool,
    sample_seed: u64,
    lines: BTreeMap<u64, Line>,
    regions: Vec<(u64, u64)>,
    events: Vec<Event>,
    counters: EventCounters,
    next_group: u64,
    // TransientCaches: per-thread nt-stores awaiting the next fence.
    nt_pending: Vec<Vec<(u64, usize)>>,
    // PersistentCaches: per-thread store sequence and guaranteed prefix.
    thread_stores: Vec<Vec<PcStore>>,
    thread_guaranteed: Vec<usize>,
    crashed: bool,
}

pub struct Memory {
    inner: Mutex<Inner>,
}

impl Inner {
    fn ensure_thread(&mut self, t: ThreadId) {
        if self.counters.per_thread.len() <= t {
            self.counters.per_thread.resize(t + 1, KindCounts::default());
        }
        if self.nt_pending.len() <= t {
            self.nt_pending.resize_with(t + 1, Vec::new);
        }
        if self.thread_stores.len() <= t {
            self.thread_stores.resize_with(t + 1, Vec::new);
        }
        if self.thread_guaranteed.len() <= t {
            self.thread_guaranteed.resize(t + 1, 0);
        }
    }

    fn push_event(
        &mut self,
        t: ThreadId,
        kind: EventKind,
        addr: u64,
        len: u32,
        bytes: Vec<u8>,
        group: Option<u64>,
    ) -> usize {
        self.ensure_thread(t);
        self.counters.per_thread[t].bump(kind);
        self.counters.total.bump(kind);
        let idx = self.events.len();
        if self.tracing {
            self.events.push(Event {
                seq: idx as u64,
                thread: t,
                kind,
                addr,
                len,
                bytes,
                group,
            });
        }
        idx
    }

    fn check_mapped(&self, addr: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Err(Error::usage("zero-length access"));
        }
        let end = addr.checked_add(len).ok_or(Error::Fault { addr, len })?;
        let mut a = addr & !(self.line_size - 1);
        while a < end {
            if !self.regions.iter().any(|(b, l)| a >= *b && a < b + l) {
                return Err(Error::Fault { addr, len });
            }
            a += self.line_size;
        }
        Ok(())
    }

    /// Materializes the line on first touch; mapped lines start zeroed.
    fn line_entry(&mut self, base: u64) -> &mut Line {
        let ls = self.line_size as usize;
        self.lines.entry(base).or_insert_with(|| Line {
            volatile: vec![0u8; ls],
            ..Line::default()
        })
    }

    fn write_fragments(&mut self, t: ThreadId, addr: u64, bytes: &[u8], ev: usize, nt: bool) {
        let tpos = self.thread_stores[t].len().saturating_sub(1);
        let ls = self.line_size;
        let mut a = addr;
        let mut src = bytes;
        while !src.is_empty() {
            let base = a & !(ls - 1);
            let off = (a - base) as usize;
            let take = (ls as usize - off).min(src.len());
            self.line_entry(base);
            let line = self.lines.get_mut(&base).unwrap();
            line.volatile[off..off + take].copy_from_slice(&src[..take]);
            if self.tracing {
                let idx = line.hist.len();
                line.hist.push(Frag {
                    ev,
                    thread: t,
                    tpos,
                    off,
                    bytes: src[..take].to_vec(),
                });
                if nt && self.domain == PersistenceDomain::TransientCaches {
                    self.nt_pending[t].push((base, idx));
                }
            }
            a += take as u64;
            src = &src[take..];
        }
    }

    fn store_one(
        &mut self,
        t: ThreadId,
        addr: u64,
        bytes: &[u8],
        nt: bool,
        group: Option<u64>,
    ) -> Result<()> {
        self.check_mapped(addr, bytes.len() as u64)?;
        self.ensure_thread(t);
        let kind = if nt { EventKind::NtStore } else { EventKind::Store };
        let ev = self.push_event(t, kind, addr, bytes.len() as u32, bytes.to_vec(), group);
        if self.tracing {
            self.thread_stores[t].push(PcStore { ev, group });
        }
        self.write_fragments(t, addr, bytes, ev, nt);
        Ok(())
    }

    fn load_one(&mut self, t: ThreadId, addr: u64, len: u64) -> Result<Vec<u8>> {
        self.check_mapped(addr, len)?;
        self.ensure_thread(t);
        self.push_event(t, EventKind::Load, addr, len as u32, Vec::new(), None);
        let mut out = Vec::with_capacity(len as usize);
        let ls = self.line_size;
        let mut a = addr;
        let end = addr + len;
        while a < end {
            let base = a & !(ls - 1);
            let off = (a - base) as usize;
            let take = ((base + ls).min(end) - a) as usize;
            if self.domain == PersistenceDomain::PersistentCaches && self.tracing {
                // A value visible to another thread has left the writer's
                // store buffer, so it (and the writer's earlier stores) must
                // survive any crash from here on.
                let mut promote: Vec<(ThreadId, usize)> = Vec::new();
                if let Some(line) = self.lines.get(&base) {
                    for b in off..off + take {
                        for frag in line.hist.iter().rev() {
                            if b >= frag.off && b < frag.off + frag.bytes.len() {
                                if frag.thread != t {
                                    promote.push((frag.thread, frag.tpos + 1));
                                }
                                break;
                            }
                        }
                    }
                }
                for (wt, upto) in promote {
                    if self.thread_guaranteed[wt] < upto {
                        self.thread_guaranteed[wt] = upto;
                    }
                }
            }
            match self.lines.get(&base) {
                Some(line) => out.extend_from_slice(&line.volatile[off..off + take]),
                None => out.extend(std::iter::repeat(0u8).take(take)),
            }
            a += take as u64;
        }
        Ok(out)
    }

    fn sfence_one(&mut self, t: ThreadId) {
        self.ensure_thread(t);
        self.push_event(t, EventKind::Sfence, 0, 0, Vec::new(), None);
        if !self.tracing {
            return;
        }
        match self.domain {
            PersistenceDomain::TransientCaches => {
                for line in self.lines.values_mut() {
                    if line.flush_marks.remove(&t) {
                        line.guaranteed = line.hist.len();
                    }
                }
                for (base, idx) in std::mem::take(&mut self.nt_pending[t]) {
                    let line = self.lines.get_mut(&base).unwrap();
                    if line.guaranteed < idx + 1 {
                        line.guaranteed = idx + 1;
                    }
                }
            }
            PersistenceDomain::PersistentCaches => {
                self.thread_guaranteed[t] = self.thread_stores[t].len();
            }
        }
    }

    fn line_value_at(&self, base: u64, prefix: usize) -> Vec<u8> {
        let mut v = vec![0u8; self.line_size as usize];
        if let Some(line) = self.lines.get(&base) {
            for frag in &line.hist[..prefix] {
                v[frag.off..frag.off + frag.bytes.len()].copy_from_slice(&frag.bytes);
            }
        }
        v
    }

    fn zero_image(&self) -> PersistedImage {
        PersistedImage {
            line_size: self.line_size,
            regions: self.regions.clone(),
            lines: BTreeMap::new(),
        }
    }
}

impl Memory {
    pub fn new(domain: PersistenceDomain) -> Self {
        Self::with_options(domain, DEFAULT_LINE_SIZE, true, 0)
    }

    /// `tracing = false` drops event and history recording (counters and the
    /// volatile image still work); crash analysis then becomes unavailable.
    pub fn with_options(
        domain: PersistenceDomain,
        line_size: u64,
        tracing: bool,
        sample_seed: u64,
    ) -> Self {
        assert!(
            line_size.is_power_of_two() && line_size >= 8,
            "line size must be a power of two >= 8"
        );
        Memory {
            inner: Mutex::new(Inner {
                domain,
                line_size,
                tracing,
                sample_seed,
                lines: BTreeMap::new(),
                regions: Vec::new(),
                events: Vec::new(),
                counters: EventCounters::default(),
                next_group: 1,
                nt_pending: Vec::new(),
                thread_stores: Vec::new(),
                thread_guaranteed: Vec::new(),
                crashed: false,
            }),
        }
    }

    pub fn domain(&self) -> PersistenceDomain {
        self.inner.lock().unwrap().domain
    }

    pub fn line_size(&self) -> u64 {
        self.inner.lock().unwrap().line_size
    }

    /// Maps a zero-filled region. Base and length are rounded out to line
    /// boundaries; overlap with an existing region is a usage error.
    pub fn map_region(&self, base: u64, len: u64) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if len == 0 {
            return Err(Error::usage("cannot map an empty region"));
        }
        let ls = inner.line_size;
        let start = base & !(ls - 1);
        let end = base
            .checked_add(len)
            .ok_or(Error::usage("region wraps the address space"))?;
        let end = (end + ls - 1) & !(ls - 1);
        if inner.regions.iter().any(|(b, l)| start < b + l && *b < end) {
            return Err(Error::usage(format!(
                "region {start:#x}..{end:#x} overlaps an existing mapping"
            )));
        }
        inner.regions.push((start, end - start));
        Ok(())
    }

    pub fn regions(&self) -> Vec<(u64, u64)> {
        self.inner.lock().unwrap().regions.clone()
    }

    pub fn store(&self, t: ThreadId, addr: u64, bytes: &[u8]) -> Result<()> {
        self.inner.lock().unwrap().store_one(t, addr, bytes, false, None)
    }

    /// Store that bypasses the cache: the line is not dirtied, and the value
    /// becomes persist-guaranteed at this thread's next fence.
    pub fn nt_store(&self, t: ThreadId, addr: u64, bytes: &[u8]) -> Result<()> {
        self.inner.lock().unwrap().store_one(t, addr, bytes, true, None)
    }

    /// Atomically applies a batch of stores as one publication group: the
    /// volatile effect is a single step, and under PersistentCaches no crash
    /// prefix may split the group.
    pub fn store_group(&self, t: ThreadId, writes: &[(u64, Vec<u8>)]) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        for (addr, bytes) in writes {
            inner.check_mapped(*addr, bytes.len() as u64)?;
        }
        let group = Some(inner.next_group);
        inner.next_group += 1;
        for (addr, bytes) in writes {
            inner.store_one(t, *addr, bytes, false, group)?;
        }
        Ok(())
    }

    pub fn load(&self, t: ThreadId, addr: u64, len: u64) -> Result<Vec<u8>> {
        self.inner.lock().unwrap().load_one(t, addr, len)
    }

    /// Volatile read without an event or counter; for assertions and drivers.
    pub fn peek(&self, addr: u64, len: u64) -> Result<Vec<u8>> {
        let inner = self.inner.lock().unwrap();
        inner.check_mapped(addr, len)?;
        let mut out = Vec::with_capacity(len as usize);
        let ls = inner.line_size;
        let mut a = addr;
        let end = addr + len;
        while a < end {
            let base = a & !(ls - 1);
            let off = (a - base) as usize;
            let take = ((base + ls).min(end) - a) as usize;
            match inner.lines.get(&base) {
                Some(line) => out.extend_from_slice(&line.volatile[off..off + take]),
                None => out.extend(std::iter::repeat(0u8).take(take)),
            }
            a += take as u64;
        }
        Ok(out)
    }

    /// Marks the line containing `addr` flush-pending for `t`. Persistence is
    /// only guaranteed once the same thread fences.
    pub fn clwb(&self, t: ThreadId, addr: u64) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        inner.check_mapped(addr, 1)?;
        inner.ensure_thread(t);
        let base = addr & !(inner.line_size - 1);
        inner.push_event(t, EventKind::Clwb, base, 0, Vec::new(), None);
        if inner.tracing && inner.domain == PersistenceDomain::TransientCaches {
            inner.line_entry(base).flush_marks.insert(t);
        }
        Ok(())
    }

    pub fn sfence(&self, t: ThreadId) {
        self.inner.lock().unwrap().sfence_one(t);
    }

    /// Appends the crash marker, finalizing the event log for analysis.
    pub fn crash(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.push_event(0, EventKind::Crash, 0, 0, Vec::new(), None);
        inner.crashed = true;
    }

    pub fn counters(&self) -> EventCounters {
        self.inner.lock().unwrap().counters.clone()
    }

    pub fn events(&self) -> Vec<Event> {
        self.inner.lock().unwrap().events.clone()
    }

    /// Whether the line holding `addr` has temporal stores newer than its
    /// guaranteed-persistent prefix.
    pub fn line_dirty(&self, addr: u64) -> Result<bool> {
        let inner = self.inner.lock().unwrap();
        inner.check_mapped(addr, 1)?;
        let base = addr & !(inner.line_size - 1);
        let Some(line) = inner.lines.get(&base) else {
            return Ok(false);
        };
        Ok(line.hist[line.guaranteed..]
            .iter()
            .any(|f| inner.events[f.ev].kind == EventKind::Store))
    }

    pub fn line_flush_pending(&self, addr: u64) -> Result<bool> {
        let inner = self.inner.lock().unwrap();
        inner.check_mapped(addr, 1)?;
        let base = addr & !(inner.line_size - 1);
        Ok(inner
            .lines
            .get(&base)
            .is_some_and(|line| !line.flush_marks.is_empty()))
    }

    /// The persisted image containing exactly the persist-guaranteed events
    /// (the minimal admissible crash state's image).
    pub fn snapshot_min(&self) -> PersistedImage {
        let inner = self.inner.lock().unwrap();
        match inner.domain {
            PersistenceDomain::TransientCaches => {
                let mut img = inner.zero_image();
                for (base, line) in &inner.lines {
                    let v = inner.line_value_at(*base, line.guaranteed);
                    img.lines.insert(*base, v);
                }
                img
            }
            PersistenceDomain::PersistentCaches => {
                let mut img = inner.zero_image();
                let mut evs: Vec<usize> = Vec::new();
                for (t, stores) in inner.thread_stores.iter().enumerate() {
                    let upto = inner.thread_guaranteed[t].min(stores.len());
                    evs.extend(stores[..upto].iter().map(|s| s.ev));
                }
                evs.sort_unstable();
                for ev in evs {
                    let e = &inner.events[ev];
                    img.write(e.addr, &e.bytes).unwrap();
                }
                img
            }
        }
    }

    pub fn snapshot_persistent(&self, state: &CrashState) -> PersistedImage {
        state.persisted.clone()
    }

    /// Enumerates admissible crash states at the recorded crash point.
    /// Exhaustive when the admissible count is at most `max_states`; otherwise
    /// a deterministic sample that always contains the minimal and maximal
    /// states. Requires tracing and a prior [`Memory::crash`].
    pub fn crash_states(&self, max_states: usize) -> Result<Vec<CrashState>> {
        let inner = self.inner.lock().unwrap();
        if !inner.tracing {
            return Err(Error::usage("crash analysis requires tracing"));
        }
        if !inner.crashed {
            return Err(Error::usage("crash_states before crash marker"));
        }
        if max_states == 0 {
            return Err(Error::usage("max_states must be positive"));
        }
        match inner.domain {
            PersistenceDomain::TransientCaches => Self::crash_states_tc(&inner, max_states),
            PersistenceDomain::PersistentCaches => Self::crash_states_pc(&inner, max_states),
        }
    }

    fn crash_states_tc(inner: &Inner, max_states: usize) -> Result<Vec<CrashState>> {
        // Free lines: those with unguaranteed history entries to choose from.
        let free: Vec<(u64, usize, usize)> = inner
            .lines
            .iter()
            .filter(|(_, l)| l.hist.len() > l.guaranteed)
            .map(|(b, l)| (*b, l.guaranteed, l.hist.len()))
            .collect();
        let mut count: u128 = 1;
        for (_, lo, hi) in &free {
            count = count.saturating_mul((hi - lo + 1) as u128);
        }

        // Fragment lists per event, for witness computation.
        let mut ev_frags: BTreeMap<usize, Vec<(u64, usize)>> = BTreeMap::new();
        for (base, line) in &inner.lines {
            for (i, frag) in line.hist.iter().enumerate() {
                ev_frags.entry(frag.ev).or_default().push((*base, i));
            }
        }

        let base_img = {
            let mut img = inner.zero_image();
            for (base, line) in &inner.lines {
                img.lines.insert(*base, inner.line_value_at(*base, line.guaranteed));
            }
            img
        };

        let build = |choice: &[usize]| -> CrashState {
            let mut img = base_img.clone();
            let mut chosen: BTreeMap<u64, usize> = inner
                .lines
                .iter()
                .map(|(b, l)| (*b, l.guaranteed))
                .collect();
            for (k, (base, _, _)) in free.iter().enumerate() {
                chosen.insert(*base, choice[k]);
                img.lines.insert(*base, inner.line_value_at(*base, choice[k]));
            }
            let mut witness = Vec::new();
            for (ev, frags) in &ev_frags {
                if frags.iter().all(|(b, i)| chosen[b] > *i) {
                    witness.push(*ev as u64);
                }
            }
            let choices = CutChoices::Lines(
                free.iter()
                    .enumerate()
                    .map(|(k, (b, _, _))| (*b, choice[k]))
                    .collect(),
            );
            CrashState {
                witness,
                choices,
                persisted: img,
            }
        };

        let mut out = Vec::new();
        if count <= max_states as u128 {
            // Mixed-radix walk over per-line prefix choices.
            let mut choice: Vec<usize> = free.iter().map(|(_, lo, _)| *lo).collect();
            loop {
                out.push(build(&choice));
                let mut k = 0;
                loop {
                    if k == free.len() {
                        return Ok(out);
                    }
                    if choice[k] < free[k].2 {
                        choice[k] += 1;
                        break;
                    }
                    choice[k] = free[k].1;
                    k += 1;
                }
            }
        }

        let minimal: Vec<usize> = free.iter().map(|(_, lo, _)| *lo).collect();
        let maximal: Vec<usize> = free.iter().map(|(_, _, hi)| *hi).collect();
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(inner.sample_seed);
        for c in [minimal, maximal] {
            if seen.insert(c.clone()) {
                out.push(build(&c));
            }
        }
        let mut attempts = 0usize;
        while out.len() < max_states && attempts < max_states.saturating_mul(32) {
            attempts += 1;
            let c: Vec<usize> = free
                .iter()
                .map(|(_, lo, hi)| rng.gen_range(*lo..=*hi))
                .collect();
            if seen.insert(c.clone()) {
                out.push(build(&c));
            }
        }
        Ok(out)
    }

    fn crash_states_pc(inner: &Inner, max_states: usize) -> Result<Vec<CrashState>> {
        // Valid cut positions per thread: at or past the guaranteed prefix,
        // never splitting a publication group.
        let mut threads: Vec<(ThreadId, Vec<usize>)> = Vec::new();
        for (t, stores) in inner.thread_stores.iter().enumerate() {
            let n = stores.len();
            if n == 0 {
                continue;
            }
            let splits_group = |pos: usize| -> bool {
                pos > 0
                    && pos < n
                    && stores[pos - 1].group.is_some()
                    && stores[pos - 1].group == stores[pos].group
            };
            let mut floor = inner.thread_guaranteed[t].min(n);
            while splits_group(floor) {
                floor += 1;
            }
            let cuts: Vec<usize> = (floor..=n).filter(|p| !splits_group(*p)).collect();
            threads.push((t, cuts));
        }
        let mut count: u128 = 1;
        for (_, cuts) in &threads {
            count = count.saturating_mul(cuts.len() as u128);
        }

        let build = |choice: &[usize]| -> CrashState {
            let mut evs: Vec<usize> = Vec::new();
            let mut cut_list = Vec::new();
            for ((t, cuts), ci) in threads.iter().zip(choice) {
                let cut = cuts[*ci];
                cut_list.push((*t, cut));
                evs.extend(inner.thread_stores[*t][..cut].iter().map(|s| s.ev));
            }
            evs.sort_unstable();
            let mut img = inner.zero_image();
            let mut witness = Vec::with_capacity(evs.len());
            for ev in evs {
                let e = &inner.events[ev];
                img.write(e.addr, &e.bytes).unwrap();
                witness.push(e.seq);
            }
            CrashState {
                witness,
                choices: CutChoices::Threads(cut_list),
                persisted: img,
            }
        };

        let mut out = Vec::new();
        if count <= max_states as u128 {
            let mut choice = vec![0usize; threads.len()];
            loop {
                out.push(build(&choice));
                let mut k = 0;
                loop {
                    if k == threads.len() {
                        return Ok(out);
                    }
                    if choice[k] + 1 < threads[k].1.len() {
                        choice[k] += 1;
                        break;
                    }
                    choice[k] = 0;
                    k += 1;
                }
            }
        }

        let minimal = vec![0usize; threads.len()];
        let maximal: Vec<usize> = threads.iter().map(|(_, c)| c.len() - 1).collect();
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(inner.sample_seed);
        for c in [minimal, maximal] {
            if seen.insert(c.clone()) {
                out.push(build(&c));
            }
        }
        let mut attempts = 0usize;
        while out.len() < max_states && attempts < max_states.saturating_mul(32) {
            attempts += 1;
            let c: Vec<usize> = threads
                .iter()
                .map(|(_, cuts)| rng.gen_range(0..cuts.len()))
                .collect();
            if seen.insert(c.clone()) {
                out.push(build(&c));
            }
        }
        Ok(out)
    }

    /// Rebuilds a memory by re-executing an event prefix (loads included, so
    /// the persistent-caches read closure is reproduced).
    pub fn replay_prefix(
        domain: PersistenceDomain,
        line_size: u64,
        regions: &[(u64, u64)],
        events: &[Event],
        upto: usize,
    ) -> Result<Memory> {
        let mem = Memory::with_options(domain, line_size, true, 0);
        for (base, len) in regions {
            mem.map_region(*base, *len)?;
        }
        {
            let mut inner = mem.inner.lock().unwrap();
            for e in &events[..upto.min(events.len())] {
                match e.kind {
                    EventKind::Store => {
                        inner.store_one(e.thread, e.addr, &e.bytes, false, e.group)?
                    }
                    EventKind::NtStore => {
                        inner.store_one(e.thread, e.addr, &e.bytes, true, e.group)?
                    }
                    EventKind::Load => {
                        inner.load_one(e.thread, e.addr, e.len as u64)?;
                    }
                    EventKind::Clwb => {
                        inner.ensure_thread(e.thread);
                        let base = e.addr & !(line_size - 1);
                        inner.check_mapped(base, 1)?;
                        let th = e.thread;
                        inner.push_event(th, EventKind::Clwb, base, 0, Vec::new(), None);
                        if inner.domain == PersistenceDomain::TransientCaches {
                            inner.line_entry(base).flush_marks.insert(th);
                        }
                    }
                    EventKind::Sfence => inner.sfence_one(e.thread),
                    EventKind::Crash => {
                        inner.push_event(0, EventKind::Crash, 0, 0, Vec::new(), None);
                        inner.crashed = true;
                    }
                }
            }
            if !inner.crashed {
                inner.push_event(0, EventKind::Crash, 0, 0, Vec::new(), None);
                inner.crashed = true;
            }
        }
        Ok(mem)
    }

    /// Text trace: one event per line, `seq thread kind addr len hexbytes`.
    /// Loads are internal records and are not dumped.
    pub fn dump_trace(&self) -> String {
        let inner = self.inner.lock().unwrap();
        let mut s = String::new();
        for e in &inner.events {
            if e.kind == EventKind::Load {
                continue;
            }
            let addr = match e.kind {
                EventKind::Sfence | EventKind::Crash => "-".to_string(),
                _ => format!("{:#x}", e.addr),
            };
            let hex = if e.bytes.is_empty() {
                "-".to_string()
            } else {
                e.bytes.iter().fold(String::new(), |mut acc, b| {
                    let _ = write!(acc, "{b:02x}");
                    acc
                })
            };
            let _ = writeln!(s, "{} {} {} {} {} {}", e.seq, e.thread, e.kind.name(), addr, e.len, hex);
        }
        s
    }

    pub fn parse_trace(text: &str) -> Result<Vec<Event>> {
        let mut out = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::Parse(format!(
                    "line {}: expected 6 fields, got {}",
                    lineno + 1,
                    parts.len()
                )));
            }
            let seq: u64 = parts[0]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad seq", lineno + 1)))?;
            let thread: usize = parts[1]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad thread", lineno + 1)))?;
            let kind = match parts[2] {
                "store" => EventKind::Store,
                "nt_store" => EventKind::NtStore,
                "clwb" => EventKind::Clwb,
                "sfence" => EventKind::Sfence,
                "crash" => EventKind::Crash,
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown kind '{other}'",
                        lineno + 1
                    )))
                }
            };
            let addr = if parts[3] == "-" {
                0
            } else {
                let hexpart = parts[3].trim_start_matches("0x");
                u64::from_str_radix(hexpart, 16)
                    .map_err(|_| Error::Parse(format!("line {}: bad addr", lineno + 1)))?
            };
            let len: u32 = parts[4]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad len", lineno + 1)))?;
            let bytes = if parts[5] == "-" {
                Vec::new()
            } else {
                let h = parts[5];
                if h.len() % 2 != 0 {
                    return Err(Error::Parse(format!("line {}: odd hex length", lineno + 1)));
                }
                (0..h.len() / 2)
                    .map(|i| {
                        u8::from_str_radix(&h[2 * i..2 * i + 2], 16)
                            .map_err(|_| Error::Parse(format!("line {}: bad hex", lineno + 1)))
                    })
                    .collect::<Result<Vec<u8>>>()?
            };
            match kind {
                EventKind::Store | EventKind::NtStore => {
                    if bytes.len() != len as usize {
                        return Err(Error::Parse(format!(
                            "line {}: len {} != {} data bytes",
                            lineno + 1,
                            len,
                            bytes.len()
                        )));
                    }
                }
                _ => {}
            }
            out.push(Event {
                seq,
                thread,
                kind,
                addr,
                len,
                bytes,
                group: None,
            });
        }
        Ok(out)
    }

    /// Current volatile contents as an image (crash-free final states).
    pub fn volatile_image(&self) -> PersistedImage {
        let inner = self.inner.lock().unwrap();
        PersistedImage {
            line_size: inner.line_size,
            regions: inner.regions.clone(),
            lines: inner
                .lines
                .iter()
                .map(|(b, l)| (*b, l.volatile.clone()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem(domain: PersistenceDomain) -> Memory {
        let m = Memory::new(domain);
        m.map_region(0x1000, 0x1000).unwrap();
        m
    }

    fn images(states: &[CrashState]) -> Vec<String> {
        let mut v: Vec<String> = states.iter().map(|s| s.persisted.digest()).collect();
        v.sort();
        v.dedup();
        v
    }

    #[test]
    fn store_visible_immediately_both_domains() {
        for d in [
            PersistenceDomain::TransientCaches,
            PersistenceDomain::PersistentCaches,
        ] {
            let m = mem(d);
            m.store(0, 0x1000, &[7u8; 8]).unwrap();
            assert_eq!(m.load(1, 0x1000, 8).unwrap(), vec![7u8; 8]);
        }
    }

    #[test]
    fn unflushed_store_may_or_may_not_persist() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8; 8]).unwrap();
        m.crash();
        let states = m.crash_states(1024).unwrap();
        assert_eq!(states.len(), 2);
        let vals: HashSet<Vec<u8>> = states
            .iter()
            .map(|s| s.persisted.read(0x1000, 8).unwrap())
            .collect();
        assert!(vals.contains(&vec![0u8; 8]));
        assert!(vals.contains(&vec![1u8; 8]));
    }

    #[test]
    fn flushed_and_fenced_store_always_persists() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8; 8]).unwrap();
        m.clwb(0, 0x1000).unwrap();
        m.sfence(0);
        m.crash();
        let states = m.crash_states(1024).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].persisted.read(0x1000, 8).unwrap(), vec![1u8; 8]);
        // The guaranteed store is in every witness.
        assert!(states[0].witness.contains(&0));
    }

    #[test]
    fn fence_orders_only_prior_flushes() {
        // store a; clwb a; sfence; store b  =>  a always new, b free.
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8; 8]).unwrap();
        m.clwb(0, 0x1000).unwrap();
        m.sfence(0);
        m.store(0, 0x1040, &[2u8; 8]).unwrap();
        m.crash();
        let states = m.crash_states(1024).unwrap();
        assert_eq!(states.len(), 2);
        for s in &states {
            assert_eq!(s.persisted.read(0x1000, 8).unwrap(), vec![1u8; 8]);
        }
        let bvals: HashSet<Vec<u8>> = states
            .iter()
            .map(|s| s.persisted.read(0x1040, 8).unwrap())
            .collect();
        assert_eq!(bvals.len(), 2);
    }

    #[test]
    fn k_unguaranteed_lines_give_two_to_the_k_states() {
        let m = mem(PersistenceDomain::TransientCaches);
        let k = 5;
        for i in 0..k {
            m.store(0, 0x1000 + 64 * i, &[i as u8 + 1; 8]).unwrap();
        }
        m.crash();
        let states = m.crash_states(1 << 12).unwrap();
        assert_eq!(states.len(), 1 << k);
        assert_eq!(images(&states).len(), 1 << k);
    }

    #[test]
    fn line_prefix_rule_within_one_line() {
        // Two stores to the same line: admissible values are the history
        // prefixes, never the second store without the first.
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8; 8]).unwrap();
        m.store(0, 0x1008, &[2u8; 8]).unwrap();
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 3);
        let mut seen = HashSet::new();
        for s in &states {
            let a = s.persisted.read(0x1000, 8).unwrap()[0];
            let b = s.persisted.read(0x1008, 8).unwrap()[0];
            seen.insert((a, b));
        }
        assert_eq!(
            seen,
            HashSet::from([(0u8, 0u8), (1, 0), (1, 2)]),
            "second store persisting without the first would violate the prefix rule"
        );
    }

    #[test]
    fn nt_store_without_fence_both_ways_then_fence_pins_it() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.nt_store(0, 0x1000, &[9u8; 8]).unwrap();
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 2);

        let m = mem(PersistenceDomain::TransientCaches);
        m.nt_store(0, 0x1000, &[9u8; 8]).unwrap();
        m.sfence(0);
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].persisted.read(0x1000, 8).unwrap(), vec![9u8; 8]);
    }

    #[test]
    fn nt_store_then_temporal_store_volatile_view_is_program_order() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.nt_store(0, 0x1000, &[1u8; 8]).unwrap();
        m.store(0, 0x1000, &[2u8; 8]).unwrap();
        assert_eq!(m.peek(0x1000, 8).unwrap(), vec![2u8; 8]);
    }

    #[test]
    fn clwb_is_thread_scoped() {
        // Thread 0 flushes, thread 1 fences: no guarantee yet.
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8; 8]).unwrap();
        m.clwb(0, 0x1000).unwrap();
        m.sfence(1);
        m.crash();
        assert_eq!(m.crash_states(16).unwrap().len(), 2);
    }

    #[test]
    fn persistent_caches_tso_prefix() {
        let m = mem(PersistenceDomain::PersistentCaches);
        m.store(0, 0x1040, &[1u8]).unwrap();
        m.store(0, 0x1080, &[2u8]).unwrap();
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 3);
        for s in &states {
            let a = s.persisted.read(0x1040, 1).unwrap()[0];
            let b = s.persisted.read(0x1080, 1).unwrap()[0];
            assert!(!(b == 2 && a == 0), "second store persisted without the first");
        }
    }

    #[test]
    fn persistent_caches_threads_cut_independently() {
        let m = mem(PersistenceDomain::PersistentCaches);
        m.store(0, 0x1000, &[1u8]).unwrap();
        m.store(1, 0x1040, &[2u8]).unwrap();
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 4);
    }

    #[test]
    fn persistent_caches_cross_thread_read_promotes() {
        let m = mem(PersistenceDomain::PersistentCaches);
        m.store(0, 0x1000, &[5u8; 8]).unwrap();
        // Thread 1 observes the value, so thread 0's store must survive.
        assert_eq!(m.load(1, 0x1000, 8).unwrap(), vec![5u8; 8]);
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].persisted.read(0x1000, 8).unwrap(), vec![5u8; 8]);
    }

    #[test]
    fn own_read_does_not_promote() {
        let m = mem(PersistenceDomain::PersistentCaches);
        m.store(0, 0x1000, &[5u8; 8]).unwrap();
        m.load(0, 0x1000, 8).unwrap();
        m.crash();
        assert_eq!(m.crash_states(16).unwrap().len(), 2);
    }

    #[test]
    fn store_group_is_never_split_under_persistent_caches() {
        let m = mem(PersistenceDomain::PersistentCaches);
        m.store_group(0, &[(0x1000, vec![1u8; 8]), (0x1040, vec![2u8; 8])])
            .unwrap();
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 2);
        for s in &states {
            let a = s.persisted.read(0x1000, 8).unwrap()[0];
            let b = s.persisted.read(0x1040, 8).unwrap()[0];
            assert_eq!(a != 0, b != 0, "group was split");
        }
    }

    #[test]
    fn store_group_is_ordinary_stores_under_transient_caches() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store_group(0, &[(0x1000, vec![1u8; 8]), (0x1040, vec![2u8; 8])])
            .unwrap();
        m.crash();
        assert_eq!(m.crash_states(16).unwrap().len(), 4);
    }

    #[test]
    fn sampling_keeps_extremes_and_is_deterministic() {
        let build = || {
            let m = mem(PersistenceDomain::TransientCaches);
            for i in 0..20u64 {
                m.store(0, 0x1000 + 64 * i, &[i as u8 + 1]).unwrap();
            }
            m.crash();
            m
        };
        let a = build().crash_states(64).unwrap();
        let b = build().crash_states(64).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(images(&a), images(&b));
        let digests = images(&a);
        let min = build().snapshot_min().digest();
        assert!(digests.contains(&min));
        let max = build().volatile_image().digest();
        assert!(digests.contains(&max));
    }

    #[test]
    fn counters_match_event_log() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8; 8]).unwrap();
        m.nt_store(1, 0x1040, &[2u8; 8]).unwrap();
        m.clwb(0, 0x1000).unwrap();
        m.sfence(0);
        m.load(1, 0x1000, 8).unwrap();
        let counters = m.counters();
        let events = m.events();
        let count = |k: EventKind| events.iter().filter(|e| e.kind == k).count() as u64;
        assert_eq!(counters.total.stores, count(EventKind::Store));
        assert_eq!(counters.total.nt_stores, count(EventKind::NtStore));
        assert_eq!(counters.total.clwbs, count(EventKind::Clwb));
        assert_eq!(counters.total.sfences, count(EventKind::Sfence));
        assert_eq!(counters.total.loads, count(EventKind::Load));
        assert_eq!(counters.thread(0).stores, 1);
        assert_eq!(counters.thread(1).nt_stores, 1);
        assert_eq!(counters.thread(1).loads, 1);
    }

    #[test]
    fn seq_is_strictly_increasing_and_dense() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8]).unwrap();
        m.sfence(0);
        m.crash();
        let events = m.events();
        for (i, e) in events.iter().enumerate() {
            assert_eq!(e.seq, i as u64);
        }
    }

    #[test]
    fn unmapped_access_faults() {
        let m = mem(PersistenceDomain::TransientCaches);
        assert!(matches!(
            m.store(0, 0x9000, &[1u8]),
            Err(Error::Fault { .. })
        ));
        assert!(matches!(m.load(0, 0xfff, 2), Err(Error::Fault { .. })));
        assert!(matches!(m.clwb(0, 0x9000), Err(Error::Fault { .. })));
        // Straddling the end of the region faults as a whole.
        assert!(matches!(
            m.store(0, 0x1fff, &[1u8, 2u8]),
            Err(Error::Fault { .. })
        ));
    }

    #[test]
    fn crash_states_requires_crash_marker() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8]).unwrap();
        assert!(matches!(m.crash_states(16), Err(Error::Usage(_))));
    }

    #[test]
    fn store_split_across_lines_tears_at_line_granularity() {
        let m = mem(PersistenceDomain::TransientCaches);
        // 8 bytes spanning the 0x1040 line boundary.
        m.store(0, 0x103c, &[0xAA; 8]).unwrap();
        m.crash();
        let states = m.crash_states(16).unwrap();
        assert_eq!(states.len(), 4);
        let torn = states.iter().any(|s| {
            let v = s.persisted.read(0x103c, 8).unwrap();
            v[..4] == [0xAA; 4] && v[4..] == [0u8; 4]
        });
        assert!(torn, "line-granularity tearing must be admissible");
        // The witness lists the store only when both fragments persisted.
        for s in &states {
            let v = s.persisted.read(0x103c, 8).unwrap();
            assert_eq!(s.witness.contains(&0), v == vec![0xAA; 8]);
        }
    }

    #[test]
    fn dirty_and_flush_pending_reflect_line_state() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8]).unwrap();
        assert!(m.line_dirty(0x1000).unwrap());
        m.clwb(0, 0x1000).unwrap();
        assert!(m.line_flush_pending(0x1000).unwrap());
        m.sfence(0);
        assert!(!m.line_dirty(0x1000).unwrap());
        assert!(!m.line_flush_pending(0x1000).unwrap());
        // Loads change neither flag.
        m.load(0, 0x1000, 1).unwrap();
        assert!(!m.line_dirty(0x1000).unwrap());
    }

    #[test]
    fn trace_round_trip() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1, 2, 3]).unwrap();
        m.clwb(0, 0x1000).unwrap();
        m.sfence(0);
        m.nt_store(1, 0x1040, &[4, 5]).unwrap();
        m.crash();
        let text = m.dump_trace();
        let parsed = Memory::parse_trace(&text).unwrap();
        let original: Vec<Event> = m
            .events()
            .into_iter()
            .filter(|e| e.kind != EventKind::Load)
            .collect();
        assert_eq!(parsed.len(), original.len());
        for (p, o) in parsed.iter().zip(&original) {
            assert_eq!((p.thread, p.kind, p.addr, &p.bytes), (o.thread, o.kind, o.addr, &o.bytes));
        }
    }

    #[test]
    fn replay_prefix_reproduces_persistence_state() {
        let m = mem(PersistenceDomain::TransientCaches);
        m.store(0, 0x1000, &[1u8; 8]).unwrap();
        m.clwb(0, 0x1000).unwrap();
        m.sfence(0);
        m.store(0, 0x1040, &[2u8; 8]).unwrap();
        m.crash();
        let events = m.events();
        let regions = m.regions();
        // Replay everything: same admissible set.
        let r = Memory::replay_prefix(
            PersistenceDomain::TransientCaches,
            64,
            &regions,
            &events,
            events.len(),
        )
        .unwrap();
        assert_eq!(images(&m.crash_states(64).unwrap()), images(&r.crash_states(64).unwrap()));
        // Replay up to before the second store: exactly one state.
        let r = Memory::replay_prefix(PersistenceDomain::TransientCaches, 64, &regions, &events, 3)
            .unwrap();
        assert_eq!(r.crash_states(64).unwrap().len(), 1);
    }

    #[test]
    fn volatile_view_identical_across_domains() {
        let run = |d: PersistenceDomain| {
            let m = mem(d);
            m.store(0, 0x1000, &[1u8; 8]).unwrap();
            m.nt_store(0, 0x1008, &[2u8; 8]).unwrap();
            m.clwb(0, 0x1000).unwrap();
            m.sfence(0);
            m.store(1, 0x1080, &[3u8; 4]).unwrap();
            m.volatile_image().digest()
        };
        assert_eq!(
            run(PersistenceDomain::TransientCaches),
            run(PersistenceDomain::PersistentCaches)
        );
    }
}
