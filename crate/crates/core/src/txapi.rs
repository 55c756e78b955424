//! Unified transaction API over the concurrency mechanisms.
//!
//! A `Lab` wires together the simulated memory, the per-thread log regions,
//! and the shared engine runtimes for one chosen mechanism and persistence
//! domain. Each logical thread gets a `Session`, a cooperative state
//! machine: `step` performs one bounded unit of work (roughly one program
//! operation, or one lock attempt) so schedulers can interleave threads
//! deterministically at operation granularity. `run` is the blocking
//! wrapper for callers that do not need schedule control.
//!
//! Transaction bodies are `TxProgram`s: resumable programs that touch
//! memory only through the access handle they are given. Retries are the
//! session's job; programs just get reset and re-run, so they must be
//! replayable.

use crate::htm::{HtmAbort, HtmConfig, HtmRuntime, HtmStop, HwTx};
use crate::pmem::{Memory, PersistedImage, PersistenceDomain, ThreadId};
use crate::stm::{StmRuntime, StmStop, StmTx};
use crate::wal::{self, Mutations, RegionDesc, TxMode, WalEngine};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Base address of the shared data region.
pub const DATA_BASE: u64 = 0x1_0000;

/// Home of the global spinlock word, on its own line below the data region.
/// The lock is authoritative in host atomics, but acquire and release also
/// touch this simulated line so that crash-state analysis can see the
/// handoff: an acquirer's load of the previous owner's release store is
/// what orders the two critical sections for the persistent-cache domain.
const SPIN_LOCK_BASE: u64 = 0xF000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Mechanism {
    /// Plain stores, no locking, no recovery. Negative baseline.
    Seq,
    /// Global spinlock, in-place writes behind an undo log.
    SpinUndo,
    /// Global spinlock, deferred writes behind a redo log.
    SpinRedo,
    /// Optimistic word STM, volatile.
    Stm,
    /// Optimistic word STM with a redo-logged commit.
    CcStm,
    /// Hardware transactions, volatile, lock fallback.
    Htm,
    /// Hardware transactions streaming a redo log, undo-logged fallback.
    CcHtmUndoFb,
    /// Hardware transactions streaming a redo log, redo-logged fallback.
    CcHtmRedoFb,
}

impl Mechanism {
    pub const ALL: [Mechanism; 8] = [
        Mechanism::Seq,
        Mechanism::SpinUndo,
        Mechanism::SpinRedo,
        Mechanism::Stm,
        Mechanism::CcStm,
        Mechanism::Htm,
        Mechanism::CcHtmUndoFb,
        Mechanism::CcHtmRedoFb,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seq" => Ok(Mechanism::Seq),
            "spin-undo" => Ok(Mechanism::SpinUndo),
            "spin-redo" => Ok(Mechanism::SpinRedo),
            "stm" => Ok(Mechanism::Stm),
            "ccstm" => Ok(Mechanism::CcStm),
            "htm" => Ok(Mechanism::Htm),
            "cchtm-undo" => Ok(Mechanism::CcHtmUndoFb),
            "cchtm-redo" => Ok(Mechanism::CcHtmRedoFb),
            other => Err(Error::usage(format!("unknown mechanism '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::Seq => "seq",
            Mechanism::SpinUndo => "spin-undo",
            Mechanism::SpinRedo => "spin-redo",
            Mechanism::Stm => "stm",
            Mechanism::CcStm => "ccstm",
            Mechanism::Htm => "htm",
            Mechanism::CcHtmUndoFb => "cchtm-undo",
            Mechanism::CcHtmRedoFb => "cchtm-redo",
        }
    }

    /// Mechanisms that keep per-thread log regions.
    pub fn uses_log(&self) -> bool {
        matches!(
            self,
            Mechanism::SpinUndo
                | Mechanism::SpinRedo
                | Mechanism::CcStm
                | Mechanism::CcHtmUndoFb
                | Mechanism::CcHtmRedoFb
        )
    }

    fn hw_logs_fast_path(&self) -> bool {
        matches!(self, Mechanism::CcHtmUndoFb | Mechanism::CcHtmRedoFb)
    }

    fn fallback_mode(&self) -> Option<TxMode> {
        match self {
            Mechanism::CcHtmUndoFb => Some(TxMode::Undo),
            Mechanism::CcHtmRedoFb => Some(TxMode::Redo),
            _ => None,
        }
    }

    fn spin_mode(&self) -> Option<TxMode> {
        match self {
            Mechanism::SpinUndo => Some(TxMode::Undo),
            Mechanism::SpinRedo => Some(TxMode::Redo),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabConfig {
    pub mechanism: Mechanism,
    pub domain: PersistenceDomain,
    pub threads: usize,
    pub data_len: u64,
    pub log_capacity: u64,
    pub htm: HtmConfig,
    pub mutations: Mutations,
    /// Record the event log (required for crash analysis and the checker).
    pub tracing: bool,
    /// Seed for crash-state sampling when enumeration overflows.
    pub seed: u64,
}

impl LabConfig {
    pub fn new(mechanism: Mechanism, domain: PersistenceDomain) -> Self {
        LabConfig {
            mechanism,
            domain,
            threads: 1,
            data_len: 0x1_0000,
            log_capacity: wal::DEFAULT_LOG_CAPACITY,
            htm: HtmConfig::default(),
            mutations: Mutations::default(),
            tracing: true,
            seed: 0xC0FFEE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        if self.data_len == 0 {
            return Err(Error::config("data_len must be nonzero"));
        }
        if self.mechanism.uses_log() && self.log_capacity < wal::LOG_HEADER_SIZE + 64 {
            return Err(Error::config("log_capacity too small"));
        }
        if self.mechanism.hw_logs_fast_path()
            && self.domain == PersistenceDomain::PersistentCaches
        {
            return Err(Error::config(
                "hardware-logged mechanisms assume transient caches; \
                 with persistent caches use htm",
            ));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str, v: &str| Error::config(format!("bad {what} value '{v}'"));
        match key {
            "mechanism" => self.mechanism = Mechanism::parse(value)?,
            "domain" => self.domain = PersistenceDomain::parse(value)?,
            "threads" => self.threads = value.parse().map_err(|_| bad(key, value))?,
            "data_len" => self.data_len = value.parse().map_err(|_| bad(key, value))?,
            "log_capacity" => self.log_capacity = value.parse().map_err(|_| bad(key, value))?,
            "capacity_lines" => {
                self.htm.capacity_lines = value.parse().map_err(|_| bad(key, value))?
            }
            "max_retries" => self.htm.max_retries = value.parse().map_err(|_| bad(key, value))?,
            "tracing" => self.tracing = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "mutate_skip_undo_append_fence" => {
                self.mutations.skip_undo_append_fence =
                    value.parse().map_err(|_| bad(key, value))?
            }
            "mutate_undo_commit_before_writeset" => {
                self.mutations.undo_commit_before_writeset =
                    value.parse().map_err(|_| bad(key, value))?
            }
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Deterministic per-thread log placement after the data region.
pub fn log_region(cfg: &LabConfig, thread: ThreadId) -> RegionDesc {
    let align = |v: u64, a: u64| (v + a - 1) & !(a - 1);
    let logs_base = align(DATA_BASE + cfg.data_len, 0x1_0000);
    let stride = align(cfg.log_capacity, 0x1000);
    RegionDesc {
        base: logs_base + thread as u64 * stride,
        capacity: cfg.log_capacity,
    }
}

pub fn log_regions(cfg: &LabConfig) -> Vec<RegionDesc> {
    if !cfg.mechanism.uses_log() {
        return Vec::new();
    }
    (0..cfg.threads).map(|t| log_region(cfg, t)).collect()
}

/// Replays every log onto a crash image, dispatching each region by its
/// recorded entry discipline. The no-log mechanisms recover by doing
/// nothing.
pub fn global_recover(cfg: &LabConfig, img: &mut PersistedImage) -> Result<wal::RecoveryReport> {
    wal::recover(img, &log_regions(cfg))
}

/// Test-and-test-and-set lock with a wait counter.
pub struct SpinLock {
    state: AtomicU64,
    waits: AtomicU64,
}

impl SpinLock {
    pub fn new() -> Self {
        SpinLock {
            state: AtomicU64::new(0),
            waits: AtomicU64::new(0),
        }
    }

    pub fn try_acquire(&self, mem: &Memory, me: ThreadId) -> bool {
        if self.state.load(Ordering::SeqCst) != 0 {
            self.waits.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        let ok = self
            .state
            .compare_exchange(0, me as u64 + 1, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok();
        if !ok {
            self.waits.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        // Load before store: the load observes the previous owner's release
        // write, which is the ordering edge crash analysis needs. Our own
        // tag store must not shadow it.
        mem.load(me, SPIN_LOCK_BASE, 8)
            .expect("spin lock line mapped");
        mem.store(me, SPIN_LOCK_BASE, &(me as u64 + 1).to_le_bytes())
            .expect("spin lock line mapped");
        true
    }

    pub fn release(&self, mem: &Memory, me: ThreadId) {
        let cur = self.state.load(Ordering::SeqCst);
        assert_eq!(cur, me as u64 + 1, "spinlock released by non-owner");
        // The simulated release store goes first so the next owner's
        // acquire load is ordered after it.
        mem.store(me, SPIN_LOCK_BASE, &0u64.to_le_bytes())
            .expect("spin lock line mapped");
        self.state.store(0, Ordering::SeqCst);
    }

    pub fn waits(&self) -> u64 {
        self.waits.load(Ordering::SeqCst)
    }
}

impl Default for SpinLock {
    fn default() -> Self {
        Self::new()
    }
}

/// The composed laboratory: memory, engine runtimes, id allocator.
pub struct Lab {
    cfg: LabConfig,
    mem: Arc<Memory>,
    stm: Arc<StmRuntime>,
    htm: Arc<HtmRuntime>,
    spin: Arc<SpinLock>,
    next_tx_id: Arc<AtomicU64>,
}

impl Lab {
    pub fn new(cfg: LabConfig) -> Result<Lab> {
        cfg.validate()?;
        let mem = Arc::new(Memory::with_options(
            cfg.domain,
            crate::pmem::DEFAULT_LINE_SIZE,
            cfg.tracing,
            cfg.seed,
        ));
        mem.map_region(DATA_BASE, cfg.data_len)?;
        mem.map_region(SPIN_LOCK_BASE, crate::pmem::DEFAULT_LINE_SIZE)?;
        for r in log_regions(&cfg) {
            mem.map_region(r.base, r.capacity)?;
        }
        let htm = HtmRuntime::new(mem.clone(), cfg.htm, cfg.threads);
        Ok(Lab {
            cfg,
            mem,
            stm: Arc::new(StmRuntime::new()),
            htm,
            spin: Arc::new(SpinLock::new()),
            next_tx_id: Arc::new(AtomicU64::new(1)),
        })
    }

    pub fn config(&self) -> &LabConfig {
        &self.cfg
    }

    pub fn mem(&self) -> &Arc<Memory> {
        &self.mem
    }

    pub fn session(&self, thread: ThreadId) -> Session {
        assert!(thread < self.cfg.threads, "thread {thread} out of range");
        let wal = if self.cfg.mechanism.uses_log() {
            Some(WalEngine::with_mutations(
                self.mem.clone(),
                thread,
                log_region(&self.cfg, thread),
                self.cfg.mutations,
            ))
        } else {
            None
        };
        Session {
            cfg: self.cfg,
            mem: self.mem.clone(),
            stm: self.stm.clone(),
            htm: self.htm.clone(),
            spin: self.spin.clone(),
            next_tx_id: self.next_tx_id.clone(),
            thread,
            wal,
            phase: Phase::Idle,
            prog: None,
            hw_retries: 0,
            cur: TxEffects::default(),
            last: TxEffects::default(),
            stats: SessionStats::default(),
        }
    }

    pub fn sessions(&self) -> Vec<Session> {
        (0..self.cfg.threads).map(|t| self.session(t)).collect()
    }
}

/// Why an in-flight program step could not continue.
#[derive(Debug, Clone, PartialEq)]
pub enum TxStop {
    Fatal(Error),
    StmConflict,
    Htm(HtmAbort),
}

impl From<Error> for TxStop {
    fn from(e: Error) -> Self {
        TxStop::Fatal(e)
    }
}

pub enum ProgStep {
    More,
    Done,
}

/// A resumable transaction body. `step` performs one bounded unit of work
/// through the access handle; sessions call `reset` before every attempt,
/// so implementations must be replayable from their initial state.
pub trait TxProgram: Send {
    fn reset(&mut self);
    fn step(&mut self, acc: &mut dyn TxAccess) -> std::result::Result<ProgStep, TxStop>;
}

/// Memory access from inside a transaction attempt.
pub trait TxAccess {
    fn read(&mut self, addr: u64, len: u64) -> std::result::Result<Vec<u8>, TxStop>;
    fn write(&mut self, addr: u64, bytes: &[u8]) -> std::result::Result<(), TxStop>;

    fn read_u64(&mut self, addr: u64) -> std::result::Result<u64, TxStop> {
        Ok(crate::util::u64_le(&self.read(addr, 8)?))
    }

    fn write_u64(&mut self, addr: u64, v: u64) -> std::result::Result<(), TxStop> {
        self.write(addr, &v.to_le_bytes())
    }
}

/// Reads and writes observed by the last committed attempt, in program
/// order, with the values actually seen and written.
#[derive(Debug, Clone, Default)]
pub struct TxEffects {
    pub reads: Vec<(u64, Vec<u8>)>,
    pub writes: Vec<(u64, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct SessionStats {
    pub commits: u64,
    pub aborts: u64,
    pub fallbacks: u64,
    pub lock_waits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Made progress; call again.
    Running,
    /// Could not make progress (lock busy); reschedule.
    Blocked,
    /// The transaction committed; the session is idle again.
    Committed,
}

/// Volatile buffered transaction for the plain hardware fallback: reads
/// merge the private overlay, commit publishes one atomic group.
struct VolatileTx {
    overlay: BTreeMap<u64, u8>,
    writes: Vec<(u64, Vec<u8>)>,
}

impl VolatileTx {
    fn new() -> Self {
        VolatileTx {
            overlay: BTreeMap::new(),
            writes: Vec::new(),
        }
    }
}

enum Phase {
    Idle,
    SpinAcquire,
    SpinExec,
    StmExec(StmTx),
    /// Waiting for the fallback lock to clear before a hardware begin.
    HwWait,
    HwExec(HwTx),
    FbAcquire,
    FbExecVol(VolatileTx),
    FbExecWal,
    SeqExec,
}

enum AccessInner<'a> {
    Direct {
        mem: &'a Memory,
        thread: ThreadId,
    },
    Wal(&'a mut WalEngine),
    Stm(&'a mut StmTx),
    Hw(&'a mut HwTx),
    Vol {
        mem: &'a Memory,
        thread: ThreadId,
        tx: &'a mut VolatileTx,
    },
}

struct AccessCtx<'a> {
    inner: AccessInner<'a>,
    rec: &'a mut TxEffects,
}

impl TxAccess for AccessCtx<'_> {
    fn read(&mut self, addr: u64, len: u64) -> std::result::Result<Vec<u8>, TxStop> {
        let bytes = match &mut self.inner {
            AccessInner::Direct { mem, thread } => mem.load(*thread, addr, len)?,
            AccessInner::Wal(w) => w.read(addr, len)?,
            AccessInner::Stm(tx) => tx.read(addr, len).map_err(|e| match e {
                StmStop::Conflict => TxStop::StmConflict,
                StmStop::Fatal(err) => TxStop::Fatal(err),
            })?,
            AccessInner::Hw(tx) => tx.read(addr, len).map_err(|e| match e {
                HtmStop::Abort(a) => TxStop::Htm(a),
                HtmStop::Fatal(err) => TxStop::Fatal(err),
            })?,
            AccessInner::Vol { mem, thread, tx } => {
                let mut bytes = mem.load(*thread, addr, len)?;
                for (i, b) in bytes.iter_mut().enumerate() {
                    if let Some(v) = tx.overlay.get(&(addr + i as u64)) {
                        *b = *v;
                    }
                }
                bytes
            }
        };
        self.rec.reads.push((addr, bytes.clone()));
        Ok(bytes)
    }

    fn write(&mut self, addr: u64, bytes: &[u8]) -> std::result::Result<(), TxStop> {
        match &mut self.inner {
            AccessInner::Direct { mem, thread } => mem.store(*thread, addr, bytes)?,
            AccessInner::Wal(w) => w.write(addr, bytes)?,
            AccessInner::Stm(tx) => tx.write(addr, bytes),
            AccessInner::Hw(tx) => tx.write(addr, bytes).map_err(|e| match e {
                HtmStop::Abort(a) => TxStop::Htm(a),
                HtmStop::Fatal(err) => TxStop::Fatal(err),
            })?,
            AccessInner::Vol { tx, .. } => {
                for (i, b) in bytes.iter().enumerate() {
                    tx.overlay.insert(addr + i as u64, *b);
                }
                tx.writes.push((addr, bytes.to_vec()));
            }
        }
        self.rec.writes.push((addr, bytes.to_vec()));
        Ok(())
    }
}

/// Per-thread cooperative transaction driver.
pub struct Session {
    cfg: LabConfig,
    mem: Arc<Memory>,
    stm: Arc<StmRuntime>,
    htm: Arc<HtmRuntime>,
    spin: Arc<SpinLock>,
    next_tx_id: Arc<AtomicU64>,
    thread: ThreadId,
    wal: Option<WalEngine>,
    phase: Phase,
    prog: Option<Box<dyn TxProgram>>,
    hw_retries: u32,
    cur: TxEffects,
    last: TxEffects,
    stats: SessionStats,
}

impl Session {
    pub fn thread(&self) -> ThreadId {
        self.thread
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.phase, Phase::Idle)
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    /// Effects of the most recently committed transaction.
    pub fn take_effects(&mut self) -> TxEffects {
        std::mem::take(&mut self.last)
    }

    fn alloc_tx_id(&self) -> u64 {
        self.next_tx_id.fetch_add(1, Ordering::SeqCst)
    }

    pub fn start(&mut self, mut prog: Box<dyn TxProgram>) -> Result<()> {
        if !self.is_idle() {
            return Err(Error::usage("session already has an active transaction"));
        }
        prog.reset();
        self.prog = Some(prog);
        self.cur = TxEffects::default();
        self.hw_retries = 0;
        self.phase = match self.cfg.mechanism {
            Mechanism::Seq => Phase::SeqExec,
            Mechanism::SpinUndo | Mechanism::SpinRedo => Phase::SpinAcquire,
            Mechanism::Stm | Mechanism::CcStm => Phase::StmExec(StmTx::begin(
                self.stm.clone(),
                self.mem.clone(),
                self.thread,
            )),
            Mechanism::Htm | Mechanism::CcHtmUndoFb | Mechanism::CcHtmRedoFb => Phase::HwWait,
        };
        Ok(())
    }

    pub fn start_body(&mut self, body: TxBody) -> Result<()> {
        self.start(Box::new(BodyProgram::new(body)))
    }

    /// Blocking convenience wrapper: run one program to commit.
    pub fn run(&mut self, prog: Box<dyn TxProgram>) -> Result<()> {
        self.start(prog)?;
        loop {
            match self.step()? {
                StepOutcome::Committed => return Ok(()),
                StepOutcome::Running => {}
                StepOutcome::Blocked => std::hint::spin_loop(),
            }
        }
    }

    pub fn run_body(&mut self, body: TxBody) -> Result<()> {
        self.run(Box::new(BodyProgram::new(body)))
    }

    fn committed(&mut self) -> StepOutcome {
        self.stats.commits += 1;
        self.last = std::mem::take(&mut self.cur);
        self.phase = Phase::Idle;
        StepOutcome::Committed
    }

    fn reset_attempt(&mut self) {
        self.prog.as_mut().unwrap().reset();
        self.cur = TxEffects::default();
    }

    /// One bounded unit of work.
    pub fn step(&mut self) -> Result<StepOutcome> {
        match std::mem::replace(&mut self.phase, Phase::Idle) {
            Phase::Idle => Err(Error::usage("step on an idle session")),
            Phase::SeqExec => {
                let mut ctx = AccessCtx {
                    inner: AccessInner::Direct {
                        mem: &self.mem,
                        thread: self.thread,
                    },
                    rec: &mut self.cur,
                };
                match self.prog.as_mut().unwrap().step(&mut ctx) {
                    Ok(ProgStep::More) => {
                        self.phase = Phase::SeqExec;
                        Ok(StepOutcome::Running)
                    }
                    Ok(ProgStep::Done) => Ok(self.committed()),
                    Err(TxStop::Fatal(e)) => Err(e),
                    Err(_) => unreachable!("direct access cannot conflict"),
                }
            }
            Phase::SpinAcquire => {
                if !self.spin.try_acquire(&self.mem, self.thread) {
                    self.stats.lock_waits += 1;
                    self.phase = Phase::SpinAcquire;
                    return Ok(StepOutcome::Blocked);
                }
                let id = self.alloc_tx_id();
                let mode = self.cfg.mechanism.spin_mode().unwrap();
                self.wal.as_mut().unwrap().begin(id, mode)?;
                self.phase = Phase::SpinExec;
                Ok(StepOutcome::Running)
            }
            Phase::SpinExec => {
                let mut ctx = AccessCtx {
                    inner: AccessInner::Wal(self.wal.as_mut().unwrap()),
                    rec: &mut self.cur,
                };
                match self.prog.as_mut().unwrap().step(&mut ctx) {
                    Ok(ProgStep::More) => {
                        self.phase = Phase::SpinExec;
                        Ok(StepOutcome::Running)
                    }
                    Ok(ProgStep::Done) => {
                        let r = self.wal.as_mut().unwrap().commit();
                        self.spin.release(&self.mem, self.thread);
                        r?;
                        Ok(self.committed())
                    }
                    Err(TxStop::Fatal(e)) => {
                        // The log engine already rolled back; the lock is
                        // still ours.
                        self.spin.release(&self.mem, self.thread);
                        Err(e)
                    }
                    Err(_) => unreachable!("wal access cannot conflict"),
                }
            }
            Phase::StmExec(mut tx) => {
                let mut ctx = AccessCtx {
                    inner: AccessInner::Stm(&mut tx),
                    rec: &mut self.cur,
                };
                match self.prog.as_mut().unwrap().step(&mut ctx) {
                    Ok(ProgStep::More) => {
                        self.phase = Phase::StmExec(tx);
                        Ok(StepOutcome::Running)
                    }
                    Ok(ProgStep::Done) => {
                        let persist = if self.cfg.mechanism == Mechanism::CcStm {
                            let id = self.alloc_tx_id();
                            Some((self.wal.as_mut().unwrap(), id))
                        } else {
                            None
                        };
                        match tx.commit(persist) {
                            Ok(()) => Ok(self.committed()),
                            Err(StmStop::Conflict) => {
                                self.stats.aborts += 1;
                                self.reset_attempt();
                                self.phase = Phase::StmExec(StmTx::begin(
                                    self.stm.clone(),
                                    self.mem.clone(),
                                    self.thread,
                                ));
                                Ok(StepOutcome::Running)
                            }
                            Err(StmStop::Fatal(e)) => Err(e),
                        }
                    }
                    Err(TxStop::StmConflict) => {
                        self.stats.aborts += 1;
                        self.reset_attempt();
                        self.phase = Phase::StmExec(StmTx::begin(
                            self.stm.clone(),
                            self.mem.clone(),
                            self.thread,
                        ));
                        Ok(StepOutcome::Running)
                    }
                    Err(TxStop::Fatal(e)) => Err(e),
                    Err(TxStop::Htm(_)) => unreachable!("stm access cannot raise htm aborts"),
                }
            }
            Phase::HwWait => {
                let log = if self.cfg.mechanism.hw_logs_fast_path() {
                    Some(log_region(&self.cfg, self.thread))
                } else {
                    None
                };
                match self.htm.begin(self.thread, self.alloc_tx_id(), log) {
                    Ok(tx) => {
                        self.phase = Phase::HwExec(tx);
                        Ok(StepOutcome::Running)
                    }
                    Err(HtmAbort::LockHeld) => {
                        self.stats.lock_waits += 1;
                        self.phase = Phase::HwWait;
                        Ok(StepOutcome::Blocked)
                    }
                    Err(_) => unreachable!("begin only fails on a held lock"),
                }
            }
            Phase::HwExec(mut tx) => {
                let mut ctx = AccessCtx {
                    inner: AccessInner::Hw(&mut tx),
                    rec: &mut self.cur,
                };
                match self.prog.as_mut().unwrap().step(&mut ctx) {
                    Ok(ProgStep::More) => {
                        self.phase = Phase::HwExec(tx);
                        Ok(StepOutcome::Running)
                    }
                    Ok(ProgStep::Done) => match tx.commit() {
                        Ok(()) => Ok(self.committed()),
                        Err(HtmStop::Abort(a)) => {
                            self.handle_hw_abort(a);
                            Ok(StepOutcome::Running)
                        }
                        Err(HtmStop::Fatal(e)) => Err(e),
                    },
                    Err(TxStop::Htm(a)) => {
                        self.handle_hw_abort(a);
                        Ok(StepOutcome::Running)
                    }
                    Err(TxStop::Fatal(e)) => Err(e),
                    Err(TxStop::StmConflict) => unreachable!("hw access cannot raise stm stops"),
                }
            }
            Phase::FbAcquire => {
                if !self.htm.try_lock_fallback(self.thread) {
                    self.stats.lock_waits += 1;
                    self.phase = Phase::FbAcquire;
                    return Ok(StepOutcome::Blocked);
                }
                self.stats.fallbacks += 1;
                match self.cfg.mechanism.fallback_mode() {
                    None => self.phase = Phase::FbExecVol(VolatileTx::new()),
                    Some(mode) => {
                        let id = self.alloc_tx_id();
                        if let Err(e) = self.wal.as_mut().unwrap().begin(id, mode) {
                            self.htm.unlock_fallback(self.thread);
                            return Err(e);
                        }
                        self.phase = Phase::FbExecWal;
                    }
                }
                Ok(StepOutcome::Running)
            }
            Phase::FbExecVol(mut tx) => {
                let mut ctx = AccessCtx {
                    inner: AccessInner::Vol {
                        mem: &self.mem,
                        thread: self.thread,
                        tx: &mut tx,
                    },
                    rec: &mut self.cur,
                };
                match self.prog.as_mut().unwrap().step(&mut ctx) {
                    Ok(ProgStep::More) => {
                        self.phase = Phase::FbExecVol(tx);
                        Ok(StepOutcome::Running)
                    }
                    Ok(ProgStep::Done) => {
                        let r = if tx.writes.is_empty() {
                            Ok(())
                        } else {
                            self.mem.store_group(self.thread, &tx.writes)
                        };
                        self.htm.unlock_fallback(self.thread);
                        r?;
                        Ok(self.committed())
                    }
                    Err(TxStop::Fatal(e)) => {
                        self.htm.unlock_fallback(self.thread);
                        Err(e)
                    }
                    Err(_) => unreachable!("volatile fallback cannot conflict"),
                }
            }
            Phase::FbExecWal => {
                let mut ctx = AccessCtx {
                    inner: AccessInner::Wal(self.wal.as_mut().unwrap()),
                    rec: &mut self.cur,
                };
                match self.prog.as_mut().unwrap().step(&mut ctx) {
                    Ok(ProgStep::More) => {
                        self.phase = Phase::FbExecWal;
                        Ok(StepOutcome::Running)
                    }
                    Ok(ProgStep::Done) => {
                        let r = self.wal.as_mut().unwrap().commit();
                        self.htm.unlock_fallback(self.thread);
                        r?;
                        Ok(self.committed())
                    }
                    Err(TxStop::Fatal(e)) => {
                        self.htm.unlock_fallback(self.thread);
                        Err(e)
                    }
                    Err(_) => unreachable!("wal access cannot conflict"),
                }
            }
        }
    }

    fn handle_hw_abort(&mut self, a: HtmAbort) {
        self.stats.aborts += 1;
        self.reset_attempt();
        let retry = match a {
            HtmAbort::Conflict | HtmAbort::LockHeld => {
                self.hw_retries += 1;
                self.hw_retries <= self.cfg.htm.max_retries
            }
            HtmAbort::Capacity | HtmAbort::NoLogSpace | HtmAbort::Explicit => false,
        };
        self.phase = if retry { Phase::HwWait } else { Phase::FbAcquire };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Imm(u64),
    Reg(usize),
}

/// Straight-line transaction ops over 8-byte words and 8 registers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxOp {
    Load { reg: usize, addr: u64 },
    Store { addr: u64, value: Operand },
    Add { reg: usize, value: Operand },
    StoreIfEq { guard: usize, expect: u64, addr: u64, value: Operand },
}

pub const REG_COUNT: usize = 8;

/// Word-granular storage for pure body evaluation. Absent words read as
/// zero, matching freshly mapped memory.
pub trait WordStore {
    fn read_word(&mut self, addr: u64) -> u64;
    fn write_word(&mut self, addr: u64, v: u64);
}

impl WordStore for std::collections::HashMap<u64, u64> {
    fn read_word(&mut self, addr: u64) -> u64 {
        self.get(&addr).copied().unwrap_or(0)
    }
    fn write_word(&mut self, addr: u64, v: u64) {
        self.insert(addr, v);
    }
}

impl WordStore for BTreeMap<u64, u64> {
    fn read_word(&mut self, addr: u64) -> u64 {
        self.get(&addr).copied().unwrap_or(0)
    }
    fn write_word(&mut self, addr: u64, v: u64) {
        self.insert(addr, v);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TxBody {
    pub ops: Vec<TxOp>,
}

impl TxBody {
    pub fn new(ops: Vec<TxOp>) -> Self {
        TxBody { ops }
    }

    /// Pure semantic execution against caller-provided word storage. The
    /// checker uses this as the reference meaning of a body; it must agree
    /// with `BodyProgram` run through any engine.
    pub fn apply(&self, store: &mut dyn WordStore) {
        let mut regs = [0u64; REG_COUNT];
        let resolve = |regs: &[u64; REG_COUNT], v: &Operand| match v {
            Operand::Imm(x) => *x,
            Operand::Reg(i) => regs[*i],
        };
        for op in &self.ops {
            match op {
                TxOp::Load { reg, addr } => regs[*reg] = store.read_word(*addr),
                TxOp::Store { addr, value } => store.write_word(*addr, resolve(&regs, value)),
                TxOp::Add { reg, value } => {
                    regs[*reg] = regs[*reg].wrapping_add(resolve(&regs, value))
                }
                TxOp::StoreIfEq {
                    guard,
                    expect,
                    addr,
                    value,
                } => {
                    if regs[*guard] == *expect {
                        store.write_word(*addr, resolve(&regs, value));
                    }
                }
            }
        }
    }

    /// Addresses this body could touch, for footprint planning.
    pub fn touched_addrs(&self) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .ops
            .iter()
            .map(|op| match op {
                TxOp::Load { addr, .. }
                | TxOp::Store { addr, .. }
                | TxOp::StoreIfEq { addr, .. } => Some(*addr),
                TxOp::Add { .. } => None,
            })
            .flatten()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Interpreter adapting a `TxBody` to the resumable program interface, one
/// op per step.
pub struct BodyProgram {
    body: TxBody,
    pc: usize,
    regs: [u64; REG_COUNT],
}

impl BodyProgram {
    pub fn new(body: TxBody) -> Self {
        BodyProgram {
            body,
            pc: 0,
            regs: [0; REG_COUNT],
        }
    }

    fn resolve(&self, v: &Operand) -> u64 {
        match v {
            Operand::Imm(x) => *x,
            Operand::Reg(i) => self.regs[*i],
        }
    }
}

impl TxProgram for BodyProgram {
    fn reset(&mut self) {
        self.pc = 0;
        self.regs = [0; REG_COUNT];
    }

    fn step(&mut self, acc: &mut dyn TxAccess) -> std::result::Result<ProgStep, TxStop> {
        let Some(op) = self.body.ops.get(self.pc).cloned() else {
            return Ok(ProgStep::Done);
        };
        match op {
            TxOp::Load { reg, addr } => self.regs[reg] = acc.read_u64(addr)?,
            TxOp::Store { addr, value } => {
                let v = self.resolve(&value);
                acc.write_u64(addr, v)?;
            }
            TxOp::Add { reg, value } => {
                self.regs[reg] = self.regs[reg].wrapping_add(self.resolve(&value))
            }
            TxOp::StoreIfEq {
                guard,
                expect,
                addr,
                value,
            } => {
                if self.regs[guard] == expect {
                    let v = self.resolve(&value);
                    acc.write_u64(addr, v)?;
                }
            }
        }
        self.pc += 1;
        Ok(ProgStep::More)
    }
}
