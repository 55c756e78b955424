//! Workload generators and the benchmark report.
//!
//! Three workloads run through the transaction API: an open-addressing
//! hashmap, a crit-bit tree (fixed 8-byte keys and values, flat node pools,
//! tagged pointers), and a synthetic read/write mix with named size presets.
//! Every structure mutation happens inside a transaction; the structures are
//! presized so no resize path exists. Logical threads are driven by one
//! cooperative stepper with a seeded schedule, so a report is reproducible
//! bit for bit apart from wall time.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::txapi::{
    Lab, LabConfig, Mechanism, ProgStep, SessionStats, TxAccess, TxProgram, TxStop, DATA_BASE,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    Hashmap,
    CritBitTree,
    Synthetic,
}

impl WorkloadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hashmap" => Ok(WorkloadKind::Hashmap),
            "critbit" => Ok(WorkloadKind::CritBitTree),
            "synthetic" => Ok(WorkloadKind::Synthetic),
            other => Err(Error::config(format!(
                "unknown workload '{other}' (want hashmap|critbit|synthetic)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WorkloadKind::Hashmap => "hashmap",
            WorkloadKind::CritBitTree => "critbit",
            WorkloadKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Total transactions, dealt round-robin to threads.
    pub ops: u64,
    /// Distinct keys (structures) or words (synthetic).
    pub key_space: u64,
    /// Fraction of structure operations that are lookups.
    pub read_fraction: f64,
    /// Reads per synthetic transaction.
    pub tx_reads: u32,
    /// Writes per synthetic transaction.
    pub tx_writes: u32,
    pub threads: usize,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind) -> Self {
        WorkloadSpec {
            kind,
            ops: 1000,
            key_space: 1 << 10,
            read_fraction: 0.5,
            tx_reads: 10,
            tx_writes: 2,
            threads: 1,
        }
    }

    /// Synthetic preset around 10 reads / 2 writes per transaction.
    pub fn synthetic_small() -> Self {
        WorkloadSpec {
            key_space: 1 << 15,
            ..WorkloadSpec::new(WorkloadKind::Synthetic)
        }
    }

    /// Synthetic preset around 2000 reads / 1200 writes per transaction.
    pub fn synthetic_moderate() -> Self {
        WorkloadSpec {
            key_space: 1 << 15,
            tx_reads: 2000,
            tx_writes: 1200,
            ..WorkloadSpec::new(WorkloadKind::Synthetic)
        }
    }

    /// Synthetic preset whose read set overflows the default hardware
    /// capacity, so every hardware attempt aborts to the fallback.
    pub fn synthetic_very_large() -> Self {
        WorkloadSpec {
            key_space: 1 << 15,
            tx_reads: 4096,
            tx_writes: 64,
            ..WorkloadSpec::new(WorkloadKind::Synthetic)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("workload threads must be at least 1"));
        }
        if self.key_space == 0 {
            return Err(Error::config("key_space must be nonzero"));
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(Error::config("read_fraction must be within [0,1]"));
        }
        if self.kind == WorkloadKind::Synthetic && self.tx_reads == 0 && self.tx_writes == 0 {
            return Err(Error::config("synthetic transactions need at least one access"));
        }
        Ok(())
    }

    fn required_data_len(&self) -> u64 {
        match self.kind {
            WorkloadKind::Hashmap => HashLayout::new(self.key_space).bytes(),
            WorkloadKind::CritBitTree => CbLayout::new(self.key_space).bytes(),
            WorkloadKind::Synthetic => self.key_space * 8,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ThreadReport {
    pub thread: usize,
    #[serde(flatten)]
    pub stats: SessionStats,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunReport {
    pub mechanism: String,
    pub domain: String,
    pub threads: usize,
    pub workload: String,
    pub ops: u64,
    pub seed: u64,
    pub commits: u64,
    pub aborts: u64,
    pub fallbacks: u64,
    pub lock_waits: u64,
    pub stores: u64,
    pub nt_stores: u64,
    pub clwbs: u64,
    pub sfences: u64,
    pub loads: u64,
    /// Fast-path share of commits for the hardware mechanisms, 1.0 otherwise.
    pub success_rate: f64,
    pub wall_ms: u64,
    pub per_thread: Vec<ThreadReport>,
}

impl RunReport {
    pub fn csv_header() -> &'static str {
        "mechanism,domain,threads,commits,aborts,fallbacks,sfences,clwbs,nt_stores,success_rate,wall_ms"
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.4},{}",
            self.mechanism,
            self.domain,
            self.threads,
            self.commits,
            self.aborts,
            self.fallbacks,
            self.sfences,
            self.clwbs,
            self.nt_stores,
            self.success_rate,
            self.wall_ms
        )
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// One planned transaction.
#[derive(Debug, Clone, Copy)]
enum PlannedOp {
    Structure { lookup: bool, key: u64, value: u64 },
    Synthetic { seed: u64 },
}

fn plan_ops(spec: &WorkloadSpec, seed: u64) -> Vec<VecDeque<PlannedOp>> {
    let mut queues: Vec<VecDeque<PlannedOp>> = vec![VecDeque::new(); spec.threads];
    for o in 0..spec.ops {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ o.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let op = match spec.kind {
            WorkloadKind::Synthetic => PlannedOp::Synthetic { seed: rng.gen() },
            _ => PlannedOp::Structure {
                lookup: rng.gen_bool(spec.read_fraction),
                key: rng.gen_range(1..=spec.key_space),
                value: rng.gen::<u64>() >> 1,
            },
        };
        queues[(o % spec.threads as u64) as usize].push_back(op);
    }
    queues
}

/// Runs the workload through the transaction API and aggregates counters.
pub fn run_workload(spec: &WorkloadSpec, cfg: &LabConfig) -> Result<RunReport> {
    spec.validate()?;
    let mut eff = *cfg;
    eff.threads = spec.threads;
    eff.data_len = eff.data_len.max(spec.required_data_len());
    let lab = Lab::new(eff)?;
    let started = Instant::now();
    let mut queues = plan_ops(spec, eff.seed);
    let mut sessions = lab.sessions();
    // Salted apart from the per-op seeds so schedule and data stay independent.
    let mut rng = ChaCha8Rng::seed_from_u64(eff.seed ^ 0x5EED_0F5C);
    let mut guard = 0u64;
    loop {
        let busy: Vec<usize> = (0..spec.threads)
            .filter(|&t| !sessions[t].is_idle() || !queues[t].is_empty())
            .collect();
        if busy.is_empty() {
            break;
        }
        guard += 1;
        if guard > 500_000_000 {
            return Err(Error::usage("workload did not finish within the step budget"));
        }
        let t = busy[rng.gen_range(0..busy.len())];
        if sessions[t].is_idle() {
            let op = queues[t].pop_front().unwrap();
            sessions[t].start(make_program(spec, &op))?;
        }
        let _ = sessions[t].step()?;
    }
    let wall_ms = started.elapsed().as_millis() as u64;
    let counters = lab.mem().counters();
    let mut commits = 0;
    let mut aborts = 0;
    let mut fallbacks = 0;
    let mut lock_waits = 0;
    let per_thread: Vec<ThreadReport> = sessions
        .iter()
        .map(|s| {
            let st = s.stats();
            commits += st.commits;
            aborts += st.aborts;
            fallbacks += st.fallbacks;
            lock_waits += st.lock_waits;
            ThreadReport {
                thread: s.thread(),
                stats: st,
            }
        })
        .collect();
    let success_rate = match eff.mechanism {
        Mechanism::Htm | Mechanism::CcHtmUndoFb | Mechanism::CcHtmRedoFb if commits > 0 => {
            (commits - fallbacks) as f64 / commits as f64
        }
        _ => 1.0,
    };
    Ok(RunReport {
        mechanism: eff.mechanism.as_str().to_string(),
        domain: eff.domain.as_str().to_string(),
        threads: spec.threads,
        workload: spec.kind.as_str().to_string(),
        ops: spec.ops,
        seed: eff.seed,
        commits,
        aborts,
        fallbacks,
        lock_waits,
        stores: counters.total.stores,
        nt_stores: counters.total.nt_stores,
        clwbs: counters.total.clwbs,
        sfences: counters.total.sfences,
        loads: counters.total.loads,
        success_rate,
        wall_ms,
        per_thread,
    })
}

fn make_program(spec: &WorkloadSpec, op: &PlannedOp) -> Box<dyn TxProgram> {
    match (spec.kind, op) {
        (WorkloadKind::Hashmap, PlannedOp::Structure { lookup, key, value }) => {
            Box::new(HashProgram::new(
                HashLayout::new(spec.key_space),
                *lookup,
                *key,
                *value,
                None,
            ))
        }
        (WorkloadKind::CritBitTree, PlannedOp::Structure { lookup, key, value }) => {
            Box::new(CbProgram::new(
                CbLayout::new(spec.key_space),
                *lookup,
                *key,
                *value,
                None,
            ))
        }
        (WorkloadKind::Synthetic, PlannedOp::Synthetic { seed }) => Box::new(SynProgram::new(
            DATA_BASE,
            spec.key_space,
            spec.tx_reads,
            spec.tx_writes,
            *seed,
        )),
        _ => unreachable!("op planned for a different workload kind"),
    }
}

/// Open-addressing hashmap over 16-byte slots (key, value), linear probing,
/// key 0 reserved as the empty marker. Presized to twice the key space so
/// probe chains terminate without a resize path.
#[derive(Debug, Clone, Copy)]
struct HashLayout {
    base: u64,
    nslots: u64,
}

impl HashLayout {
    fn new(key_space: u64) -> Self {
        HashLayout {
            base: DATA_BASE,
            nslots: (key_space * 2).next_power_of_two().max(8),
        }
    }

    fn bytes(&self) -> u64 {
        self.nslots * 16
    }

    fn slot(&self, i: u64) -> u64 {
        self.base + i * 16
    }

    fn home(&self, key: u64) -> u64 {
        let bits = self.nslots.trailing_zeros();
        key.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> (64 - bits)
    }
}

/// Side channel for test observation of lookup results: stores
/// `value + 1` on hit, `0` on miss. Not part of the simulated memory.
type Out = Option<Arc<AtomicU64>>;

fn put_out(out: &Out, v: u64) {
    if let Some(o) = out {
        o.store(v, Ordering::SeqCst);
    }
}

struct HashProgram {
    lay: HashLayout,
    lookup: bool,
    key: u64,
    value: u64,
    out: Out,
    idx: u64,
    probes: u64,
}

impl HashProgram {
    fn new(lay: HashLayout, lookup: bool, key: u64, value: u64, out: Out) -> Self {
        let mut p = HashProgram {
            lay,
            lookup,
            key,
            value,
            out,
            idx: 0,
            probes: 0,
        };
        p.reset();
        p
    }
}

impl TxProgram for HashProgram {
    fn reset(&mut self) {
        self.idx = self.lay.home(self.key);
        self.probes = 0;
        put_out(&self.out, 0);
    }

    // One probe per step.
    fn step(&mut self, acc: &mut dyn TxAccess) -> std::result::Result<ProgStep, TxStop> {
        let slot = self.lay.slot(self.idx);
        let k = acc.read_u64(slot)?;
        if k == self.key {
            if self.lookup {
                let v = acc.read_u64(slot + 8)?;
                put_out(&self.out, v + 1);
            } else {
                acc.write_u64(slot + 8, self.value)?;
            }
            return Ok(ProgStep::Done);
        }
        if k == 0 {
            if !self.lookup {
                acc.write_u64(slot, self.key)?;
                acc.write_u64(slot + 8, self.value)?;
            }
            return Ok(ProgStep::Done);
        }
        self.idx = (self.idx + 1) & (self.lay.nslots - 1);
        self.probes += 1;
        if self.probes >= self.lay.nslots {
            return Err(TxStop::Fatal(Error::usage("hashmap is full")));
        }
        Ok(ProgStep::More)
    }
}

/// Crit-bit tree with 8-byte keys and values. The header line holds the root
/// pointer and two bump cursors; leaves and internal nodes live in flat
/// pools behind it. Tagged pointers: 0 empty, low bit set marks a leaf.
#[derive(Debug, Clone, Copy)]
struct CbLayout {
    base: u64,
    max_leaves: u64,
    max_nodes: u64,
}

impl CbLayout {
    fn new(key_space: u64) -> Self {
        CbLayout {
            base: DATA_BASE,
            max_leaves: key_space,
            max_nodes: key_space,
        }
    }

    fn bytes(&self) -> u64 {
        64 + self.max_leaves * 16 + self.max_nodes * 24
    }

    fn root(&self) -> u64 {
        self.base
    }

    fn leaf_cursor(&self) -> u64 {
        self.base + 8
    }

    fn node_cursor(&self) -> u64 {
        self.base + 16
    }

    fn leaf(&self, i: u64) -> u64 {
        self.base + 64 + i * 16
    }

    fn node(&self, j: u64) -> u64 {
        self.base + 64 + self.max_leaves * 16 + j * 24
    }
}

fn leaf_tag(i: u64) -> u64 {
    ((i + 1) << 1) | 1
}

fn node_tag(j: u64) -> u64 {
    (j + 1) << 1
}

fn is_leaf(p: u64) -> bool {
    p & 1 == 1
}

fn untag(p: u64) -> u64 {
    (p >> 1) - 1
}

/// Bit index from the most significant end; 0 is the MSB.
fn key_bit(key: u64, bit: u64) -> u64 {
    (key >> (63 - bit)) & 1
}

enum CbState {
    Start,
    /// Lookup or pre-insert descent.
    Walk { ptr: u64 },
    /// Second descent for an insert: `slot` is the address of the tagged
    /// pointer under inspection, `bit` the new node's crit bit.
    Splice { bit: u64, dir: u64, slot: u64 },
}

struct CbProgram {
    lay: CbLayout,
    lookup: bool,
    key: u64,
    value: u64,
    out: Out,
    st: CbState,
}

impl CbProgram {
    fn new(lay: CbLayout, lookup: bool, key: u64, value: u64, out: Out) -> Self {
        let mut p = CbProgram {
            lay,
            lookup,
            key,
            value,
            out,
            st: CbState::Start,
        };
        p.reset();
        p
    }

    fn alloc_leaf(&self, acc: &mut dyn TxAccess) -> std::result::Result<u64, TxStop> {
        let li = acc.read_u64(self.lay.leaf_cursor())?;
        if li >= self.lay.max_leaves {
            return Err(TxStop::Fatal(Error::usage("crit-bit leaf pool exhausted")));
        }
        acc.write_u64(self.lay.leaf(li), self.key)?;
        acc.write_u64(self.lay.leaf(li) + 8, self.value)?;
        acc.write_u64(self.lay.leaf_cursor(), li + 1)?;
        Ok(li)
    }
}

impl TxProgram for CbProgram {
    fn reset(&mut self) {
        self.st = CbState::Start;
        put_out(&self.out, 0);
    }

    // One pointer hop per step; the insert splice is one constant-size step.
    fn step(&mut self, acc: &mut dyn TxAccess) -> std::result::Result<ProgStep, TxStop> {
        match self.st {
            CbState::Start => {
                let root = acc.read_u64(self.lay.root())?;
                if root == 0 {
                    if !self.lookup {
                        let li = self.alloc_leaf(acc)?;
                        acc.write_u64(self.lay.root(), leaf_tag(li))?;
                    }
                    return Ok(ProgStep::Done);
                }
                self.st = CbState::Walk { ptr: root };
                Ok(ProgStep::More)
            }
            CbState::Walk { ptr } => {
                if is_leaf(ptr) {
                    let la = self.lay.leaf(untag(ptr));
                    let lk = acc.read_u64(la)?;
                    if lk == self.key {
                        if self.lookup {
                            let v = acc.read_u64(la + 8)?;
                            put_out(&self.out, v + 1);
                        } else {
                            acc.write_u64(la + 8, self.value)?;
                        }
                        return Ok(ProgStep::Done);
                    }
                    if self.lookup {
                        return Ok(ProgStep::Done);
                    }
                    let bit = (self.key ^ lk).leading_zeros() as u64;
                    self.st = CbState::Splice {
                        bit,
                        dir: key_bit(self.key, bit),
                        slot: self.lay.root(),
                    };
                    return Ok(ProgStep::More);
                }
                let na = self.lay.node(untag(ptr));
                let nb = acc.read_u64(na)?;
                let child = acc.read_u64(na + 8 + key_bit(self.key, nb) * 8)?;
                self.st = CbState::Walk { ptr: child };
                Ok(ProgStep::More)
            }
            CbState::Splice { bit, dir, slot } => {
                let p = acc.read_u64(slot)?;
                if p != 0 && !is_leaf(p) {
                    let na = self.lay.node(untag(p));
                    let nb = acc.read_u64(na)?;
                    if nb < bit {
                        self.st = CbState::Splice {
                            bit,
                            dir,
                            slot: na + 8 + key_bit(self.key, nb) * 8,
                        };
                        return Ok(ProgStep::More);
                    }
                }
                let li = self.alloc_leaf(acc)?;
                let nj = acc.read_u64(self.lay.node_cursor())?;
                if nj >= self.lay.max_nodes {
                    return Err(TxStop::Fatal(Error::usage("crit-bit node pool exhausted")));
                }
                let na = self.lay.node(nj);
                acc.write_u64(na, bit)?;
                acc.write_u64(na + 8 + dir * 8, leaf_tag(li))?;
                acc.write_u64(na + 8 + (1 - dir) * 8, p)?;
                acc.write_u64(self.lay.node_cursor(), nj + 1)?;
                acc.write_u64(slot, node_tag(nj))?;
                Ok(ProgStep::Done)
            }
        }
    }
}

/// Fixed read/write mix over random words, reseeded per attempt so retries
/// replay identically.
struct SynProgram {
    base: u64,
    words: u64,
    reads: u32,
    writes: u32,
    seed: u64,
    i: u32,
    rng: ChaCha8Rng,
}

impl SynProgram {
    fn new(base: u64, words: u64, reads: u32, writes: u32, seed: u64) -> Self {
        SynProgram {
            base,
            words,
            reads,
            writes,
            seed,
            i: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl TxProgram for SynProgram {
    fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.i = 0;
    }

    fn step(&mut self, acc: &mut dyn TxAccess) -> std::result::Result<ProgStep, TxStop> {
        if self.i < self.reads {
            let a = self.base + self.rng.gen_range(0..self.words) * 8;
            acc.read_u64(a)?;
        } else if self.i < self.reads + self.writes {
            let a = self.base + self.rng.gen_range(0..self.words) * 8;
            let v = self.rng.gen();
            acc.write_u64(a, v)?;
        } else {
            return Ok(ProgStep::Done);
        }
        self.i += 1;
        Ok(ProgStep::More)
    }
}
