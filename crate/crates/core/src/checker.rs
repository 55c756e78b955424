//! Crash-injection correctness checking.
//!
//! A [`WorkloadScript`] is run once through the transaction API with event
//! tracing on. Crashes are then injected at event-log positions: the prefix
//! is replayed into a fresh memory, every admissible post-crash image is
//! enumerated (or sampled past a cap), recovery runs on each image, and the
//! result is compared against brute-force references:
//!
//! * atomicity: the recovered data region must equal the initial image with
//!   some per-thread prefix-closed subset of the committed transactions
//!   applied in commit order;
//! * dependency order: if a transaction's effects survived, the effects of
//!   every transaction it read from must have survived too;
//! * serializability: the crash-free final state must match at least one
//!   interleaving of the scripted transactions consistent with per-thread
//!   program order.
//!
//! Failures come back as replayable [`Counterexample`]s, never panics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pmem::{Event, EventKind, Memory, PersistedImage, ThreadId, DEFAULT_LINE_SIZE};
use crate::txapi::{global_recover, Lab, LabConfig, SessionStats, StepOutcome, TxBody, TxEffects, DATA_BASE};
use crate::{Error, Result};

/// Cap on admissible states checked per crash point; past it the enumerator
/// switches to seeded sampling that always includes the minimal and maximal
/// witnesses.
pub const MAX_STATES_PER_POINT: usize = 4096;

/// Upper bound on cooperative steps before a script run is declared stuck.
const STEP_GUARD: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPolicy {
    /// Inject after every persistence-relevant event, plus before any.
    EveryEvent,
    /// Seeded subsample of `k` crash positions; the first and last position
    /// are always kept.
    SampledK { seed: u64, k: usize },
    /// One specific event-log position (number of events executed).
    AtEvent(u64),
}

#[derive(Debug, Clone)]
pub struct WorkloadScript {
    /// `bodies[t]` is the program-ordered transaction list of logical
    /// thread `t`.
    pub bodies: Vec<Vec<TxBody>>,
    /// Explicit turn order, one session step per entry. When exhausted (or
    /// `None`) turns fall to a seeded random choice among busy threads, so
    /// replay stays deterministic either way.
    pub schedule: Option<Vec<ThreadId>>,
    pub crash_policy: CrashPolicy,
    pub seed: u64,
}

impl WorkloadScript {
    pub fn new(bodies: Vec<Vec<TxBody>>) -> Self {
        WorkloadScript {
            bodies,
            schedule: None,
            crash_policy: CrashPolicy::EveryEvent,
            seed: 1,
        }
    }

    /// Runs the threads strictly one after another (thread 0 to completion,
    /// then thread 1, ...), which makes cross-thread reads-from edges
    /// deterministic.
    pub fn sequential(bodies: Vec<Vec<TxBody>>) -> Self {
        let mut schedule = Vec::new();
        for (t, txs) in bodies.iter().enumerate() {
            let ops: usize = txs.iter().map(|b| b.ops.len() + 6).sum();
            schedule.extend(std::iter::repeat(t).take(ops * 8 + 64));
        }
        WorkloadScript {
            schedule: Some(schedule),
            ..WorkloadScript::new(bodies)
        }
    }

    pub fn with_policy(mut self, policy: CrashPolicy) -> Self {
        self.crash_policy = policy;
        self
    }
}

/// One committed transaction, in global commit order.
#[derive(Debug, Clone)]
pub struct CommittedTx {
    pub thread: ThreadId,
    /// Index into the thread's body list.
    pub index: usize,
    pub effects: TxEffects,
}

/// Everything the analysis phase needs from one scripted execution.
#[derive(Debug)]
pub struct ScriptRun {
    /// Effective config (thread count forced to the script's).
    pub cfg: LabConfig,
    pub line_size: u64,
    pub committed: Vec<CommittedTx>,
    pub events: Vec<Event>,
    pub regions: Vec<(u64, u64)>,
    /// Final volatile value of every word any body touches.
    pub final_words: BTreeMap<u64, u64>,
    pub stats: Vec<SessionStats>,
}

impl ScriptRun {
    /// Line-rounded data region bounds; checks compare only this range.
    fn data_range(&self) -> (u64, u64) {
        let ls = self.line_size;
        (DATA_BASE, (self.cfg.data_len + ls - 1) & !(ls - 1))
    }
}

/// Executes the script once, cooperatively, and records committed effects.
pub fn run_script(cfg: &LabConfig, script: &WorkloadScript) -> Result<ScriptRun> {
    if script.bodies.is_empty() {
        return Err(Error::usage("script needs at least one thread"));
    }
    let mut eff = *cfg;
    eff.threads = script.bodies.len();
    eff.tracing = true;
    let lab = Lab::new(eff)?;
    let nt = script.bodies.len();
    let mut sessions = lab.sessions();
    let mut next_body = vec![0usize; nt];
    let mut cur_body = vec![0usize; nt];
    let mut committed = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut sched = script
        .schedule
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .copied();
    let mut steps = 0u64;
    loop {
        let busy: Vec<ThreadId> = (0..nt)
            .filter(|&t| !sessions[t].is_idle() || next_body[t] < script.bodies[t].len())
            .collect();
        if busy.is_empty() {
            break;
        }
        steps += 1;
        if steps > STEP_GUARD {
            return Err(Error::usage("script did not finish within the step budget"));
        }
        let t = match sched.next() {
            Some(t) if t < nt => t,
            Some(t) => {
                return Err(Error::usage(format!(
                    "schedule names thread {t} but the script has {nt}"
                )))
            }
            None => busy[rng.gen_range(0..busy.len())],
        };
        if !busy.contains(&t) {
            continue;
        }
        if sessions[t].is_idle() {
            cur_body[t] = next_body[t];
            next_body[t] += 1;
            sessions[t].start_body(script.bodies[t][cur_body[t]].clone())?;
        }
        if sessions[t].step()? == StepOutcome::Committed {
            committed.push(CommittedTx {
                thread: t,
                index: cur_body[t],
                effects: sessions[t].take_effects(),
            });
        }
    }
    let mut touched: BTreeSet<u64> = BTreeSet::new();
    for bodies in &script.bodies {
        for b in bodies {
            touched.extend(b.touched_addrs());
        }
    }
    let mut final_words = BTreeMap::new();
    for &a in &touched {
        final_words.insert(a, crate::util::u64_le(&lab.mem().peek(a, 8)?));
    }
    Ok(ScriptRun {
        cfg: eff,
        line_size: DEFAULT_LINE_SIZE,
        committed,
        events: lab.mem().events(),
        regions: lab.mem().regions(),
        final_words,
        stats: sessions.iter().map(|s| s.stats()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Counterexample {
    /// Number of events executed before the injected crash.
    pub crash_seq: u64,
    /// Compact cut-choice encoding of the admissible state ("-" when the
    /// property needs no crash, e.g. serializability).
    pub witness: String,
    pub property: String,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "crash_seq={} witness={} property={} expected={} actual={}",
            self.crash_seq, self.witness, self.property, self.expected, self.actual
        )
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub states_checked: u64,
    pub counterexample: Option<Counterexample>,
}

impl Verdict {
    fn passed(states_checked: u64) -> Self {
        Verdict {
            pass: true,
            states_checked,
            counterexample: None,
        }
    }

    fn failed(states_checked: u64, cx: Counterexample) -> Self {
        Verdict {
            pass: false,
            states_checked,
            counterexample: Some(cx),
        }
    }
}

/// Crash positions are prefix lengths of the event log. Positions right
/// after a load are skipped: loads add no store history, and any persistence
/// guarantee they add only shrinks the admissible set, so the preceding
/// position already covers those states. Positions between two stores of
/// one publication group are also skipped: the group is a single primitive,
/// so no crash can observe the log truncated in its middle.
fn crash_positions(events: &[Event], policy: CrashPolicy) -> Vec<usize> {
    let mut all = vec![0usize];
    for (i, e) in events.iter().enumerate() {
        if matches!(e.kind, EventKind::Load | EventKind::Crash) {
            continue;
        }
        if let (Some(g), Some(next)) = (e.group, events.get(i + 1)) {
            if next.group == Some(g) {
                continue;
            }
        }
        all.push(i + 1);
    }
    match policy {
        CrashPolicy::EveryEvent => all,
        CrashPolicy::AtEvent(seq) => vec![(seq as usize).min(events.len())],
        CrashPolicy::SampledK { seed, k } => {
            let want = k.max(2).min(all.len());
            if all.len() <= want {
                return all;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: BTreeSet<usize> = BTreeSet::new();
            picked.insert(all[0]);
            picked.insert(*all.last().unwrap());
            let mid = &all[1..all.len() - 1];
            while picked.len() < want {
                picked.insert(mid[rng.gen_range(0..mid.len())]);
            }
            picked.into_iter().collect()
        }
    }
}

/// Digest of the materialized, nonzero lines inside [base, base+len).
fn data_digest(img: &PersistedImage, base: u64, len: u64) -> String {
    let end = base + len;
    crate::util::fnv64_hex(
        img.lines()
            .filter(|(b, data)| *b >= base && *b < end && data.iter().any(|x| *x != 0))
            .flat_map(|(b, data)| [b.to_le_bytes().to_vec(), data.to_vec()]),
    )
}

/// Thread and within-thread rank of each committed transaction.
struct CommitIndex {
    threads: Vec<ThreadId>,
    ranks: Vec<usize>,
    /// committed transactions per thread
    per_thread: Vec<usize>,
}

fn commit_index(run: &ScriptRun) -> CommitIndex {
    let nt = run.cfg.threads;
    let mut per_thread = vec![0usize; nt];
    let mut threads = Vec::with_capacity(run.committed.len());
    let mut ranks = Vec::with_capacity(run.committed.len());
    for c in &run.committed {
        threads.push(c.thread);
        ranks.push(per_thread[c.thread]);
        per_thread[c.thread] += 1;
    }
    CommitIndex {
        threads,
        ranks,
        per_thread,
    }
}

/// `prefix[t]` committed transactions of thread t are "in"; membership of
/// committed tx i under that cut.
fn in_prefix(ci: &CommitIndex, prefix: &[usize], i: usize) -> bool {
    ci.ranks[i] < prefix[ci.threads[i]]
}

/// All per-thread prefix cuts, keyed by the digest of the data image they
/// produce. Multiple cuts can collide on one digest; all are kept.
struct Candidates {
    by_digest: HashMap<String, Vec<Vec<usize>>>,
    count: usize,
}

fn enumerate_candidates(run: &ScriptRun, ci: &CommitIndex) -> Result<Candidates> {
    let (base, len) = run.data_range();
    let mut count: usize = 1;
    for n in &ci.per_thread {
        count = count
            .checked_mul(n + 1)
            .filter(|v| *v <= 1 << 20)
            .ok_or_else(|| Error::usage("too many committed-prefix combinations"))?;
    }
    let mut by_digest: HashMap<String, Vec<Vec<usize>>> = HashMap::new();
    let mut prefix = vec![0usize; ci.per_thread.len()];
    loop {
        let mut img = PersistedImage::empty(run.line_size, vec![(base, len)]);
        for (i, c) in run.committed.iter().enumerate() {
            if in_prefix(ci, &prefix, i) {
                for (addr, bytes) in &c.effects.writes {
                    img.write(*addr, bytes)?;
                }
            }
        }
        by_digest
            .entry(data_digest(&img, base, len))
            .or_default()
            .push(prefix.clone());
        let mut d = 0;
        loop {
            if d == prefix.len() {
                return Ok(Candidates { by_digest, count });
            }
            prefix[d] += 1;
            if prefix[d] <= ci.per_thread[d] {
                break;
            }
            prefix[d] = 0;
            d += 1;
        }
    }
}

/// Reads-from edges (reader, writer) over commit-order ids: the reader
/// observed a value whose most recent committed writer is another
/// transaction. Reads satisfied by the reader's own writes are skipped.
fn reads_from_edges(run: &ScriptRun) -> Vec<(usize, usize)> {
    let mut last_write: HashMap<u64, (usize, Vec<u8>)> = HashMap::new();
    let mut edges = Vec::new();
    for (i, c) in run.committed.iter().enumerate() {
        for (addr, val) in &c.effects.reads {
            if c.effects.writes.iter().any(|(a, v)| a == addr && v == val) {
                continue;
            }
            if let Some((w, wv)) = last_write.get(addr) {
                if wv == val {
                    edges.push((i, *w));
                }
            }
        }
        for (addr, val) in &c.effects.writes {
            last_write.insert(*addr, (i, val.clone()));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn prefix_closed_under(ci: &CommitIndex, edges: &[(usize, usize)], prefix: &[usize]) -> bool {
    edges
        .iter()
        .all(|&(r, w)| !in_prefix(ci, prefix, r) || in_prefix(ci, prefix, w))
}

enum Property {
    Atomicity,
    DependencyOrder,
}

fn crash_check(run: &ScriptRun, policy: CrashPolicy, prop: Property) -> Result<Verdict> {
    let ci = commit_index(run);
    let cands = enumerate_candidates(run, &ci)?;
    let edges = match prop {
        Property::Atomicity => Vec::new(),
        Property::DependencyOrder => reads_from_edges(run),
    };
    let (base, len) = run.data_range();
    let mut states_checked = 0u64;
    for p in crash_positions(&run.events, policy) {
        let mem =
            Memory::replay_prefix(run.cfg.domain, run.line_size, &run.regions, &run.events, p)?;
        for st in mem.crash_states(MAX_STATES_PER_POINT)? {
            states_checked += 1;
            let mut img = st.persisted;
            global_recover(&run.cfg, &mut img)?;
            let digest = data_digest(&img, base, len);
            let fail = |expected: String, property: &str| {
                Verdict::failed(
                    states_checked,
                    Counterexample {
                        crash_seq: p as u64,
                        witness: st.choices.compact(),
                        property: property.to_string(),
                        expected,
                        actual: digest.clone(),
                    },
                )
            };
            match (&prop, cands.by_digest.get(&digest)) {
                (Property::Atomicity, None) => {
                    return Ok(fail(
                        format!("one-of-{}-committed-prefix-images", cands.count),
                        "atomicity",
                    ));
                }
                (Property::Atomicity, Some(_)) => {}
                (Property::DependencyOrder, None) => {
                    return Ok(fail(
                        format!("one-of-{}-committed-prefix-images", cands.count),
                        "dependency-order",
                    ));
                }
                (Property::DependencyOrder, Some(cuts)) => {
                    if !cuts.iter().any(|c| prefix_closed_under(&ci, &edges, c)) {
                        return Ok(fail(
                            "reads-from-closed-committed-prefix-image".to_string(),
                            "dependency-order",
                        ));
                    }
                }
            }
        }
    }
    Ok(Verdict::passed(states_checked))
}

/// Every admissible post-crash image must recover to the initial image with
/// a per-thread prefix-closed subset of committed transactions applied.
pub fn check_atomicity(cfg: &LabConfig, script: &WorkloadScript) -> Result<Verdict> {
    let run = run_script(cfg, script)?;
    crash_check(&run, script.crash_policy, Property::Atomicity)
}

/// If a committed transaction's effects survive a crash, the effects of
/// every transaction it read from must survive too.
pub fn check_dependency_order(cfg: &LabConfig, script: &WorkloadScript) -> Result<Verdict> {
    let run = run_script(cfg, script)?;
    crash_check(&run, script.crash_policy, Property::DependencyOrder)
}

/// Brute-force serializability: the crash-free final words must equal the
/// result of some interleaving of the bodies that preserves per-thread
/// order. Bounded to 3 threads x 3 transactions x 4 distinct addresses.
pub fn check_serializable(cfg: &LabConfig, script: &WorkloadScript) -> Result<Verdict> {
    if script.bodies.len() > 3 {
        return Err(Error::usage("serializability check is bounded to 3 threads"));
    }
    if script.bodies.iter().any(|b| b.len() > 3) {
        return Err(Error::usage(
            "serializability check is bounded to 3 transactions per thread",
        ));
    }
    let mut addrs: BTreeSet<u64> = BTreeSet::new();
    for bodies in &script.bodies {
        for b in bodies {
            addrs.extend(b.touched_addrs());
        }
    }
    if addrs.len() > 4 {
        return Err(Error::usage(
            "serializability check is bounded to 4 distinct addresses",
        ));
    }
    let run = run_script(cfg, script)?;
    let addrs: Vec<u64> = addrs.into_iter().collect();
    let actual: Vec<u64> = addrs
        .iter()
        .map(|a| run.final_words.get(a).copied().unwrap_or(0))
        .collect();
    let mut orders: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut idx = vec![0usize; script.bodies.len()];
    let mut order = Vec::new();
    interleavings(&script.bodies, &mut idx, &mut order, &mut orders);
    let mut matched = false;
    for ord in &orders {
        let mut store: BTreeMap<u64, u64> = BTreeMap::new();
        for &(t, i) in ord {
            script.bodies[t][i].apply(&mut store);
        }
        let words: Vec<u64> = addrs
            .iter()
            .map(|a| store.get(a).copied().unwrap_or(0))
            .collect();
        if words == actual {
            matched = true;
            break;
        }
    }
    let states = orders.len() as u64;
    if matched {
        Ok(Verdict::passed(states))
    } else {
        let bytes: Vec<u8> = addrs
            .iter()
            .zip(&actual)
            .flat_map(|(a, v)| {
                let mut b = a.to_le_bytes().to_vec();
                b.extend_from_slice(&v.to_le_bytes());
                b
            })
            .collect();
        Ok(Verdict::failed(
            states,
            Counterexample {
                crash_seq: run.events.len() as u64,
                witness: "-".to_string(),
                property: "serializability".to_string(),
                expected: format!("one-of-{}-serial-orders", orders.len()),
                actual: crate::util::fnv64_hex([bytes]),
            },
        ))
    }
}

fn interleavings(
    bodies: &[Vec<TxBody>],
    idx: &mut [usize],
    order: &mut Vec<(usize, usize)>,
    out: &mut Vec<Vec<(usize, usize)>>,
) {
    let mut advanced = false;
    for t in 0..bodies.len() {
        if idx[t] < bodies[t].len() {
            advanced = true;
            idx[t] += 1;
            order.push((t, idx[t] - 1));
            interleavings(bodies, idx, order, out);
            order.pop();
            idx[t] -= 1;
        }
    }
    if !advanced {
        out.push(order.clone());
    }
}

/// Re-derives a counterexample from scratch: reruns the script, rebuilds the
/// named crash state, recovers, and re-evaluates the property. Returns true
/// iff the violation reproduces exactly (same recovered digest, still
/// violating).
pub fn replay_counterexample(
    cfg: &LabConfig,
    script: &WorkloadScript,
    cx: &Counterexample,
) -> Result<bool> {
    if cx.property == "serializability" {
        let v = check_serializable(cfg, script)?;
        return Ok(match v.counterexample {
            Some(c) => !v.pass && c.actual == cx.actual,
            None => false,
        });
    }
    let run = run_script(cfg, script)?;
    let ci = commit_index(&run);
    let cands = enumerate_candidates(&run, &ci)?;
    let p = (cx.crash_seq as usize).min(run.events.len());
    let mem = Memory::replay_prefix(run.cfg.domain, run.line_size, &run.regions, &run.events, p)?;
    let Some(st) = mem
        .crash_states(MAX_STATES_PER_POINT)?
        .into_iter()
        .find(|s| s.choices.compact() == cx.witness)
    else {
        return Ok(false);
    };
    let mut img = st.persisted;
    global_recover(&run.cfg, &mut img)?;
    let (base, len) = run.data_range();
    let digest = data_digest(&img, base, len);
    if digest != cx.actual {
        return Ok(false);
    }
    match cx.property.as_str() {
        "atomicity" => Ok(!cands.by_digest.contains_key(&digest)),
        "dependency-order" => Ok(match cands.by_digest.get(&digest) {
            None => true,
            Some(cuts) => {
                let edges = reads_from_edges(&run);
                !cuts.iter().any(|c| prefix_closed_under(&ci, &edges, c))
            }
        }),
        other => Err(Error::usage(format!("unknown property '{other}'"))),
    }
}

/// Canned scripts used by both the CLI and the integration suites.
pub mod suites {
    use super::*;
    use crate::txapi::{Operand, TxOp};

    /// One transaction writing two words on distinct cache lines.
    pub fn two_write() -> WorkloadScript {
        WorkloadScript::new(vec![vec![TxBody::new(vec![
            TxOp::Store {
                addr: DATA_BASE,
                value: Operand::Imm(0x11),
            },
            TxOp::Store {
                addr: DATA_BASE + 64,
                value: Operand::Imm(0x22),
            },
        ])]])
    }

    /// Writer followed by a dependent reader-writer on another thread: the
    /// second transaction loads the first's word and derives the value it
    /// stores elsewhere, creating a reads-from edge.
    pub fn dependent_pair() -> WorkloadScript {
        let writer = TxBody::new(vec![TxOp::Store {
            addr: DATA_BASE,
            value: Operand::Imm(0xA1),
        }]);
        let reader = TxBody::new(vec![
            TxOp::Load {
                reg: 0,
                addr: DATA_BASE,
            },
            TxOp::Add {
                reg: 0,
                value: Operand::Imm(0x0D00),
            },
            TxOp::Store {
                addr: DATA_BASE + 192,
                value: Operand::Reg(0),
            },
        ]);
        WorkloadScript::sequential(vec![vec![writer], vec![reader]])
    }

    /// `txs` transactions of `writes` word writes each on one thread; the
    /// transactions overwrite the same addresses with distinct values, so
    /// every committed prefix has a distinct image.
    pub fn chain(txs: usize, writes: usize) -> WorkloadScript {
        let bodies: Vec<TxBody> = (0..txs)
            .map(|i| {
                TxBody::new(
                    (0..writes)
                        .map(|j| TxOp::Store {
                            addr: DATA_BASE + j as u64 * 64,
                            value: Operand::Imm((i as u64 + 1) * 0x100 + j as u64 + 1),
                        })
                        .collect(),
                )
            })
            .collect();
        WorkloadScript::new(vec![bodies])
    }

    /// Seeded random script inside the serializability brute-force bounds
    /// (up to 3 threads x 3 transactions x 4 addresses, short bodies).
    pub fn random_bounded(seed: u64) -> WorkloadScript {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool: Vec<u64> = (0..4).map(|i| DATA_BASE + i * 64).collect();
        let threads = rng.gen_range(1..=3);
        let bodies = (0..threads)
            .map(|_| {
                (0..rng.gen_range(1..=3))
                    .map(|_| {
                        let ops = (0..rng.gen_range(1..=4))
                            .map(|_| {
                                let addr = pool[rng.gen_range(0..pool.len())];
                                let reg = rng.gen_range(0..3);
                                match rng.gen_range(0..4) {
                                    0 => TxOp::Load { reg, addr },
                                    1 => TxOp::Add {
                                        reg,
                                        value: Operand::Imm(rng.gen_range(1..8)),
                                    },
                                    2 => TxOp::Store {
                                        addr,
                                        value: if rng.gen_bool(0.5) {
                                            Operand::Reg(reg)
                                        } else {
                                            Operand::Imm(rng.gen_range(1..10))
                                        },
                                    },
                                    _ => TxOp::StoreIfEq {
                                        guard: reg,
                                        expect: rng.gen_range(0..3),
                                        addr,
                                        value: Operand::Imm(rng.gen_range(1..10)),
                                    },
                                }
                            })
                            .collect();
                        TxBody::new(ops)
                    })
                    .collect()
            })
            .collect();
        let mut script = WorkloadScript::new(bodies);
        script.seed = seed;
        script
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::PersistenceDomain;
    use crate::txapi::Mechanism;

    #[test]
    fn two_write_is_atomic_under_undo_logging() {
        let cfg = LabConfig::new(Mechanism::SpinUndo, PersistenceDomain::TransientCaches);
        let v = check_atomicity(&cfg, &suites::two_write()).unwrap();
        assert!(v.pass, "{:?}", v.counterexample);
        assert!(v.states_checked > 0);
    }

    #[test]
    fn seq_two_write_tears_and_the_witness_replays() {
        let cfg = LabConfig::new(Mechanism::Seq, PersistenceDomain::TransientCaches);
        let script = suites::two_write();
        let v = check_atomicity(&cfg, &script).unwrap();
        assert!(!v.pass, "unlogged direct stores cannot be atomic");
        let cx = v.counterexample.expect("failed verdict carries a witness");
        assert!(replay_counterexample(&cfg, &script, &cx).unwrap());
        // Deterministic: the same check finds the same counterexample.
        let v2 = check_atomicity(&cfg, &script).unwrap();
        assert_eq!(v2.counterexample.unwrap(), cx);
    }

    #[test]
    fn htm_fast_path_tears_under_transient_caches() {
        let cfg = LabConfig::new(Mechanism::Htm, PersistenceDomain::TransientCaches);
        let script = suites::two_write();
        let v = check_atomicity(&cfg, &script).unwrap();
        assert!(!v.pass, "unlogged hardware commit leaves torn states");
        let cx = v.counterexample.unwrap();
        assert!(replay_counterexample(&cfg, &script, &cx).unwrap());
    }

    #[test]
    fn undo_protocol_mutations_are_caught() {
        let base = LabConfig::new(Mechanism::SpinUndo, PersistenceDomain::TransientCaches);
        let script = suites::two_write();
        assert!(check_atomicity(&base, &script).unwrap().pass);

        let mut m1 = base;
        m1.mutations.skip_undo_append_fence = true;
        let v1 = check_atomicity(&m1, &script).unwrap();
        assert!(!v1.pass, "dropping the log-append fence must be detected");
        assert!(replay_counterexample(&m1, &script, &v1.counterexample.unwrap()).unwrap());

        let mut m2 = base;
        m2.mutations.undo_commit_before_writeset = true;
        let v2 = check_atomicity(&m2, &script).unwrap();
        assert!(!v2.pass, "truncating before the write set persists must be detected");
    }

    #[test]
    fn dependent_write_requires_its_predecessor() {
        for mech in [Mechanism::CcStm, Mechanism::SpinUndo] {
            let cfg = LabConfig::new(mech, PersistenceDomain::TransientCaches);
            let v = check_dependency_order(&cfg, &suites::dependent_pair()).unwrap();
            assert!(v.pass, "{mech}: {:?}", v.counterexample);
            assert!(v.states_checked > 0);
        }
    }

    #[test]
    fn concurrent_increments_serialize() {
        use crate::txapi::{Operand, TxOp};
        let incr = TxBody::new(vec![
            TxOp::Load {
                reg: 0,
                addr: DATA_BASE,
            },
            TxOp::Add {
                reg: 0,
                value: Operand::Imm(1),
            },
            TxOp::Store {
                addr: DATA_BASE,
                value: Operand::Reg(0),
            },
        ]);
        let script = WorkloadScript::new(vec![vec![incr.clone()], vec![incr]]);
        let cfg = LabConfig::new(Mechanism::Stm, PersistenceDomain::TransientCaches);
        let v = check_serializable(&cfg, &script).unwrap();
        assert!(v.pass, "{:?}", v.counterexample);
    }

    #[test]
    fn serializability_bounds_are_enforced() {
        let body = TxBody::new(vec![]);
        let script = WorkloadScript::new(vec![
            vec![body.clone()],
            vec![body.clone()],
            vec![body.clone()],
            vec![body],
        ]);
        let cfg = LabConfig::new(Mechanism::Stm, PersistenceDomain::TransientCaches);
        assert!(check_serializable(&cfg, &script).is_err());
    }

    #[test]
    fn empty_script_passes_trivially() {
        let cfg = LabConfig::new(Mechanism::SpinRedo, PersistenceDomain::TransientCaches);
        let script = WorkloadScript::new(vec![vec![]]);
        let v = check_atomicity(&cfg, &script).unwrap();
        assert!(v.pass);
    }

    #[test]
    fn random_scripts_stay_in_bounds() {
        for seed in 0..32 {
            let s = suites::random_bounded(seed);
            assert!((1..=3).contains(&s.bodies.len()));
            assert!(s.bodies.iter().all(|b| (1..=3).contains(&b.len())));
            let addrs: BTreeSet<u64> = s
                .bodies
                .iter()
                .flatten()
                .flat_map(|b| b.touched_addrs())
                .collect();
            assert!(addrs.len() <= 4);
        }
    }

    #[test]
    fn sampled_crash_positions_keep_extremes() {
        let cfg = LabConfig::new(Mechanism::SpinUndo, PersistenceDomain::TransientCaches);
        let run = run_script(&cfg, &suites::chain(3, 2)).unwrap();
        let every = crash_positions(&run.events, CrashPolicy::EveryEvent);
        let sampled = crash_positions(
            &run.events,
            CrashPolicy::SampledK { seed: 7, k: 5 },
        );
        assert_eq!(sampled.len(), 5);
        assert_eq!(sampled.first(), every.first());
        assert_eq!(sampled.last(), every.last());
        assert!(sampled.windows(2).all(|w| w[0] < w[1]));
    }
}
