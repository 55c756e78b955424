//! Sessions driven by real OS threads. The cooperative stepper is the
//! checker's tool; nothing in the engines may depend on it, so a shared
//! counter bumped from parallel threads must still come out exact.

use pmtx::pmem::PersistenceDomain;
use pmtx::txapi::{Lab, LabConfig, Mechanism, Operand, TxBody, TxOp, DATA_BASE};

fn increment_body(addr: u64) -> TxBody {
    TxBody::new(vec![
        TxOp::Load { reg: 0, addr },
        TxOp::Add { reg: 0, value: Operand::Imm(1) },
        TxOp::Store { addr, value: Operand::Reg(0) },
    ])
}

fn hammer(mechanism: Mechanism, domain: PersistenceDomain, threads: usize, iters: u64) {
    let mut cfg = LabConfig::new(mechanism, domain);
    cfg.threads = threads;
    let lab = Lab::new(cfg).unwrap();
    let addr = DATA_BASE;

    let handles: Vec<_> = lab
        .sessions()
        .into_iter()
        .map(|mut s| {
            std::thread::spawn(move || {
                for _ in 0..iters {
                    s.run_body(increment_body(addr)).unwrap();
                }
                s.stats()
            })
        })
        .collect();
    let mut commits = 0;
    for h in handles {
        commits += h.join().unwrap().commits;
    }

    let value = u64::from_le_bytes(lab.mem().peek(addr, 8).unwrap().try_into().unwrap());
    assert_eq!(value, threads as u64 * iters, "{mechanism} lost updates");
    assert_eq!(commits, threads as u64 * iters);
}

#[test]
fn parallel_increments_are_exact_under_every_concurrent_mechanism() {
    let iters = 150;
    for mechanism in [
        Mechanism::SpinUndo,
        Mechanism::SpinRedo,
        Mechanism::Stm,
        Mechanism::CcStm,
        Mechanism::Htm,
        Mechanism::CcHtmUndoFb,
        Mechanism::CcHtmRedoFb,
    ] {
        hammer(mechanism, PersistenceDomain::TransientCaches, 4, iters);
    }
    // Domain only changes persistence bookkeeping, not isolation.
    hammer(Mechanism::SpinUndo, PersistenceDomain::PersistentCaches, 4, iters);
    hammer(Mechanism::Stm, PersistenceDomain::PersistentCaches, 4, iters);
}

#[test]
fn disjoint_lines_commit_on_the_htm_fast_path() {
    let mut cfg = LabConfig::new(Mechanism::Htm, PersistenceDomain::TransientCaches);
    cfg.threads = 4;
    let lab = Lab::new(cfg).unwrap();

    let handles: Vec<_> = lab
        .sessions()
        .into_iter()
        .map(|mut s| {
            // One private line per thread: no two transactions ever touch
            // the same line, so nothing should fall back.
            let addr = DATA_BASE + (s.thread() as u64) * 64;
            std::thread::spawn(move || {
                for _ in 0..200 {
                    s.run_body(increment_body(addr)).unwrap();
                }
                s.stats()
            })
        })
        .collect();
    for h in handles {
        let stats = h.join().unwrap();
        assert_eq!(stats.commits, 200);
        assert_eq!(stats.fallbacks, 0);
    }
    for t in 0..4u64 {
        let v = lab.mem().peek(DATA_BASE + t * 64, 8).unwrap();
        assert_eq!(u64::from_le_bytes(v.try_into().unwrap()), 200);
    }
}
