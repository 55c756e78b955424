//! Command-line front end: runs workloads and correctness checks, emitting
//! reports as CSV or JSON. Exit status: 0 all good, 1 a check failed,
//! 2 usage or engine error.

use clap::Parser;
use pmtx::bench::{run_workload, RunReport, WorkloadKind, WorkloadSpec};
use pmtx::checker::{self, suites, Counterexample, WorkloadScript};
use pmtx::pmem::PersistenceDomain;
use pmtx::txapi::{LabConfig, Mechanism};
use pmtx::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pmtx",
    about = "Persistent-memory transaction lab: benchmarks and crash checking"
)]
struct Args {
    /// seq|spin-undo|spin-redo|stm|ccstm|htm|cchtm-undo|cchtm-redo
    #[arg(long)]
    mechanism: Option<String>,
    /// transient|persistent
    #[arg(long)]
    domain: Option<String>,
    /// hashmap|critbit|synthetic
    #[arg(long)]
    workload: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Total transactions for the workload
    #[arg(long)]
    ops: Option<u64>,
    /// Lookup fraction for the structure workloads
    #[arg(long = "read-frac")]
    read_frac: Option<f64>,
    /// Reads per synthetic transaction
    #[arg(long = "tx-reads")]
    tx_reads: Option<u32>,
    /// Writes per synthetic transaction
    #[arg(long = "tx-writes")]
    tx_writes: Option<u32>,
    /// Distinct keys (structures) or words (synthetic)
    #[arg(long = "key-space")]
    key_space: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// csv|json
    #[arg(long, default_value = "csv")]
    format: String,
    /// atomicity|order|serial|all
    #[arg(long)]
    check: Option<String>,
    /// key=value file applied before the flags above
    #[arg(long)]
    config: Option<std::path::PathBuf>,
}

fn main() {
    let args = Args::parse();
    match run(args) {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn run(args: Args) -> Result<bool> {
    if args.workload.is_none() && args.check.is_none() {
        return Err(Error::usage("nothing to do: pass --workload and/or --check"));
    }
    if !matches!(args.format.as_str(), "csv" | "json") {
        return Err(Error::usage(format!(
            "unknown format '{}' (want csv|json)",
            args.format
        )));
    }
    let mut cfg = LabConfig::new(Mechanism::SpinUndo, PersistenceDomain::TransientCaches);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.apply_str(&text)?;
    }
    if let Some(m) = &args.mechanism {
        cfg.mechanism = Mechanism::parse(m)?;
    }
    if let Some(d) = &args.domain {
        cfg.domain = PersistenceDomain::parse(d)?;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let mut all_pass = true;
    if let Some(w) = &args.workload {
        let kind = WorkloadKind::parse(w)?;
        let mut spec = WorkloadSpec::new(kind);
        spec.threads = cfg.threads;
        if let Some(v) = args.ops {
            spec.ops = v;
        }
        if let Some(v) = args.read_frac {
            spec.read_fraction = v;
        }
        if let Some(v) = args.tx_reads {
            spec.tx_reads = v;
        }
        if let Some(v) = args.tx_writes {
            spec.tx_writes = v;
        }
        if let Some(v) = args.key_space {
            spec.key_space = v;
        }
        let mut bench_cfg = cfg;
        bench_cfg.tracing = false;
        let report = run_workload(&spec, &bench_cfg)?;
        match args.format.as_str() {
            "json" => println!("{}", report.json()),
            _ => {
                println!("{}", RunReport::csv_header());
                println!("{}", report.csv());
            }
        }
    }
    if let Some(which) = &args.check {
        all_pass &= run_checks(&cfg, which, &args.format)?;
    }
    Ok(all_pass)
}

#[derive(serde::Serialize)]
struct CheckRecord<'a> {
    check: &'a str,
    script: &'a str,
    pass: bool,
    states_checked: u64,
    counterexample: &'a Option<Counterexample>,
}

fn run_checks(cfg: &LabConfig, which: &str, format: &str) -> Result<bool> {
    let (atomicity, order, serial) = match which {
        "atomicity" => (true, false, false),
        "order" => (false, true, false),
        "serial" => (false, false, true),
        "all" => (true, true, true),
        other => {
            return Err(Error::usage(format!(
                "unknown check '{other}' (want atomicity|order|serial|all)"
            )))
        }
    };
    let mut all_pass = true;
    let mut emit = |check: &str, script: &str, v: &checker::Verdict| {
        all_pass &= v.pass;
        if format == "json" {
            let rec = CheckRecord {
                check,
                script,
                pass: v.pass,
                states_checked: v.states_checked,
                counterexample: &v.counterexample,
            };
            println!("{}", serde_json::to_string(&rec).expect("record serializes"));
        } else {
            println!(
                "check={check} script={script} pass={} states={}",
                v.pass, v.states_checked
            );
            if let Some(cx) = &v.counterexample {
                println!("counterexample: {cx}");
            }
        }
    };
    if atomicity {
        let scripts: [(&str, WorkloadScript); 2] = [
            ("two-write", suites::two_write()),
            ("chain-3x2", suites::chain(3, 2)),
        ];
        for (name, script) in &scripts {
            let v = checker::check_atomicity(cfg, script)?;
            emit("atomicity", name, &v);
        }
    }
    if order {
        let v = checker::check_dependency_order(cfg, &suites::dependent_pair())?;
        emit("order", "dependent-pair", &v);
    }
    if serial {
        for i in 0..20u64 {
            let script = suites::random_bounded(cfg.seed.wrapping_add(i));
            let v = checker::check_serializable(cfg, &script)?;
            emit("serial", &format!("random-{i}"), &v);
        }
    }
    Ok(all_pass)
}
