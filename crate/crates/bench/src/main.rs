//! `dsbench`: workload benchmarks and snapshot recovery for the durable set
//! library.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use durable_sets::domain::Domain;
use durable_sets::domain::DomainConfig;
use durable_sets::hashmap::{HashSet, Variant};
use durable_sets::linkfree::LfList;
use durable_sets::pmem::PersistentSnapshot;
use durable_sets::soft::SoftList;

use durable_sets_bench::workload::{emit_csv, run, Structure, WorkloadSpec};

#[derive(Parser)]
#[command(name = "dsbench", about = "Durable set benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload and emit per-iteration CSV rows.
    Run {
        /// lf-list | soft-list | lf-hash | soft-hash
        #[arg(long)]
        structure: String,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Seconds per iteration (wall clock).
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        /// Operations per thread; overrides --duration and makes op streams
        /// fully deterministic.
        #[arg(long)]
        ops: Option<u64>,
        /// Key range; the set is prefilled with half of it.
        #[arg(long, default_value_t = 256)]
        range: i64,
        /// Percentage of read (contains) operations.
        #[arg(long, default_value_t = 90)]
        reads: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        iterations: u32,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild a set from a dumped crash snapshot and print its keys.
    Recover {
        /// Snapshot file produced by the pmem dump format.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// lf-list | soft-list | lf-hash | soft-hash
        #[arg(long)]
        structure: String,
        /// Bucket count for the hash variants.
        #[arg(long, default_value_t = 8)]
        buckets: usize,
    },
}

fn main() -> std::process::ExitCode {
    match Cli::parse().command {
        Command::Run {
            structure,
            threads,
            duration,
            ops,
            range,
            reads,
            seed,
            iterations,
            out,
        } => {
            let Some(structure) = Structure::parse(&structure) else {
                eprintln!("unknown structure; expected lf-list, soft-list, lf-hash or soft-hash");
                return std::process::ExitCode::from(2);
            };
            if threads == 0 || range < 2 || reads > 100 || iterations == 0 {
                eprintln!("invalid workload spec");
                return std::process::ExitCode::from(2);
            }
            let spec = WorkloadSpec {
                structure,
                threads,
                duration: Duration::from_secs_f64(duration),
                ops_per_thread: ops,
                key_range: range,
                read_pct: reads,
                seed,
                iterations,
            };
            let result = run(&spec);
            let emitted = match out {
                Some(path) => {
                    let mut file = match std::fs::File::create(&path) {
                        Ok(f) => f,
                        Err(e) => {
                            eprintln!("cannot create {}: {e}", path.display());
                            return std::process::ExitCode::FAILURE;
                        }
                    };
                    emit_csv(&result, &mut file)
                }
                None => emit_csv(&result, &mut std::io::stdout().lock()),
            };
            if let Err(e) = emitted {
                eprintln!("csv write failed: {e}");
                return std::process::ExitCode::FAILURE;
            }
            eprintln!(
                "{} threads={} mops {:.3} +/- {:.3} (99% ci over {} iterations)",
                spec.structure.name(),
                spec.threads,
                result.mean_mops(),
                result.ci99_mops(),
                result.iterations.len(),
            );
            std::process::ExitCode::SUCCESS
        }
        Command::Recover {
            input,
            structure,
            buckets,
        } => {
            let Some(structure) = Structure::parse(&structure) else {
                eprintln!("unknown structure");
                return std::process::ExitCode::from(2);
            };
            let mut file = match std::fs::File::open(&input) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("cannot open {}: {e}", input.display());
                    return std::process::ExitCode::FAILURE;
                }
            };
            let snapshot = match PersistentSnapshot::load(&mut file) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("snapshot load failed: {e}");
                    return std::process::ExitCode::FAILURE;
                }
            };
            let domain = match Domain::recover(&snapshot, DomainConfig::default(), 1) {
                Ok(d) => d,
                Err(e) => {
                    eprintln!("allocator recovery failed: {e}");
                    return std::process::ExitCode::FAILURE;
                }
            };
            let handle = domain.register_thread(0);
            let keys: Result<Vec<i64>, _> = match structure {
                Structure::LfList => LfList::recover(&handle)
                    .map(|l| l.debug_scan().iter().map(|(k, ..)| *k).collect()),
                Structure::SoftList => SoftList::recover(&handle)
                    .map(|l| l.debug_scan().iter().map(|(k, ..)| *k).collect()),
                Structure::LfHash => {
                    HashSet::recover(&handle, Variant::LinkFree, buckets).map(|s| s.debug_keys())
                }
                Structure::SoftHash => {
                    HashSet::recover(&handle, Variant::Soft, buckets).map(|s| s.debug_keys())
                }
            };
            match keys {
                Ok(keys) => {
                    for k in keys {
                        println!("{k}");
                    }
                    std::process::ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("recovery failed: {e}");
                    std::process::ExitCode::FAILURE
                }
            }
        }
    }
}
