//! Workload execution: per-iteration prefill, a timed or op-counted run of
//! uniform random operations, and counter harvesting.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use durable_sets::domain::{Domain, DomainConfig};
use durable_sets::hashmap::{HashSet, Variant};
use durable_sets::linkfree::LfList;
use durable_sets::pmem::HeapConfig;
use durable_sets::soft::SoftList;
use durable_sets::{DurableSet, OpTag};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    LfList,
    SoftList,
    LfHash,
    SoftHash,
}

impl Structure {
    pub fn parse(s: &str) -> Option<Structure> {
        match s {
            "lf-list" => Some(Structure::LfList),
            "soft-list" => Some(Structure::SoftList),
            "lf-hash" => Some(Structure::LfHash),
            "soft-hash" => Some(Structure::SoftHash),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Structure::LfList => "lf-list",
            Structure::SoftList => "soft-list",
            Structure::LfHash => "lf-hash",
            Structure::SoftHash => "soft-hash",
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub structure: Structure,
    pub threads: usize,
    pub duration: Duration,
    /// When set, each thread runs exactly this many operations instead of
    /// running for `duration`; op streams are then fully deterministic.
    pub ops_per_thread: Option<u64>,
    pub key_range: i64,
    pub read_pct: u32,
    pub seed: u64,
    pub iterations: u32,
}

/// Per-op-kind totals harvested from one iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct KindTotals {
    pub ops: u64,
    pub psyncs: u64,
    pub max_psyncs: u64,
}

impl KindTotals {
    pub fn avg_psyncs(&self) -> f64 {
        if self.ops == 0 {
            0.0
        } else {
            self.psyncs as f64 / self.ops as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationResult {
    pub iteration: u32,
    pub elapsed: Duration,
    pub per_thread_ops: Vec<u64>,
    pub contains: KindTotals,
    pub insert: KindTotals,
    pub remove: KindTotals,
    pub fences: u64,
    pub psyncs: u64,
    pub infra_psyncs: u64,
    /// Successful updates observed by the workers, for budget traces.
    pub update_successes: u64,
}

impl IterationResult {
    pub fn total_ops(&self) -> u64 {
        self.per_thread_ops.iter().sum()
    }

    pub fn mops(&self) -> f64 {
        self.total_ops() as f64 / 1e6 / self.elapsed.as_secs_f64()
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub spec: WorkloadSpec,
    pub iterations: Vec<IterationResult>,
}

impl BenchResult {
    pub fn mean_mops(&self) -> f64 {
        let n = self.iterations.len() as f64;
        self.iterations.iter().map(|i| i.mops()).sum::<f64>() / n
    }

    /// Half-width of the 99% confidence interval over iteration throughput
    /// (Student's t for small samples).
    pub fn ci99_mops(&self) -> f64 {
        let n = self.iterations.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean_mops();
        let var = self
            .iterations
            .iter()
            .map(|i| (i.mops() - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        t99(n - 1) * (var / n as f64).sqrt()
    }
}

/// Two-sided 99% Student-t quantiles by degrees of freedom.
fn t99(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        63.657, 9.925, 5.841, 4.604, 4.032, 3.707, 3.499, 3.355, 3.250, 3.169, 3.106, 3.055, 3.012,
        2.977, 2.947, 2.921, 2.898, 2.878, 2.861, 2.845, 2.831, 2.819, 2.807, 2.797, 2.787, 2.779,
        2.771, 2.763, 2.756, 2.750,
    ];
    if df == 0 {
        return f64::INFINITY;
    }
    if df <= TABLE.len() {
        TABLE[df - 1]
    } else {
        2.576
    }
}

fn make_set(
    domain: &Arc<Domain>,
    structure: Structure,
    buckets: usize,
) -> Arc<dyn DurableSet + Send + Sync> {
    match structure {
        Structure::LfList => Arc::new(LfList::new(Arc::clone(domain))),
        Structure::SoftList => Arc::new(SoftList::new(Arc::clone(domain))),
        Structure::LfHash => Arc::new(HashSet::new(Arc::clone(domain), Variant::LinkFree, buckets)),
        Structure::SoftHash => Arc::new(HashSet::new(Arc::clone(domain), Variant::Soft, buckets)),
    }
}

/// Runs every iteration of the spec: fresh structure, prefill with half the
/// key range (distinct random keys), then the measured run.
pub fn run(spec: &WorkloadSpec) -> BenchResult {
    let mut iterations = Vec::new();
    for iteration in 0..spec.iterations {
        iterations.push(run_iteration(spec, iteration));
    }
    BenchResult {
        spec: spec.clone(),
        iterations,
    }
}

fn run_iteration(spec: &WorkloadSpec, iteration: u32) -> IterationResult {
    // Hash tables sized for load factor 1.
    let buckets = spec.key_range.max(1) as usize;
    let domain = Domain::new(DomainConfig {
        heap: HeapConfig {
            rng_seed: spec.seed,
            ..HeapConfig::default()
        },
        area_slots: 1024,
        area_budget: 1 << 14,
    })
    .unwrap();
    let set = make_set(&domain, spec.structure, buckets);

    // Prefill: half of the key range, distinct keys in seeded random order.
    let prefill_handle = domain.register_thread(0);
    let mut prefill_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ iteration as u64);
    let mut keys: Vec<i64> = (1..=spec.key_range).collect();
    keys.shuffle(&mut prefill_rng);
    keys.truncate(spec.key_range as usize / 2);
    for key in keys {
        set.insert(&prefill_handle, key, key).unwrap();
    }

    // Measurement baseline after prefill.
    let baseline: Vec<_> = (0..spec.threads)
        .map(|t| snapshot_stats(&domain, t))
        .collect();

    let stop = Arc::new(AtomicBool::new(false));
    let started = Instant::now();
    let outcomes: Vec<(u64, u64)> = std::thread::scope(|scope| {
        let mut joins = Vec::new();
        for t in 0..spec.threads {
            let domain = Arc::clone(&domain);
            let set = Arc::clone(&set);
            let stop = Arc::clone(&stop);
            joins.push(scope.spawn(move || {
                let handle = domain.register_thread(t);
                let mut rng =
                    ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37 * (t as u64 + 1)));
                let mut ops = 0u64;
                let mut successes = 0u64;
                loop {
                    match spec.ops_per_thread {
                        Some(budget) => {
                            if ops >= budget {
                                break;
                            }
                        }
                        None => {
                            if ops % 256 == 0 && stop.load(Ordering::Relaxed) {
                                break;
                            }
                        }
                    }
                    let key = rng.gen_range(1..=spec.key_range);
                    if rng.gen_range(0..100) < spec.read_pct {
                        set.contains(&handle, key);
                    } else if rng.gen::<bool>() {
                        successes += set.insert(&handle, key, key).unwrap() as u64;
                    } else {
                        successes += set.remove(&handle, key) as u64;
                    }
                    ops += 1;
                }
                (ops, successes)
            }));
        }
        if spec.ops_per_thread.is_none() {
            scope.spawn(move || {
                std::thread::sleep(spec.duration);
                stop.store(true, Ordering::Relaxed);
            });
        }
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    });
    let elapsed = started.elapsed();

    let mut result = IterationResult {
        iteration,
        elapsed,
        per_thread_ops: outcomes.iter().map(|(ops, _)| *ops).collect(),
        contains: KindTotals::default(),
        insert: KindTotals::default(),
        remove: KindTotals::default(),
        fences: 0,
        psyncs: 0,
        infra_psyncs: 0,
        update_successes: outcomes.iter().map(|(_, s)| *s).sum(),
    };
    for t in 0..spec.threads {
        let before = &baseline[t];
        let after = snapshot_stats(&domain, t);
        for (kind, slot) in [
            (OpTag::Contains, &mut result.contains),
            (OpTag::Insert, &mut result.insert),
            (OpTag::Remove, &mut result.remove),
        ] {
            let b = before.kind(kind);
            let a = after.kind(kind);
            slot.ops += a.0 - b.0;
            slot.psyncs += a.1 - b.1;
            slot.max_psyncs = slot.max_psyncs.max(a.2);
        }
        result.fences += after.fences - before.fences;
        result.psyncs += after.psyncs - before.psyncs;
        result.infra_psyncs += after.infra - before.infra;
    }
    result
}

struct StatsSnapshot {
    contains: (u64, u64, u64),
    insert: (u64, u64, u64),
    remove: (u64, u64, u64),
    fences: u64,
    psyncs: u64,
    infra: u64,
}

impl StatsSnapshot {
    fn kind(&self, kind: OpTag) -> (u64, u64, u64) {
        match kind {
            OpTag::Contains => self.contains,
            OpTag::Insert => self.insert,
            OpTag::Remove => self.remove,
            OpTag::Recover => (0, 0, 0),
        }
    }
}

fn snapshot_stats(domain: &Arc<Domain>, thread: usize) -> StatsSnapshot {
    let stats = domain.thread_stats(thread);
    let take = |tag| {
        let (ops, psyncs, max, _) = stats.op_totals(tag);
        (ops, psyncs, max)
    };
    StatsSnapshot {
        contains: take(OpTag::Contains),
        insert: take(OpTag::Insert),
        remove: take(OpTag::Remove),
        fences: stats.fence_count(),
        psyncs: stats.psync_count(),
        infra: stats.infra_psync_count(),
    }
}

/// Stable CSV column order.
pub const CSV_HEADER: &str = "structure,threads,duration_s,range,read_pct,seed,iteration,\
elapsed_s,total_ops,mops,contains_ops,contains_psync_avg,insert_ops,insert_psync_avg,\
remove_ops,remove_psync_avg,update_max_psyncs,fence_count,psync_count,infra_psync_count";

pub fn csv_rows(result: &BenchResult) -> Vec<String> {
    let spec = &result.spec;
    result
        .iterations
        .iter()
        .map(|it| {
            format!(
                "{},{},{},{},{},{},{},{:.6},{},{:.6},{},{:.6},{},{:.6},{},{:.6},{},{},{},{}",
                spec.structure.name(),
                spec.threads,
                spec.duration.as_secs_f64(),
                spec.key_range,
                spec.read_pct,
                spec.seed,
                it.iteration,
                it.elapsed.as_secs_f64(),
                it.total_ops(),
                it.mops(),
                it.contains.ops,
                it.contains.avg_psyncs(),
                it.insert.ops,
                it.insert.avg_psyncs(),
                it.remove.ops,
                it.remove.avg_psyncs(),
                it.insert.max_psyncs.max(it.remove.max_psyncs),
                it.fences,
                it.psyncs,
                it.infra_psyncs,
            )
        })
        .collect()
}

pub fn emit_csv<W: std::io::Write>(result: &BenchResult, sink: &mut W) -> std::io::Result<()> {
    writeln!(sink, "{CSV_HEADER}")?;
    for row in csv_rows(result) {
        writeln!(sink, "{row}")?;
    }
    Ok(())
}
