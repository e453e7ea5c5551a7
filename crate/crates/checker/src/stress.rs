//! Native multi-threaded stress harness with quiescent invariant sweeps.
//!
//! Workers hammer one structure with a seeded uniform workload. Every
//! `sweep_every` per-thread operations all workers meet at a barrier and one
//! of them checks the structure-level invariants: strictly sorted unique
//! traversals ending at the tail sentinel, marked-implies-valid (link-free),
//! quiescent states and durable-before-visible ordering (SOFT), and per-op
//! psync budgets. The run can end with a forced crash, recovery, and an
//! allocator leak census.

use std::collections::HashSet as StdHashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use durable_sets::domain::{Domain, DomainConfig, ThreadHandle};
use durable_sets::hashmap::{HashSet, Variant};
use durable_sets::linkfree::LfList;
use durable_sets::pmem::{EvictionPolicy, HeapConfig};
use durable_sets::soft::{SoftList, ST_DELETED, ST_INSERTED};
use durable_sets::{soft, DurableSet};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::Structure;

#[derive(Debug, Clone)]
pub struct StressConfig {
    pub structure: Structure,
    pub threads: usize,
    pub key_range: i64,
    /// Percentage of lookups; updates split evenly between inserts and
    /// removes.
    pub read_pct: u32,
    pub seed: u64,
    /// Wall-clock runs stop after this long; op-count runs after each
    /// thread has executed its share of `total_ops`.
    pub duration: Option<Duration>,
    pub total_ops: Option<u64>,
    /// Per-thread operations between quiescent sweeps.
    pub sweep_every: u64,
    /// Assert per-operation psync budgets while running (exact SOFT rule:
    /// lookups 0, updates at most 1).
    pub assert_soft_budget: bool,
    pub buckets: usize,
    pub area_slots: usize,
}

#[derive(Debug)]
pub struct StressReport {
    pub elapsed: Duration,
    pub per_thread_ops: Vec<u64>,
    pub sweeps: u64,
    pub violations: Vec<String>,
    /// Keys recovered by the forced end-of-run crash, when requested.
    pub recovered_keys: Option<Vec<i64>>,
}

impl StressReport {
    pub fn total_ops(&self) -> u64 {
        self.per_thread_ops.iter().sum()
    }
}

enum Target {
    Lf(LfList),
    Soft(SoftList),
    Hash(HashSet),
}

impl Target {
    fn as_set(&self) -> &(dyn DurableSet + Send + Sync) {
        match self {
            Target::Lf(l) => l,
            Target::Soft(l) => l,
            Target::Hash(h) => h,
        }
    }
}

fn sweep(target: &Target, domain: &Arc<Domain>, violations: &Mutex<Vec<String>>) {
    let push = |msg: String| violations.lock().push(msg);
    match target {
        Target::Lf(list) => {
            let scan = list.debug_scan();
            let mut prev = i64::MIN;
            for (key, _, marked, valid) in &scan {
                if *key <= prev {
                    push(format!("lf traversal not strictly sorted at key {key}"));
                }
                prev = *key;
                if *marked && !*valid {
                    push(format!("lf node {key} is marked but invalid"));
                }
            }
        }
        Target::Soft(list) => {
            let heap = domain.heap();
            let scan = list.debug_scan();
            let mut prev = i64::MIN;
            for (key, _, state, pslot) in &scan {
                if *key <= prev {
                    push(format!("soft traversal not strictly sorted at key {key}"));
                }
                prev = *key;
                if *state != ST_INSERTED && *state != ST_DELETED {
                    push(format!(
                        "soft node {key} in transient state {state} at quiescence"
                    ));
                }
                let slot = pslot.expect("non-sentinel node has a persistent twin");
                let vs = heap.persistent_word(slot, soft::W_VALID_START);
                let ve = heap.persistent_word(slot, soft::W_VALID_END);
                let del = heap.persistent_word(slot, soft::W_DELETED);
                if *state == ST_INSERTED {
                    // Visible implies durable: created and not removed.
                    if !(vs == ve && del != vs) {
                        push(format!("soft INSERTED node {key} not durably created"));
                    } else if heap.persistent_word(slot, soft::W_KEY) as i64 != *key {
                        push(format!("soft INSERTED node {key} has stale persistent key"));
                    }
                } else if !(vs == ve && del == vs) {
                    push(format!("soft DELETED node {key} not durably destroyed"));
                }
            }
        }
        Target::Hash(set) => {
            for (b, bucket) in set.debug_bucket_keys().iter().enumerate() {
                let mut prev = i64::MIN;
                for key in bucket {
                    if *key <= prev {
                        push(format!("hash bucket {b} not strictly sorted at key {key}"));
                    }
                    prev = *key;
                }
            }
        }
    }
}

/// Runs the stress workload and returns per-thread counts plus any
/// invariant violations; panics never cross thread boundaries.
pub fn run_stress(config: &StressConfig) -> StressReport {
    let domain = Domain::new(DomainConfig {
        heap: HeapConfig {
            eviction: EvictionPolicy::None,
            rng_seed: config.seed,
            ..HeapConfig::default()
        },
        area_slots: config.area_slots,
        area_budget: 1 << 14,
    })
    .unwrap();
    let target = Arc::new(match config.structure {
        Structure::LfList => Target::Lf(LfList::new(Arc::clone(&domain))),
        Structure::SoftList => Target::Soft(SoftList::new(Arc::clone(&domain))),
        Structure::LfHash => Target::Hash(HashSet::new(
            Arc::clone(&domain),
            Variant::LinkFree,
            config.buckets,
        )),
        Structure::SoftHash => Target::Hash(HashSet::new(
            Arc::clone(&domain),
            Variant::Soft,
            config.buckets,
        )),
    });
    let violations = Arc::new(Mutex::new(Vec::new()));
    let stop = Arc::new(AtomicBool::new(false));
    let sweeps = Arc::new(AtomicU64::new(0));
    let barrier = Arc::new(Barrier::new(config.threads));
    let started = Instant::now();

    let per_thread_ops: Vec<u64> = std::thread::scope(|scope| {
        let mut joins = Vec::new();
        for t in 0..config.threads {
            let domain = Arc::clone(&domain);
            let target = Arc::clone(&target);
            let violations = Arc::clone(&violations);
            let stop = Arc::clone(&stop);
            let sweeps = Arc::clone(&sweeps);
            let barrier = Arc::clone(&barrier);
            joins.push(scope.spawn(move || {
                let handle: ThreadHandle = domain.register_thread(t);
                let set = target.as_set();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(t as u64 * 0x9e37));
                let mut ops = 0u64;
                let per_thread_budget = config.total_ops.map(|n| n / config.threads as u64);
                'outer: loop {
                    for _ in 0..config.sweep_every {
                        if let Some(budget) = per_thread_budget {
                            if ops >= budget {
                                break;
                            }
                        }
                        let key = rng.gen_range(1..=config.key_range);
                        let stats = handle.stats();
                        let before = stats.algo_psync_count();
                        let is_read = rng.gen_range(0..100) < config.read_pct;
                        if is_read {
                            set.contains(&handle, key);
                            if config.assert_soft_budget {
                                let delta = stats.algo_psync_count() - before;
                                if delta != 0 {
                                    violations
                                        .lock()
                                        .push(format!("contains issued {delta} psyncs"));
                                }
                            }
                        } else {
                            if rng.gen::<bool>() {
                                set.insert(&handle, key, key).unwrap();
                            } else {
                                set.remove(&handle, key);
                            }
                            if config.assert_soft_budget {
                                let delta = stats.algo_psync_count() - before;
                                if delta > 1 {
                                    violations
                                        .lock()
                                        .push(format!("update issued {delta} psyncs"));
                                }
                            }
                        }
                        ops += 1;
                    }
                    // Quiescent sweep: everyone parks, thread 0 checks.
                    barrier.wait();
                    if t == 0 {
                        sweeps.fetch_add(1, Ordering::Relaxed);
                        sweep(&target, &domain, &violations);
                        let time_up = config.duration.is_some_and(|d| started.elapsed() >= d);
                        let ops_done = per_thread_budget.is_some_and(|b| ops >= b);
                        if time_up || ops_done {
                            stop.store(true, Ordering::SeqCst);
                        }
                    }
                    barrier.wait();
                    if stop.load(Ordering::SeqCst) {
                        break 'outer;
                    }
                }
                ops
            }));
        }
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    });

    // Per-op-tag budget cross-check from the merged counters.
    for t in 0..config.threads {
        let stats = domain.thread_stats(t);
        let (_, _, cmax, _) = stats.op_totals(durable_sets::OpTag::Contains);
        if config.assert_soft_budget && cmax > 0 {
            violations
                .lock()
                .push(format!("thread {t}: contains max psyncs {cmax}"));
        }
        for tag in [durable_sets::OpTag::Insert, durable_sets::OpTag::Remove] {
            let (_, _, max, _) = stats.op_totals(tag);
            if config.assert_soft_budget && max > 1 {
                violations
                    .lock()
                    .push(format!("thread {t}: update max psyncs {max}"));
            }
        }
    }

    // Forced crash + recovery + leak census.
    let recovered_keys = {
        let snapshot = domain.heap().crash();
        let domain2 = Domain::recover(
            &snapshot,
            DomainConfig {
                area_slots: config.area_slots,
                ..DomainConfig::default()
            },
            1,
        )
        .unwrap();
        let h2 = domain2.register_thread(0);
        let (keys, live_slots): (Vec<i64>, Vec<durable_sets::SlotRef>) = match config.structure {
            Structure::LfList => {
                let l = LfList::recover(&h2).unwrap();
                (
                    l.debug_scan().iter().map(|(k, ..)| *k).collect(),
                    l.debug_slots(),
                )
            }
            Structure::SoftList => {
                let l = SoftList::recover(&h2).unwrap();
                (
                    l.debug_scan().iter().map(|(k, ..)| *k).collect(),
                    l.debug_slots(),
                )
            }
            Structure::LfHash => {
                let s = HashSet::recover(&h2, Variant::LinkFree, config.buckets).unwrap();
                (s.debug_keys(), s.debug_slots())
            }
            Structure::SoftHash => {
                let s = HashSet::recover(&h2, Variant::Soft, config.buckets).unwrap();
                (s.debug_keys(), s.debug_slots())
            }
        };
        let census = domain2.allocator().census();
        let live_set: StdHashSet<_> = live_slots.iter().copied().collect();
        for (slot, class) in &census {
            let is_live = *class == durable_sets::alloc::SlotClass::Live;
            if is_live != live_set.contains(slot) {
                violations
                    .lock()
                    .push(format!("leak census mismatch at {slot:?}: {class:?}"));
            }
        }
        Some(keys)
    };

    StressReport {
        elapsed: started.elapsed(),
        per_thread_ops,
        sweeps: sweeps.load(Ordering::Relaxed),
        violations: Arc::try_unwrap(violations).unwrap().into_inner(),
        recovered_keys,
    }
}
