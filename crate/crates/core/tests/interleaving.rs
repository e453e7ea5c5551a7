//! Seed-swept two-thread races driven by the cooperative scheduler: the
//! same-key insert/insert, remove/remove and trim races must produce exactly
//! one winner under every interleaving, with the loser's resources recycled.

use std::sync::Arc;

use durable_sets::alloc::SlotClass;
use durable_sets::domain::{Domain, DomainConfig, ThreadHandle};
use durable_sets::hashmap::{HashSet, Variant};
use durable_sets::linkfree::LfList;
use durable_sets::sched::Scheduler;
use durable_sets::soft::SoftList;

fn run_threads<S: Send + Sync + 'static>(
    seed: u64,
    threads: usize,
    set: Arc<S>,
    domain: Arc<Domain>,
    op: fn(usize, &ThreadHandle, &S) -> bool,
) -> Vec<bool> {
    let sched = Scheduler::new(threads, seed, None);
    let mut joins = Vec::new();
    for t in 0..threads {
        let domain = Arc::clone(&domain);
        let set = Arc::clone(&set);
        let sched = Arc::clone(&sched);
        joins.push(std::thread::spawn(move || {
            let handle = domain.register_thread(t);
            sched.register(t);
            let r = op(t, &handle, &set);
            sched.deregister();
            r
        }));
    }
    joins.into_iter().map(|j| j.join().unwrap()).collect()
}

fn lf_setup() -> (Arc<Domain>, Arc<LfList>) {
    let domain = Domain::new(DomainConfig {
        area_slots: 8,
        ..DomainConfig::default()
    })
    .unwrap();
    let list = Arc::new(LfList::new(Arc::clone(&domain)));
    (domain, list)
}

fn soft_setup() -> (Arc<Domain>, Arc<SoftList>) {
    let domain = Domain::new(DomainConfig {
        area_slots: 8,
        ..DomainConfig::default()
    })
    .unwrap();
    let list = Arc::new(SoftList::new(Arc::clone(&domain)));
    (domain, list)
}

#[test]
fn lf_concurrent_insert_same_key_has_one_winner() {
    for seed in 0..150 {
        let (domain, list) = lf_setup();
        let results = run_threads(
            seed,
            2,
            Arc::clone(&list),
            Arc::clone(&domain),
            |t, h, l| l.insert(h, 42, t as i64).unwrap(),
        );
        assert_eq!(results.iter().filter(|r| **r).count(), 1, "seed {seed}");
        let scan = list.debug_scan();
        assert_eq!(scan.len(), 1);
        assert_eq!(scan[0].0, 42);
        assert!(scan[0].3, "surviving node must be valid");
        // The loser's slot went back to a free-list, not leaked.
        let census = domain.allocator().census();
        let live: Vec<_> = census.values().filter(|c| **c == SlotClass::Live).collect();
        let free = census
            .values()
            .filter(|c| **c == SlotClass::FreeListed)
            .count();
        assert_eq!(
            live.len() + free,
            2,
            "seed {seed}: one live node, one recycled slot"
        );
    }
}

#[test]
fn lf_concurrent_remove_same_key_has_one_winner() {
    for seed in 0..150 {
        let (domain, list) = lf_setup();
        let h0 = domain.register_thread(0);
        list.insert(&h0, 7, 70).unwrap();
        let results = run_threads(
            seed,
            2,
            Arc::clone(&list),
            Arc::clone(&domain),
            |_, h, l| l.remove(h, 7),
        );
        assert_eq!(results.iter().filter(|r| **r).count(), 1, "seed {seed}");
        assert!(
            list.debug_scan().is_empty(),
            "seed {seed}: node must be unlinked"
        );
        assert!(!list.contains(&h0, 7));
    }
}

#[test]
fn lf_insert_remove_race_is_always_a_legal_outcome() {
    // insert(k) racing remove(k) on a present key k': both keys distinct;
    // whatever interleaving happens, the final state must be sorted, unique
    // and marked-implies-valid.
    for seed in 0..100 {
        let (domain, list) = lf_setup();
        let h0 = domain.register_thread(0);
        list.insert(&h0, 5, 50).unwrap();
        let _ = run_threads(
            seed,
            2,
            Arc::clone(&list),
            Arc::clone(&domain),
            |t, h, l| {
                if t == 0 {
                    l.insert(h, 3, 30).unwrap()
                } else {
                    l.remove(h, 5)
                }
            },
        );
        // A marked node may legally remain linked when trim lost its CAS;
        // the logical set is the unmarked keys.
        let scan = list.debug_scan();
        let keys: Vec<i64> = scan
            .iter()
            .filter(|(.., m, _)| !m)
            .map(|(k, ..)| *k)
            .collect();
        assert_eq!(keys, vec![3], "seed {seed}");
        assert!(!list.contains(&h0, 5), "seed {seed}");
        for (_, _, marked, valid) in scan {
            assert!(!marked || valid);
        }
    }
}

#[test]
fn soft_concurrent_insert_same_key_has_one_winner() {
    for seed in 0..150 {
        let (domain, list) = soft_setup();
        let results = run_threads(
            seed,
            2,
            Arc::clone(&list),
            Arc::clone(&domain),
            |t, h, l| l.insert(h, 42, t as i64).unwrap(),
        );
        assert_eq!(results.iter().filter(|r| **r).count(), 1, "seed {seed}");
        let scan = list.debug_scan();
        assert_eq!(scan.len(), 1, "seed {seed}");
        assert_eq!(scan[0].2, durable_sets::soft::ST_INSERTED);
        // Each thread stayed within its one-psync budget.
        for t in 0..2 {
            let (_, _, max, _) = domain
                .thread_stats(t)
                .op_totals(durable_sets::OpTag::Insert);
            assert!(max <= 1, "seed {seed}: thread {t} exceeded psync budget");
        }
    }
}

#[test]
fn soft_concurrent_remove_same_key_has_one_winner() {
    for seed in 0..150 {
        let (domain, list) = soft_setup();
        let h0 = domain.register_thread(0);
        list.insert(&h0, 7, 70).unwrap();
        let results = run_threads(
            seed,
            3,
            Arc::clone(&list),
            Arc::clone(&domain),
            |_, h, l| l.remove(h, 7),
        );
        assert_eq!(results.iter().filter(|r| **r).count(), 1, "seed {seed}");
        assert!(!list.contains(&h0, 7), "seed {seed}");
        for t in 0..3 {
            let (_, _, max, _) = domain
                .thread_stats(t)
                .op_totals(durable_sets::OpTag::Remove);
            assert!(max <= 1, "seed {seed}: thread {t} exceeded psync budget");
        }
    }
}

#[test]
fn soft_contains_never_flushes_under_races() {
    for seed in 0..60 {
        let (domain, list) = soft_setup();
        let h0 = domain.register_thread(0);
        list.insert(&h0, 5, 50).unwrap();
        let _ = run_threads(
            seed,
            3,
            Arc::clone(&list),
            Arc::clone(&domain),
            |t, h, l| match t {
                0 => l.insert(h, 6, 60).unwrap(),
                1 => l.remove(h, 5),
                _ => {
                    for k in 1..8 {
                        l.contains(h, k);
                    }
                    true
                }
            },
        );
        let (cops, cpsyncs, _, cfences) = domain
            .thread_stats(2)
            .op_totals(durable_sets::OpTag::Contains);
        assert_eq!(cops, 7, "seed {seed}");
        assert_eq!((cpsyncs, cfences), (0, 0), "seed {seed}");
    }
}

#[test]
fn hash_bucket_races_behave_like_lists() {
    for seed in 0..40 {
        let domain = Domain::new(DomainConfig {
            area_slots: 8,
            ..DomainConfig::default()
        })
        .unwrap();
        let set = Arc::new(HashSet::new(Arc::clone(&domain), Variant::Soft, 2));
        let results = run_threads(seed, 2, Arc::clone(&set), Arc::clone(&domain), |t, h, s| {
            s.insert(h, 11, t as i64).unwrap()
        });
        assert_eq!(results.iter().filter(|r| **r).count(), 1, "seed {seed}");
        assert_eq!(set.debug_keys(), vec![11]);
    }
}
