//! Validation of the checker itself: cross-checks against a brute-force
//! permutation oracle, crash-point sweeps with hand-derived legal outcomes,
//! and classifier/witness consistency.

use std::collections::BTreeSet;

use durable_sets_checker::history::OpRecord;
use durable_sets_checker::scenario::{self, ScriptOp, Structure};
use durable_sets_checker::{
    check_durable, check_durable_forced, check_linearizable, classify_surviving, generate,
    generate_crash_free, run_scenario, OpKind, SurvivalLabel, Verdict, DEFAULT_BUDGET,
};

/// Independent oracle: enumerate every permutation of the operations that
/// respects real-time precedence and replay each against a BTreeSet. No
/// memoization, no pruning beyond precedence — deliberately naive.
fn permutation_oracle(ops: &[OpRecord]) -> bool {
    fn rec(
        ops: &[OpRecord],
        used: &mut Vec<bool>,
        state: &mut BTreeSet<i64>,
        placed: usize,
    ) -> bool {
        if placed == ops.len() {
            return true;
        }
        for i in 0..ops.len() {
            if used[i] {
                continue;
            }
            // Precedence: cannot place i while an unplaced j ended before i
            // was invoked.
            let blocked = (0..ops.len()).any(|j| !used[j] && j != i && ops[j].end < ops[i].invoke);
            if blocked {
                continue;
            }
            let op = &ops[i];
            let (result, undo) = match op.op {
                OpKind::Contains => (state.contains(&op.key), None),
                OpKind::Insert => {
                    let r = state.insert(op.key);
                    (r, r.then_some((op.key, true)))
                }
                OpKind::Remove => {
                    let r = state.remove(&op.key);
                    (r, r.then_some((op.key, false)))
                }
            };
            let ok = result == op.result.unwrap();
            if ok {
                used[i] = true;
                if rec(ops, used, state, placed + 1) {
                    return true;
                }
                used[i] = false;
            }
            if let Some((key, inserted)) = undo {
                if inserted {
                    state.remove(&key);
                } else {
                    state.insert(key);
                }
            }
        }
        false
    }
    let mut used = vec![false; ops.len()];
    rec(ops, &mut used, &mut BTreeSet::new(), 0)
}

#[test]
fn checker_matches_permutation_oracle_on_generated_histories() {
    // Two-thread histories of at most 8 operations, both variants.
    let mut checked = 0;
    for seed in 0..500u64 {
        for structure in [Structure::LfList, Structure::SoftList] {
            let scenario = generate_crash_free(seed, structure, 8);
            let outcome = run_scenario(&scenario).unwrap();
            let ops = outcome.history.extract_ops(64).unwrap();
            assert!(ops.iter().all(|o| !o.pending()));
            let verdict = check_linearizable(&outcome.history, DEFAULT_BUDGET).unwrap();
            let oracle = permutation_oracle(&ops);
            assert_eq!(
                verdict.is_linearizable(),
                oracle,
                "seed {seed} {structure}: checker and oracle disagree\n{}",
                outcome.history
            );
            assert!(
                oracle,
                "seed {seed} {structure}: library produced a non-linearizable history"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 1000);
}

#[test]
fn checker_rejects_corrupted_histories() {
    // Flip one response in an otherwise valid history; the oracle and the
    // checker must still agree (usually both reject).
    let mut rejected = 0;
    for seed in 0..200u64 {
        let scenario = generate_crash_free(seed, Structure::SoftList, 6);
        let outcome = run_scenario(&scenario).unwrap();
        let mut history = outcome.history.clone();
        let flip = history.events.iter_mut().find_map(|e| match &mut e.kind {
            durable_sets_checker::EventKind::Respond { result } => Some(result),
            _ => None,
        });
        let Some(result) = flip else { continue };
        *result = !*result;
        let ops = history.extract_ops(64).unwrap();
        let verdict = check_linearizable(&history, DEFAULT_BUDGET).unwrap();
        assert_eq!(
            verdict.is_linearizable(),
            permutation_oracle(&ops),
            "seed {seed}"
        );
        if !verdict.is_linearizable() {
            rejected += 1;
        }
    }
    assert!(rejected > 50, "mutation testing never produced a violation");
}

#[test]
fn crash_sweep_of_two_sequential_inserts_visits_exactly_the_legal_sets() {
    // One thread: insert(1); insert(2). Program order and the psync at the
    // end of each insert make {2} without {1} impossible; sweeping the
    // crash point must visit {}, {1} and {1,2} and nothing else.
    for structure in [Structure::LfList, Structure::SoftList] {
        let mut seen = BTreeSet::new();
        for crash_step in 0..60u64 {
            let scenario = scenario::Scenario {
                seed: 11,
                structure,
                eviction: durable_sets::pmem::EvictionPolicy::None,
                crash_step: Some(crash_step),
                crash_at_quiescence: false,
                key_range: 2,
                buckets: 1,
                recover_buckets: 1,
                scripts: vec![vec![
                    ScriptOp {
                        op: OpKind::Insert,
                        key: 1,
                        value: 10,
                    },
                    ScriptOp {
                        op: OpKind::Insert,
                        key: 2,
                        value: 20,
                    },
                ]],
            };
            let outcome = run_scenario(&scenario).unwrap();
            let recovered = outcome.recovered.unwrap();
            assert!(
                !(recovered.contains(&2) && !recovered.contains(&1)),
                "{structure} step {crash_step}: recovered 2 without 1"
            );
            let verdict = check_durable(&outcome.history, DEFAULT_BUDGET).unwrap();
            assert!(
                verdict.is_linearizable(),
                "{structure} step {crash_step} not durable linearizable:\n{}",
                outcome.history
            );
            seen.insert(recovered.into_iter().collect::<Vec<_>>());
        }
        let want: BTreeSet<Vec<i64>> = [vec![], vec![1], vec![1, 2]].into_iter().collect();
        assert_eq!(
            seen, want,
            "{structure}: crash sweep missed a legal recovered set"
        );
    }
}

#[test]
fn adversarial_sweep_stays_durable_linearizable() {
    for structure in [Structure::LfList, Structure::SoftList] {
        for crash_step in 0..40u64 {
            let scenario = scenario::Scenario {
                seed: crash_step ^ 0xabc,
                structure,
                eviction: durable_sets::pmem::EvictionPolicy::AdversarialAtCrash,
                crash_step: Some(crash_step),
                crash_at_quiescence: false,
                key_range: 3,
                buckets: 1,
                recover_buckets: 1,
                scripts: vec![
                    vec![
                        ScriptOp {
                            op: OpKind::Insert,
                            key: 1,
                            value: 10,
                        },
                        ScriptOp {
                            op: OpKind::Remove,
                            key: 1,
                            value: 0,
                        },
                    ],
                    vec![
                        ScriptOp {
                            op: OpKind::Insert,
                            key: 2,
                            value: 20,
                        },
                        ScriptOp {
                            op: OpKind::Contains,
                            key: 1,
                            value: 0,
                        },
                    ],
                ],
            };
            let outcome = run_scenario(&scenario).unwrap();
            let verdict = check_durable(&outcome.history, DEFAULT_BUDGET).unwrap();
            assert!(
                verdict.is_linearizable(),
                "{structure} step {crash_step}:\n{}",
                outcome.history
            );
        }
    }
}

#[test]
fn classifier_labels_are_consistent_with_a_forced_witness() {
    // On 1,000 random crash scenarios (500 per variant), forcing exactly
    // the classifier's surviving pending operations into the linearization
    // must still succeed.
    for structure in [Structure::LfList, Structure::SoftList] {
        for seed in 0..500u64 {
            let scenario = generate(seed, structure);
            let outcome = run_scenario(&scenario).unwrap();
            let Some(snapshot) = &outcome.snapshot else {
                continue;
            };
            let labels = classify_surviving(&outcome.history, &outcome.milestones, snapshot);
            let ops = outcome.history.extract_ops(64).unwrap();
            let survivors: Vec<usize> = ops
                .iter()
                .filter(|o| o.pending() && labels[o.id] == SurvivalLabel::Survived)
                .map(|o| o.id)
                .collect();
            // Sanity: completed ops are labeled survived, pending lookups
            // not-applicable.
            for op in &ops {
                if !op.pending() {
                    assert_eq!(labels[op.id], SurvivalLabel::Survived);
                } else if op.op == OpKind::Contains {
                    assert_eq!(labels[op.id], SurvivalLabel::NotApplicable);
                }
            }
            let verdict =
                check_durable_forced(&outcome.history, &survivors, DEFAULT_BUDGET).unwrap();
            assert!(
                verdict.is_linearizable(),
                "{structure} seed {seed}: classifier labels {labels:?} do not replay\n{}",
                outcome.history
            );
        }
    }
}

#[test]
fn snapshot_roundtrip_recovers_the_same_keys() {
    for structure in [
        Structure::LfList,
        Structure::SoftList,
        Structure::LfHash,
        Structure::SoftHash,
    ] {
        for seed in 0..25u64 {
            let scenario = generate(seed ^ 0x51a, structure);
            let outcome = run_scenario(&scenario).unwrap();
            let snapshot = outcome.snapshot.unwrap();
            let mut bytes = Vec::new();
            snapshot.dump(&mut bytes).unwrap();
            let reloaded =
                durable_sets::pmem::PersistentSnapshot::load(&mut bytes.as_slice()).unwrap();
            assert_eq!(reloaded, snapshot);
            let (_d, h, set) = scenario::recover_set(&reloaded, &scenario).unwrap();
            let mut keys = BTreeSet::new();
            for k in 1..=scenario.key_range {
                if set.contains(&h, k) {
                    keys.insert(k);
                }
            }
            assert_eq!(Some(keys), outcome.recovered, "{structure} seed {seed}");
        }
    }
}

#[test]
fn inconclusive_never_false_verdict() {
    // With a tiny budget the checker may give up but must say so.
    let scenario = generate_crash_free(3, Structure::SoftList, 8);
    let outcome = run_scenario(&scenario).unwrap();
    match check_linearizable(&outcome.history, 2).unwrap() {
        Verdict::Inconclusive { .. } | Verdict::Linearizable { .. } => {}
        Verdict::NotLinearizable { .. } => {
            panic!("budget exhaustion must not produce a negative verdict")
        }
    }
}
