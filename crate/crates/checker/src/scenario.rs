//! Deterministic crash-injection scenarios.
//!
//! A scenario is a seed, per-thread operation scripts, an eviction policy
//! and an optional crash step. The runner executes the scripts under the
//! cooperative scheduler (one seeded serialized interleaving), crashes the
//! heap at the scripted step, recovers into a fresh domain, probes the full
//! key range through the public API, and returns the recorded history plus
//! the milestone log for the surviving-operation classifier.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use durable_sets::domain::{Domain, DomainConfig, Milestone, ThreadHandle};
use durable_sets::hashmap::{HashSet, Variant};
use durable_sets::linkfree::LfList;
use durable_sets::pmem::{EvictionPolicy, HeapConfig, PersistentSnapshot};
use durable_sets::sched::{CrashSignal, Scheduler};
use durable_sets::soft::SoftList;
use durable_sets::{DurableSet, RecoveryError};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::history::{History, OpKind, Recorder};

/// Thread index reserved for post-recovery probe operations.
pub const PROBE_THREAD: usize = 63;

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

    pub fn is_soft(&self) -> bool {
        matches!(self, Structure::SoftList | Structure::SoftHash)
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Structure::LfList => "lf-list",
            Structure::SoftList => "soft-list",
            Structure::LfHash => "lf-hash",
            Structure::SoftHash => "soft-hash",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptOp {
    pub op: OpKind,
    pub key: i64,
    pub value: i64,
}

/// A reproducible crash scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub structure: Structure,
    pub eviction: EvictionPolicy,
    /// Scheduler step at which to cut every thread off. `None` runs the
    /// scripts to completion and still crashes at quiescence when
    /// `crash_at_quiescence` is set.
    pub crash_step: Option<u64>,
    pub crash_at_quiescence: bool,
    /// Probes cover keys `1..=key_range` after recovery.
    pub key_range: i64,
    pub buckets: usize,
    pub recover_buckets: usize,
    pub scripts: Vec<Vec<ScriptOp>>,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        writeln!(f, "structure {}", self.structure)?;
        match self.eviction {
            EvictionPolicy::None => writeln!(f, "policy none")?,
            EvictionPolicy::RandomRate(p) => writeln!(f, "policy random:{p}")?,
            EvictionPolicy::AdversarialAtCrash => writeln!(f, "policy adversarial")?,
        }
        match self.crash_step {
            Some(s) => writeln!(f, "crash {s}")?,
            None if self.crash_at_quiescence => writeln!(f, "crash quiescence")?,
            None => writeln!(f, "crash none")?,
        }
        writeln!(f, "range {}", self.key_range)?;
        writeln!(f, "buckets {} {}", self.buckets, self.recover_buckets)?;
        for (t, script) in self.scripts.iter().enumerate() {
            for op in script {
                match op.op {
                    OpKind::Insert => writeln!(f, "op {t} insert {} {}", op.key, op.value)?,
                    OpKind::Remove => writeln!(f, "op {t} remove {}", op.key)?,
                    OpKind::Contains => writeln!(f, "op {t} contains {}", op.key)?,
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("scenario parse error at line {line}: {msg}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub msg: String,
}

impl Scenario {
    /// Parses the line-oriented scenario format produced by `Display`.
    pub fn parse(text: &str) -> Result<Scenario, ScenarioParseError> {
        let mut scenario = Scenario {
            seed: 0,
            structure: Structure::LfList,
            eviction: EvictionPolicy::None,
            crash_step: None,
            crash_at_quiescence: false,
            key_range: 6,
            buckets: 2,
            recover_buckets: 2,
            scripts: Vec::new(),
        };
        let err = |line: usize, msg: &str| ScenarioParseError {
            line,
            msg: msg.to_string(),
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let mut next = |msg: &str| parts.next().ok_or_else(|| err(idx + 1, msg));
            match head {
                "seed" => {
                    scenario.seed = next("missing seed")?
                        .parse()
                        .map_err(|_| err(idx + 1, "bad seed"))?
                }
                "structure" => {
                    let s = next("missing structure")?;
                    scenario.structure =
                        Structure::parse(s).ok_or_else(|| err(idx + 1, "unknown structure"))?;
                }
                "policy" => {
                    let p = next("missing policy")?;
                    scenario.eviction = if p == "none" {
                        EvictionPolicy::None
                    } else if p == "adversarial" {
                        EvictionPolicy::AdversarialAtCrash
                    } else if let Some(rate) = p.strip_prefix("random:") {
                        EvictionPolicy::RandomRate(
                            rate.parse()
                                .map_err(|_| err(idx + 1, "bad eviction rate"))?,
                        )
                    } else {
                        return Err(err(idx + 1, "unknown policy"));
                    };
                }
                "crash" => {
                    let c = next("missing crash step")?;
                    match c {
                        "none" => {
                            scenario.crash_step = None;
                            scenario.crash_at_quiescence = false;
                        }
                        "quiescence" => {
                            scenario.crash_step = None;
                            scenario.crash_at_quiescence = true;
                        }
                        _ => {
                            scenario.crash_step =
                                Some(c.parse().map_err(|_| err(idx + 1, "bad crash step"))?)
                        }
                    }
                }
                "range" => {
                    scenario.key_range = next("missing range")?
                        .parse()
                        .map_err(|_| err(idx + 1, "bad range"))?
                }
                "buckets" => {
                    scenario.buckets = next("missing bucket count")?
                        .parse()
                        .map_err(|_| err(idx + 1, "bad buckets"))?;
                    scenario.recover_buckets = next("missing recover bucket count")?
                        .parse()
                        .map_err(|_| err(idx + 1, "bad buckets"))?;
                }
                "op" => {
                    let t: usize = next("missing thread")?
                        .parse()
                        .map_err(|_| err(idx + 1, "bad thread"))?;
                    let kind = next("missing op kind")?;
                    let key: i64 = next("missing key")?
                        .parse()
                        .map_err(|_| err(idx + 1, "bad key"))?;
                    let op = match kind {
                        "insert" => {
                            let value: i64 = next("missing value")?
                                .parse()
                                .map_err(|_| err(idx + 1, "bad value"))?;
                            ScriptOp {
                                op: OpKind::Insert,
                                key,
                                value,
                            }
                        }
                        "remove" => ScriptOp {
                            op: OpKind::Remove,
                            key,
                            value: 0,
                        },
                        "contains" => ScriptOp {
                            op: OpKind::Contains,
                            key,
                            value: 0,
                        },
                        _ => return Err(err(idx + 1, "unknown op kind")),
                    };
                    while scenario.scripts.len() <= t {
                        scenario.scripts.push(Vec::new());
                    }
                    scenario.scripts[t].push(op);
                }
                _ => return Err(err(idx + 1, "unknown directive")),
            }
        }
        Ok(scenario)
    }
}

/// A milestone with its position in the history's sequence order.
#[derive(Debug, Clone, Copy)]
pub struct MilestoneRecord {
    pub seq: u64,
    pub thread: usize,
    pub milestone: Milestone,
}

pub struct ScenarioOutcome {
    pub history: History,
    pub crashed: bool,
    /// Keys the post-recovery probes observed, when a crash happened.
    pub recovered: Option<BTreeSet<i64>>,
    pub milestones: Vec<MilestoneRecord>,
    /// The crash snapshot, for snapshot-portability checks.
    pub snapshot: Option<PersistentSnapshot>,
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

/// Rebuilds the scenario's structure from a crash snapshot on a fresh
/// domain, returning the recovery handle alongside.
pub fn recover_set(
    snapshot: &PersistentSnapshot,
    scenario: &Scenario,
) -> Result<(Arc<Domain>, ThreadHandle, Arc<dyn DurableSet + Send + Sync>), RecoveryError> {
    let domain = Domain::recover(snapshot, domain_config(scenario), 1)?;
    let handle = domain.register_thread(PROBE_THREAD);
    let set: Arc<dyn DurableSet + Send + Sync> = match scenario.structure {
        Structure::LfList => Arc::new(LfList::recover(&handle)?),
        Structure::SoftList => Arc::new(SoftList::recover(&handle)?),
        Structure::LfHash => Arc::new(HashSet::recover(
            &handle,
            Variant::LinkFree,
            scenario.recover_buckets,
        )?),
        Structure::SoftHash => Arc::new(HashSet::recover(
            &handle,
            Variant::Soft,
            scenario.recover_buckets,
        )?),
    };
    Ok((domain, handle, set))
}

fn domain_config(scenario: &Scenario) -> DomainConfig {
    DomainConfig {
        heap: HeapConfig {
            eviction: scenario.eviction,
            rng_seed: scenario.seed ^ 0x9e37_79b9,
            write_log: false,
            ..HeapConfig::default()
        },
        area_slots: 8, // small areas so scenarios cross area boundaries
        area_budget: 1 << 12,
    }
}

/// Silences the intentional worker-abandonment panics.
fn install_quiet_crash_hook() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            if !info.payload().is::<CrashSignal>() {
                prev(info);
            }
        }));
    });
}

/// Runs a scenario end to end: scripts under the deterministic scheduler,
/// the scripted crash, recovery, and probes over the full key range.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioOutcome, RecoveryError> {
    install_quiet_crash_hook();
    let threads = scenario.scripts.len();
    assert!(threads >= 1 && threads < PROBE_THREAD);
    let domain = Domain::new(domain_config(scenario))?;
    let recorder = Arc::new(Recorder::new());
    let milestones: Arc<Mutex<Vec<MilestoneRecord>>> = Arc::new(Mutex::new(Vec::new()));
    {
        let milestones = Arc::clone(&milestones);
        let recorder = Arc::clone(&recorder);
        domain.set_milestone_hook(Arc::new(move |thread, milestone| {
            let seq = recorder.next_seq();
            milestones.lock().push(MilestoneRecord {
                seq,
                thread,
                milestone,
            });
        }));
    }
    let set = make_set(&domain, scenario.structure, scenario.buckets);
    let sched = Scheduler::new(threads, scenario.seed, scenario.crash_step);

    let mut workers = Vec::new();
    for (t, script) in scenario.scripts.iter().enumerate() {
        let domain = Arc::clone(&domain);
        let set = Arc::clone(&set);
        let sched = Arc::clone(&sched);
        let recorder = Arc::clone(&recorder);
        let script = script.clone();
        workers.push(std::thread::spawn(move || {
            let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                let handle = domain.register_thread(t);
                sched.register(t);
                for op in script {
                    match op.op {
                        OpKind::Contains => {
                            recorder.invoke(t, OpKind::Contains, op.key, 0);
                            let r = set.contains(&handle, op.key);
                            recorder.respond(t, r);
                        }
                        OpKind::Insert => {
                            recorder.invoke(t, OpKind::Insert, op.key, op.value);
                            let r = set.insert(&handle, op.key, op.value).expect("allocation");
                            recorder.respond(t, r);
                        }
                        OpKind::Remove => {
                            recorder.invoke(t, OpKind::Remove, op.key, 0);
                            let r = set.remove(&handle, op.key);
                            recorder.respond(t, r);
                        }
                    }
                }
            }));
            sched.deregister();
            if let Err(e) = result {
                if !e.is::<CrashSignal>() {
                    std::panic::resume_unwind(e);
                }
            }
        }));
    }
    for w in workers {
        w.join().expect("worker thread");
    }

    // A scripted crash step beyond the end of the execution still crashes,
    // at quiescence.
    let crashed = scenario.crash_step.is_some() || scenario.crash_at_quiescence;
    if !crashed {
        domain.set_milestone_hook(Arc::new(|_, _| {}));
        let milestones = milestones.lock().clone();
        drop(set);
        drop(domain);
        let recorder = Arc::try_unwrap(recorder)
            .ok()
            .expect("recorder still shared");
        return Ok(ScenarioOutcome {
            history: recorder.finish(),
            crashed: false,
            recovered: None,
            milestones,
            snapshot: None,
        });
    }

    recorder.crash();
    drop(set);
    let snapshot = domain.heap().crash();
    let (_domain2, handle2, recovered_set) = recover_set(&snapshot, scenario)?;
    recorder.recovery_done();
    let mut recovered = BTreeSet::new();
    for key in 1..=scenario.key_range {
        recorder.invoke(PROBE_THREAD, OpKind::Contains, key, 0);
        let r = recovered_set.contains(&handle2, key);
        recorder.respond(PROBE_THREAD, r);
        if r {
            recovered.insert(key);
        }
    }
    drop(recovered_set);
    // The hook holds the recorder; drop it before unwrapping.
    domain.set_milestone_hook(Arc::new(|_, _| {}));
    let milestones = milestones.lock().clone();
    drop(domain);
    let recorder = Arc::try_unwrap(recorder)
        .ok()
        .expect("recorder still shared");
    Ok(ScenarioOutcome {
        history: recorder.finish(),
        crashed: true,
        recovered: Some(recovered),
        milestones,
        snapshot: Some(snapshot),
    })
}

/// Seeded random scenario in the acceptance envelope: 2–4 threads, at most
/// 12 operations, keys within a small range, crash step swept, eviction
/// from {none, adversarial}.
pub fn generate(seed: u64, structure: Structure) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threads = rng.gen_range(2..=4usize);
    let total_ops = rng.gen_range(threads..=12usize);
    let key_range = rng.gen_range(2..=6i64);
    let mut scripts = vec![Vec::new(); threads];
    for i in 0..total_ops {
        let key = rng.gen_range(1..=key_range);
        let op = match rng.gen_range(0..10) {
            0..=3 => ScriptOp {
                op: OpKind::Insert,
                key,
                value: rng.gen_range(0..100),
            },
            4..=6 => ScriptOp {
                op: OpKind::Remove,
                key,
                value: 0,
            },
            _ => ScriptOp {
                op: OpKind::Contains,
                key,
                value: 0,
            },
        };
        scripts[i % threads].push(op);
    }
    let eviction = if rng.gen::<bool>() {
        EvictionPolicy::None
    } else {
        EvictionPolicy::AdversarialAtCrash
    };
    Scenario {
        seed,
        structure,
        eviction,
        crash_step: Some(rng.gen_range(0..80)),
        crash_at_quiescence: false,
        key_range,
        buckets: rng.gen_range(1..=3),
        recover_buckets: rng.gen_range(1..=4),
        scripts,
    }
}

/// Seeded random crash-free concurrent history generator (2 threads, small
/// scripts) for plain linearizability checking.
pub fn generate_crash_free(seed: u64, structure: Structure, max_ops: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let threads = 2usize;
    let total_ops = rng.gen_range(2..=max_ops);
    let key_range = rng.gen_range(2..=4i64);
    let mut scripts = vec![Vec::new(); threads];
    for i in 0..total_ops {
        let key = rng.gen_range(1..=key_range);
        let op = match rng.gen_range(0..10) {
            0..=3 => ScriptOp {
                op: OpKind::Insert,
                key,
                value: rng.gen_range(0..100),
            },
            4..=6 => ScriptOp {
                op: OpKind::Remove,
                key,
                value: 0,
            },
            _ => ScriptOp {
                op: OpKind::Contains,
                key,
                value: 0,
            },
        };
        scripts[i % threads].push(op);
    }
    Scenario {
        seed,
        structure,
        eviction: EvictionPolicy::None,
        crash_step: None,
        crash_at_quiescence: false,
        key_range,
        buckets: rng.gen_range(1..=3),
        recover_buckets: 2,
        scripts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_text_roundtrip() {
        let s = generate(7, Structure::SoftHash);
        let text = s.to_string();
        let parsed = Scenario::parse(&text).unwrap();
        assert_eq!(parsed, s);
    }

    #[test]
    fn crash_at_step_zero_recovers_empty() {
        let scenario = Scenario {
            seed: 3,
            structure: Structure::LfList,
            eviction: EvictionPolicy::None,
            crash_step: Some(0),
            crash_at_quiescence: false,
            key_range: 4,
            buckets: 1,
            recover_buckets: 1,
            scripts: vec![vec![ScriptOp {
                op: OpKind::Insert,
                key: 1,
                value: 1,
            }]],
        };
        let outcome = run_scenario(&scenario).unwrap();
        assert!(outcome.crashed);
        assert!(outcome.recovered.unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_outcome() {
        for structure in [Structure::LfList, Structure::SoftList] {
            let scenario = generate(42, structure);
            let a = run_scenario(&scenario).unwrap();
            let b = run_scenario(&scenario).unwrap();
            assert_eq!(a.history.to_string(), b.history.to_string());
            assert_eq!(a.recovered, b.recovered);
            assert_eq!(a.snapshot, b.snapshot);
        }
    }

    #[test]
    fn quiescent_crash_recovers_the_final_set() {
        let scenario = Scenario {
            seed: 5,
            structure: Structure::SoftList,
            eviction: EvictionPolicy::AdversarialAtCrash,
            crash_step: None,
            crash_at_quiescence: true,
            key_range: 5,
            buckets: 1,
            recover_buckets: 1,
            scripts: vec![vec![
                ScriptOp {
                    op: OpKind::Insert,
                    key: 1,
                    value: 1,
                },
                ScriptOp {
                    op: OpKind::Insert,
                    key: 2,
                    value: 2,
                },
                ScriptOp {
                    op: OpKind::Remove,
                    key: 1,
                    value: 0,
                },
            ]],
        };
        let outcome = run_scenario(&scenario).unwrap();
        let recovered = outcome.recovered.unwrap();
        assert_eq!(recovered.into_iter().collect::<Vec<_>>(), vec![2]);
    }
}
