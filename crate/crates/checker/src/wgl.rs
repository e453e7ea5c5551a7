//! Brute-force durable-linearizability checking.
//!
//! The search looks for a total order of operations that (1) respects
//! real-time precedence — an operation whose response precedes another's
//! invocation must come first — and (2) replays legally through the
//! sequential set specification with every recorded result matching.
//! Operations pending at a crash may be assigned a response (any result the
//! sequential replay yields) or left out entirely; completed operations must
//! all appear. Post-recovery probe operations are ordinary operations, so an
//! observed recovered set constrains which pending subset can work.
//!
//! Depth-first with memoized (linearized-set, spec-state) pruning, after
//! Wing & Gong. A verdict of linearizable always carries a witness that has
//! been replayed once more before being returned.

use std::collections::HashSet;

use crate::history::{History, HistoryError, OpKind, OpRecord};

pub const DEFAULT_BUDGET: u64 = 10_000_000;
const MAX_OPS: usize = 64;

#[derive(Debug, Clone)]
pub enum Verdict {
    /// A witness order exists: (operation id, result) in linearization
    /// order, already re-replayed against the sequential specification.
    Linearizable { witness: Vec<(usize, bool)> },
    /// No witness. `stuck_prefix` is the longest prefix the search
    /// linearized; `window` holds the operations that could not be placed.
    NotLinearizable {
        stuck_prefix: Vec<(usize, bool)>,
        window: Vec<usize>,
    },
    /// State budget exhausted before a verdict; never a false answer.
    Inconclusive { states: u64 },
}

impl Verdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, Verdict::Linearizable { .. })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error(transparent)]
    Malformed(#[from] HistoryError),
    #[error("history has crash events; use check_durable")]
    UnexpectedCrash,
    #[error("history uses {0} distinct keys; at most 64 are supported")]
    TooManyKeys(usize),
}

/// Sequential set over a small key universe, as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
struct SetState(u64);

impl SetState {
    fn apply(&mut self, op: OpKind, key_bit: u64) -> bool {
        match op {
            OpKind::Contains => self.0 & key_bit != 0,
            OpKind::Insert => {
                let present = self.0 & key_bit != 0;
                self.0 |= key_bit;
                !present
            }
            OpKind::Remove => {
                let present = self.0 & key_bit != 0;
                self.0 &= !key_bit;
                present
            }
        }
    }
}

struct Search<'a> {
    ops: &'a [OpRecord],
    key_bits: Vec<u64>,
    included: u64,
    linearized: u64,
    state: SetState,
    stack: Vec<(usize, bool)>,
    dead: HashSet<(u64, u64)>,
    states: u64,
    budget: u64,
    best_prefix: Vec<(usize, bool)>,
}

enum SearchOutcome {
    Found(Vec<(usize, bool)>),
    Exhausted,
    OverBudget,
}

impl<'a> Search<'a> {
    fn run(&mut self) -> SearchOutcome {
        if self.linearized == self.included {
            return SearchOutcome::Found(self.stack.clone());
        }
        if self.states >= self.budget {
            return SearchOutcome::OverBudget;
        }
        self.states += 1;
        let memo_key = (self.linearized, self.state.0);
        if self.dead.contains(&memo_key) {
            return SearchOutcome::Exhausted;
        }
        // Minimal operations: no unlinearized included op ends before their
        // invocation.
        let mut min_end = u64::MAX;
        for op in self.ops {
            if self.included & (1 << op.id) != 0 && self.linearized & (1 << op.id) == 0 {
                min_end = min_end.min(op.end);
            }
        }
        for op in self.ops {
            let bit = 1u64 << op.id;
            if self.included & bit == 0 || self.linearized & bit != 0 || op.invoke > min_end {
                continue;
            }
            let mut next_state = self.state;
            let result = next_state.apply(op.op, self.key_bits[op.id]);
            if let Some(required) = op.result {
                if result != required {
                    continue;
                }
            }
            let saved_state = self.state;
            self.state = next_state;
            self.linearized |= bit;
            self.stack.push((op.id, result));
            if self.stack.len() > self.best_prefix.len() {
                self.best_prefix = self.stack.clone();
            }
            match self.run() {
                SearchOutcome::Found(w) => return SearchOutcome::Found(w),
                SearchOutcome::OverBudget => return SearchOutcome::OverBudget,
                SearchOutcome::Exhausted => {}
            }
            self.stack.pop();
            self.linearized &= !bit;
            self.state = saved_state;
        }
        self.dead.insert(memo_key);
        SearchOutcome::Exhausted
    }
}

fn key_universe(ops: &[OpRecord]) -> Result<Vec<u64>, CheckError> {
    let mut keys: Vec<i64> = ops.iter().map(|o| o.key).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.len() > 64 {
        return Err(CheckError::TooManyKeys(keys.len()));
    }
    Ok(ops
        .iter()
        .map(|o| 1u64 << keys.binary_search(&o.key).unwrap())
        .collect())
}

/// Re-execute a witness against a fresh sequential set: every recorded
/// result must match and the order must respect real-time precedence.
fn replay_witness(ops: &[OpRecord], key_bits: &[u64], witness: &[(usize, bool)]) -> bool {
    let mut state = SetState::default();
    let mut placed: Vec<usize> = Vec::new();
    for &(id, result) in witness {
        let op = &ops[id];
        if state.apply(op.op, key_bits[id]) != result {
            return false;
        }
        if let Some(required) = op.result {
            if result != required {
                return false;
            }
        }
        placed.push(id);
    }
    // Precedence: if p ends before q begins and both are in the witness, p
    // must appear first.
    for (i, &p) in placed.iter().enumerate() {
        for &q in &placed[i + 1..] {
            if ops[q].end < ops[p].invoke {
                return false;
            }
        }
    }
    // Every completed operation appears exactly once.
    let in_witness: HashSet<usize> = placed.iter().copied().collect();
    if placed.len() != in_witness.len() {
        return false;
    }
    ops.iter()
        .filter(|o| !o.pending())
        .all(|o| in_witness.contains(&o.id))
}

fn check_ops(ops: &[OpRecord], budget: u64) -> Result<Verdict, CheckError> {
    let key_bits = key_universe(ops)?;
    let pending: Vec<usize> = ops.iter().filter(|o| o.pending()).map(|o| o.id).collect();
    let completed_mask: u64 = ops
        .iter()
        .filter(|o| !o.pending())
        .fold(0, |m, o| m | (1 << o.id));
    let mut states_used = 0u64;
    let mut over_budget = false;
    let mut best: Vec<(usize, bool)> = Vec::new();
    // Every subset of pending operations may be completed-and-included; the
    // rest are dropped. Small by construction (at most one per thread).
    for subset in 0..(1u64 << pending.len()) {
        let mut included = completed_mask;
        for (i, id) in pending.iter().enumerate() {
            if subset & (1 << i) != 0 {
                included |= 1 << id;
            }
        }
        let mut search = Search {
            ops,
            key_bits: key_bits.clone(),
            included,
            linearized: 0,
            state: SetState::default(),
            stack: Vec::new(),
            dead: HashSet::new(),
            states: states_used,
            budget,
            best_prefix: Vec::new(),
        };
        match search.run() {
            SearchOutcome::Found(witness) => {
                assert!(
                    replay_witness(ops, &key_bits, &witness),
                    "search produced a witness that does not replay"
                );
                return Ok(Verdict::Linearizable { witness });
            }
            SearchOutcome::OverBudget => {
                over_budget = true;
                states_used = search.states;
                break;
            }
            SearchOutcome::Exhausted => {
                states_used = search.states;
                if search.best_prefix.len() > best.len() {
                    best = search.best_prefix;
                }
            }
        }
    }
    if over_budget {
        return Ok(Verdict::Inconclusive {
            states: states_used,
        });
    }
    let placed: HashSet<usize> = best.iter().map(|(id, _)| *id).collect();
    let window = ops
        .iter()
        .filter(|o| !o.pending() && !placed.contains(&o.id))
        .map(|o| o.id)
        .collect();
    Ok(Verdict::NotLinearizable {
        stuck_prefix: best,
        window,
    })
}

/// Checks a crash-free history.
pub fn check_linearizable(history: &History, budget: u64) -> Result<Verdict, CheckError> {
    if history.has_crash() {
        return Err(CheckError::UnexpectedCrash);
    }
    let ops = history.extract_ops(MAX_OPS)?;
    check_ops(&ops, budget)
}

/// Checks a history with crash and recovery events: crashes are stripped,
/// completed operations must linearize, and crash-pending operations are
/// free to be included (their effective response is the recovery point) or
/// dropped.
pub fn check_durable(history: &History, budget: u64) -> Result<Verdict, CheckError> {
    let ops = history.extract_ops(MAX_OPS)?;
    check_ops(&ops, budget)
}

/// Like [`check_durable`], but the surviving subset of pending operations is
/// forced: pending ops in `survivors` must be included, all others dropped.
/// Used to cross-validate the surviving-operation classifier.
pub fn check_durable_forced(
    history: &History,
    survivors: &[usize],
    budget: u64,
) -> Result<Verdict, CheckError> {
    let ops = history.extract_ops(MAX_OPS)?;
    let key_bits = key_universe(&ops)?;
    let mut included: u64 = ops
        .iter()
        .filter(|o| !o.pending())
        .fold(0, |m, o| m | (1 << o.id));
    for id in survivors {
        assert!(ops[*id].pending(), "forced survivor {id} is not pending");
        included |= 1 << id;
    }
    let mut search = Search {
        ops: &ops,
        key_bits: key_bits.clone(),
        included,
        linearized: 0,
        state: SetState::default(),
        stack: Vec::new(),
        dead: HashSet::new(),
        states: 0,
        budget,
        best_prefix: Vec::new(),
    };
    Ok(match search.run() {
        SearchOutcome::Found(witness) => {
            assert!(replay_witness(&ops, &key_bits, &witness));
            Verdict::Linearizable { witness }
        }
        SearchOutcome::OverBudget => Verdict::Inconclusive {
            states: search.states,
        },
        SearchOutcome::Exhausted => Verdict::NotLinearizable {
            stuck_prefix: search.best_prefix,
            window: Vec::new(),
        },
    })
}
