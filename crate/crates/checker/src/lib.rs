//! Verification tooling for the durable set library: operation histories,
//! a brute-force durable-linearizability checker, deterministic crash
//! injection, a surviving-operation classifier, and a native stress harness
//! with invariant sweeps.

pub mod classify;
pub mod history;
pub mod scenario;
pub mod stress;
pub mod wgl;

pub use classify::{classify_surviving, SurvivalLabel};
pub use history::{EventKind, History, HistoryEvent, OpKind, Recorder};
pub use scenario::{generate, generate_crash_free, run_scenario, Scenario, ScriptOp, Structure};
pub use wgl::{check_durable, check_durable_forced, check_linearizable, Verdict, DEFAULT_BUDGET};
