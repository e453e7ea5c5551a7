//! Operation histories: invocation/response/crash records with a global
//! sequence order, plus extraction into per-operation records for the
//! linearizability search.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Contains,
    Insert,
    Remove,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Contains => write!(f, "contains"),
            OpKind::Insert => write!(f, "insert"),
            OpKind::Remove => write!(f, "remove"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    Invoke { op: OpKind, key: i64, value: i64 },
    Respond { result: bool },
    Crash,
    RecoveryDone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEvent {
    pub seq: u64,
    pub thread: usize,
    pub kind: EventKind,
}

impl fmt::Display for HistoryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EventKind::Invoke { op, key, value } => {
                write!(
                    f,
                    "{:>4} t{} invoke {} {} {}",
                    self.seq, self.thread, op, key, value
                )
            }
            EventKind::Respond { result } => {
                write!(f, "{:>4} t{} respond {}", self.seq, self.thread, result)
            }
            EventKind::Crash => write!(f, "{:>4} -- crash", self.seq),
            EventKind::RecoveryDone => write!(f, "{:>4} -- recovery_done", self.seq),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HistoryError {
    #[error("thread {0} responded without a pending invocation")]
    StrayResponse(usize),
    #[error("thread {0} invoked while an invocation was pending")]
    OverlappingInvoke(usize),
    #[error("crash not followed by recovery_done")]
    MissingRecovery,
    #[error("thread {0} reappeared after dying in a crash")]
    ZombieThread(usize),
    #[error("history contains more than {0} operations")]
    TooLarge(usize),
}

/// A complete recorded history, ordered by sequence number.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl fmt::Display for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.events {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

/// One extracted operation. Pending operations (open at a crash) have no
/// recorded result; their effective end is the recovery that follows the
/// crash, the latest point at which they may linearize.
#[derive(Debug, Clone, Copy)]
pub struct OpRecord {
    pub id: usize,
    pub thread: usize,
    pub op: OpKind,
    pub key: i64,
    pub value: i64,
    pub invoke: u64,
    pub end: u64,
    pub result: Option<bool>,
}

impl OpRecord {
    pub fn pending(&self) -> bool {
        self.result.is_none()
    }
}

/// Thread-safe recorder shared by scenario workers.
pub struct Recorder {
    seq: AtomicU64,
    events: Mutex<Vec<HistoryEvent>>,
}

impl Recorder {
    pub fn new() -> Recorder {
        Recorder {
            seq: AtomicU64::new(0),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::SeqCst)
    }

    fn push(&self, thread: usize, kind: EventKind) {
        let seq = self.next_seq();
        self.events.lock().push(HistoryEvent { seq, thread, kind });
    }

    pub fn invoke(&self, thread: usize, op: OpKind, key: i64, value: i64) {
        self.push(thread, EventKind::Invoke { op, key, value });
    }

    pub fn respond(&self, thread: usize, result: bool) {
        self.push(thread, EventKind::Respond { result });
    }

    pub fn crash(&self) {
        self.push(usize::MAX, EventKind::Crash);
    }

    pub fn recovery_done(&self) {
        self.push(usize::MAX, EventKind::RecoveryDone);
    }

    pub fn finish(self) -> History {
        let mut events = self.events.into_inner();
        events.sort_by_key(|e| e.seq);
        History { events }
    }
}

impl Default for Recorder {
    fn default() -> Self {
        Recorder::new()
    }
}

impl History {
    /// Validates well-formedness and extracts operation records. Crash
    /// events orphan every open invocation; an orphaned thread may not act
    /// again; recoveries interrupted by crashes are rejected.
    pub fn extract_ops(&self, max_ops: usize) -> Result<Vec<OpRecord>, HistoryError> {
        let mut ops: Vec<OpRecord> = Vec::new();
        let mut open: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        let mut dead: std::collections::HashSet<usize> = std::collections::HashSet::new();
        let mut awaiting_recovery: Vec<usize> = Vec::new(); // op ids pending at the last crash
        let mut in_crash = false;
        for e in &self.events {
            match e.kind {
                EventKind::Invoke { op, key, value } => {
                    if in_crash {
                        return Err(HistoryError::MissingRecovery);
                    }
                    if dead.contains(&e.thread) {
                        return Err(HistoryError::ZombieThread(e.thread));
                    }
                    if open.contains_key(&e.thread) {
                        return Err(HistoryError::OverlappingInvoke(e.thread));
                    }
                    let id = ops.len();
                    if id >= max_ops {
                        return Err(HistoryError::TooLarge(max_ops));
                    }
                    ops.push(OpRecord {
                        id,
                        thread: e.thread,
                        op,
                        key,
                        value,
                        invoke: e.seq,
                        end: u64::MAX,
                        result: None,
                    });
                    open.insert(e.thread, id);
                }
                EventKind::Respond { result } => {
                    let id = open
                        .remove(&e.thread)
                        .ok_or(HistoryError::StrayResponse(e.thread))?;
                    ops[id].end = e.seq;
                    ops[id].result = Some(result);
                }
                EventKind::Crash => {
                    if in_crash {
                        return Err(HistoryError::MissingRecovery);
                    }
                    in_crash = true;
                    for (thread, id) in open.drain() {
                        dead.insert(thread);
                        awaiting_recovery.push(id);
                    }
                }
                EventKind::RecoveryDone => {
                    in_crash = false;
                    for id in awaiting_recovery.drain(..) {
                        ops[id].end = e.seq;
                    }
                }
            }
        }
        if in_crash {
            return Err(HistoryError::MissingRecovery);
        }
        // Operations still open at the end of a crash-free suffix may
        // linearize any time after their invocation.
        Ok(ops)
    }

    pub fn has_crash(&self) -> bool {
        self.events.iter().any(|e| e.kind == EventKind::Crash)
    }

    /// Sequence number of the first crash, if any.
    pub fn crash_seq(&self) -> Option<u64> {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::Crash)
            .map(|e| e.seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_and_pending_ends() {
        let r = Recorder::new();
        r.invoke(0, OpKind::Insert, 1, 10);
        r.respond(0, true);
        r.invoke(0, OpKind::Remove, 1, 0);
        r.invoke(1, OpKind::Contains, 1, 0);
        r.respond(1, true);
        r.crash();
        r.recovery_done();
        let h = r.finish();
        let ops = h.extract_ops(64).unwrap();
        assert_eq!(ops.len(), 3);
        assert!(!ops[0].pending());
        assert!(ops[1].pending());
        assert_eq!(ops[1].end, h.events.last().unwrap().seq);
        assert!(!ops[2].pending());
    }

    #[test]
    fn zombie_threads_are_rejected() {
        let r = Recorder::new();
        r.invoke(0, OpKind::Insert, 1, 10);
        r.crash();
        r.recovery_done();
        r.invoke(0, OpKind::Contains, 1, 0);
        r.respond(0, true);
        let h = r.finish();
        assert_eq!(
            h.extract_ops(64).unwrap_err(),
            HistoryError::ZombieThread(0)
        );
    }

    #[test]
    fn nested_crash_is_rejected() {
        let r = Recorder::new();
        r.crash();
        r.crash();
        let h = r.finish();
        assert_eq!(
            h.extract_ops(64).unwrap_err(),
            HistoryError::MissingRecovery
        );
    }
}
