//! Per-thread flush and fence accounting.
//!
//! Every psync a thread issues is attributed either to the set operation it
//! is executing (contains/insert/remove/recover) or to allocator
//! infrastructure (durable-area bookkeeping). Counters are written only by
//! the owning thread and merged on read, so relaxed atomics suffice.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// What kind of set operation a thread is currently executing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpTag {
    Contains = 0,
    Insert = 1,
    Remove = 2,
    Recover = 3,
}

pub const OP_TAGS: [OpTag; 4] = [
    OpTag::Contains,
    OpTag::Insert,
    OpTag::Remove,
    OpTag::Recover,
];

const NO_OP: u64 = u64::MAX;

#[derive(Default)]
struct OpAgg {
    ops: AtomicU64,
    psyncs: AtomicU64,
    max_psyncs: AtomicU64,
    fences: AtomicU64,
}

/// Counters for one thread. Shareable so harnesses can merge after a run.
pub struct ThreadStats {
    psync_count: AtomicU64,
    flush_count: AtomicU64,
    fence_count: AtomicU64,
    infra_psync_count: AtomicU64,
    cur_tag: AtomicU64,
    cur_psyncs: AtomicU64,
    cur_fences: AtomicU64,
    per_op: [OpAgg; OP_TAGS.len()],
}

impl ThreadStats {
    pub fn new() -> Arc<ThreadStats> {
        Arc::new(ThreadStats {
            psync_count: AtomicU64::new(0),
            flush_count: AtomicU64::new(0),
            fence_count: AtomicU64::new(0),
            infra_psync_count: AtomicU64::new(0),
            cur_tag: AtomicU64::new(NO_OP),
            cur_psyncs: AtomicU64::new(0),
            cur_fences: AtomicU64::new(0),
            per_op: Default::default(),
        })
    }

    /// Marks the start of a set operation; the returned guard folds the
    /// operation's psync count into the per-tag aggregates when dropped.
    pub fn begin_op(self: &Arc<Self>, tag: OpTag) -> OpGuard {
        debug_assert_eq!(
            self.cur_tag.load(Ordering::Relaxed),
            NO_OP,
            "set operations do not nest"
        );
        self.cur_tag.store(tag as u64, Ordering::Relaxed);
        self.cur_psyncs.store(0, Ordering::Relaxed);
        self.cur_fences.store(0, Ordering::Relaxed);
        OpGuard {
            stats: Arc::clone(self),
            tag,
        }
    }

    pub(crate) fn note_psync(&self, lines: u64, infra: bool) {
        self.psync_count.fetch_add(1, Ordering::Relaxed);
        self.flush_count.fetch_add(lines, Ordering::Relaxed);
        if infra {
            self.infra_psync_count.fetch_add(1, Ordering::Relaxed);
        } else if self.cur_tag.load(Ordering::Relaxed) != NO_OP {
            self.cur_psyncs.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub(crate) fn note_fence(&self) {
        self.fence_count.fetch_add(1, Ordering::Relaxed);
        if self.cur_tag.load(Ordering::Relaxed) != NO_OP {
            self.cur_fences.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn psync_count(&self) -> u64 {
        self.psync_count.load(Ordering::Relaxed)
    }

    pub fn flush_count(&self) -> u64 {
        self.flush_count.load(Ordering::Relaxed)
    }

    pub fn fence_count(&self) -> u64 {
        self.fence_count.load(Ordering::Relaxed)
    }

    pub fn infra_psync_count(&self) -> u64 {
        self.infra_psync_count.load(Ordering::Relaxed)
    }

    /// psyncs issued by set operations themselves, excluding allocator
    /// infrastructure.
    pub fn algo_psync_count(&self) -> u64 {
        self.psync_count() - self.infra_psync_count()
    }

    /// psyncs issued so far by the operation in progress.
    pub fn current_op_psyncs(&self) -> u64 {
        self.cur_psyncs.load(Ordering::Relaxed)
    }

    /// (ops, psyncs, max psyncs in one op, fences) recorded under a tag.
    pub fn op_totals(&self, tag: OpTag) -> (u64, u64, u64, u64) {
        let agg = &self.per_op[tag as usize];
        (
            agg.ops.load(Ordering::Relaxed),
            agg.psyncs.load(Ordering::Relaxed),
            agg.max_psyncs.load(Ordering::Relaxed),
            agg.fences.load(Ordering::Relaxed),
        )
    }
}

/// RAII guard for one set operation; see [`ThreadStats::begin_op`].
pub struct OpGuard {
    stats: Arc<ThreadStats>,
    tag: OpTag,
}

impl OpGuard {
    /// psyncs issued so far by this operation.
    pub fn psyncs(&self) -> u64 {
        self.stats.current_op_psyncs()
    }
}

impl Drop for OpGuard {
    fn drop(&mut self) {
        let psyncs = self.stats.cur_psyncs.load(Ordering::Relaxed);
        let fences = self.stats.cur_fences.load(Ordering::Relaxed);
        let agg = &self.stats.per_op[self.tag as usize];
        agg.ops.fetch_add(1, Ordering::Relaxed);
        agg.psyncs.fetch_add(psyncs, Ordering::Relaxed);
        agg.max_psyncs.fetch_max(psyncs, Ordering::Relaxed);
        agg.fences.fetch_add(fences, Ordering::Relaxed);
        self.stats.cur_tag.store(NO_OP, Ordering::Relaxed);
    }
}

/// Sum of merged counters across a set of thread stats.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct MergedStats {
    pub psync_count: u64,
    pub flush_count: u64,
    pub fence_count: u64,
    pub infra_psync_count: u64,
}

pub fn merge<'a>(all: impl IntoIterator<Item = &'a Arc<ThreadStats>>) -> MergedStats {
    let mut m = MergedStats::default();
    for s in all {
        m.psync_count += s.psync_count();
        m.flush_count += s.flush_count();
        m.fence_count += s.fence_count();
        m.infra_psync_count += s.infra_psync_count();
    }
    m
}
