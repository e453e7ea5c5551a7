//! Shared runtime for a family of durable sets: one simulated heap, one
//! allocator, and per-thread handles carrying identity and counters.

use std::sync::Arc;

use parking_lot::RwLock;

use crate::alloc::{AllocError, Allocator, MAX_THREADS};
use crate::pmem::{Heap, HeapConfig, PersistentSnapshot, SlotRef};
use crate::stats::{OpGuard, OpTag, ThreadStats};

/// Internal progress points the lists report when a milestone hook is
/// installed; crash-injection harnesses use them to reason about operations
/// that were cut off mid-flight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Milestone {
    /// Link-free insert took this slot; `validity` is the slot's validity
    /// word at allocation (both bits equal).
    LfAllocated { slot: SlotRef, validity: u64 },
    /// Link-free remove won the mark CAS; `validity` is the node's validity
    /// word at that point.
    LfMarked { slot: SlotRef, validity: u64 },
    /// SOFT insert won the link CAS for the volatile node of this slot;
    /// `p_validity` is the generation flag the persistent node will flip to.
    SoftLinked { slot: SlotRef, p_validity: bool },
    /// A `create` call (owner or helper) completed, psync included.
    SoftCreateDone { slot: SlotRef },
    /// SOFT remove won the intend-to-delete CAS; `p_validity` is the
    /// victim's generation flag.
    SoftItdWon { slot: SlotRef, p_validity: bool },
    /// A `destroy` call completed, psync included.
    SoftDestroyDone { slot: SlotRef },
}

pub type MilestoneHook = Arc<dyn Fn(usize, Milestone) + Send + Sync>;

#[derive(Debug, Clone)]
pub struct DomainConfig {
    pub heap: HeapConfig,
    /// Slots per durable area.
    pub area_slots: usize,
    /// Total areas permitted before allocation fails.
    pub area_budget: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            heap: HeapConfig::default(),
            area_slots: 1024,
            area_budget: 1 << 12,
        }
    }
}

/// Heap + allocator + stats registry shared by every set in one simulated
/// process lifetime.
pub struct Domain {
    heap: Arc<Heap>,
    alloc: Allocator,
    stats: Vec<Arc<ThreadStats>>,
    milestone_hook: RwLock<Option<MilestoneHook>>,
}

impl Domain {
    pub fn new(config: DomainConfig) -> Result<Arc<Domain>, AllocError> {
        let heap = Heap::new(config.heap);
        let alloc = Allocator::new(Arc::clone(&heap), config.area_slots, config.area_budget)?;
        Ok(Arc::new(Domain {
            heap,
            alloc,
            stats: (0..MAX_THREADS).map(|_| ThreadStats::new()).collect(),
            milestone_hook: RwLock::new(None),
        }))
    }

    /// Rebuilds a domain from a crash snapshot for `threads` new threads.
    /// The recovered allocator knows every pre-crash area; free-lists are
    /// reinstated by the list recovery that follows.
    pub fn recover(
        snapshot: &PersistentSnapshot,
        config: DomainConfig,
        threads: usize,
    ) -> Result<Arc<Domain>, AllocError> {
        let heap = Heap::from_snapshot(snapshot, config.heap);
        let (alloc, _areas) = Allocator::recover(
            Arc::clone(&heap),
            threads,
            config.area_slots,
            config.area_budget,
        )?;
        Ok(Arc::new(Domain {
            heap,
            alloc,
            stats: (0..MAX_THREADS).map(|_| ThreadStats::new()).collect(),
            milestone_hook: RwLock::new(None),
        }))
    }

    /// Handle for the dense thread index `index`. One handle per thread.
    pub fn register_thread(self: &Arc<Self>, index: usize) -> ThreadHandle {
        assert!(index < MAX_THREADS);
        ThreadHandle {
            index,
            domain: Arc::clone(self),
        }
    }

    pub fn heap(&self) -> &Arc<Heap> {
        &self.heap
    }

    pub fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    pub fn thread_stats(&self, index: usize) -> &Arc<ThreadStats> {
        &self.stats[index]
    }

    pub fn all_stats(&self) -> &[Arc<ThreadStats>] {
        &self.stats
    }

    /// Installs a hook receiving (thread, milestone) progress reports from
    /// the lists. Intended for crash-injection harnesses.
    pub fn set_milestone_hook(&self, hook: MilestoneHook) {
        *self.milestone_hook.write() = Some(hook);
    }

    pub(crate) fn emit_milestone(&self, thread: usize, m: Milestone) {
        if let Some(hook) = self.milestone_hook.read().as_ref() {
            hook(thread, m);
        }
    }
}

/// Per-thread view of a [`Domain`]: thread identity, counters, and the
/// allocation interface. Not shareable across threads.
pub struct ThreadHandle {
    index: usize,
    domain: Arc<Domain>,
}

impl ThreadHandle {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn heap(&self) -> &Arc<Heap> {
        &self.domain.heap
    }

    pub fn stats(&self) -> &Arc<ThreadStats> {
        &self.domain.stats[self.index]
    }

    /// Marks the start of a set operation for psync attribution and joins
    /// the current epoch; dropping the guard leaves both.
    pub(crate) fn begin_op(&self, tag: OpTag) -> EpochOpGuard<'_> {
        crate::sched::checkpoint();
        let stats_guard = self.stats().begin_op(tag);
        self.domain.alloc.epoch.enter(self.index);
        EpochOpGuard {
            handle: self,
            _stats: stats_guard,
        }
    }

    pub(crate) fn alloc_slot(&self) -> Result<SlotRef, AllocError> {
        self.domain.alloc.alloc_from_area(self.index, self.stats())
    }

    pub(crate) fn free_slot(&self, slot: SlotRef) {
        self.domain.alloc.free_slot(self.index, slot);
    }

    pub(crate) fn retire_slot(&self, slot: SlotRef) {
        self.domain.alloc.retire_slot(self.index, slot);
    }

    pub(crate) fn retire_deferred(&self, f: Box<dyn FnOnce() + Send>) {
        self.domain.alloc.retire_deferred(self.index, f);
    }
}

/// Operation scope: psync attribution plus epoch membership.
pub(crate) struct EpochOpGuard<'a> {
    handle: &'a ThreadHandle,
    _stats: OpGuard,
}

impl Drop for EpochOpGuard<'_> {
    fn drop(&mut self) {
        self.handle.domain.alloc.epoch.exit(self.handle.index);
    }
}
