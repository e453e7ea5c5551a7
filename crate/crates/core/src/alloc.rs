//! Memory management for durable nodes.
//!
//! Every persistent node lives in a *durable area*: a region of fixed-size
//! slots owned by one thread and handed out with a bump index. Each thread
//! keeps a persistent *area list* — one [`AreaNode`] record per area, chained
//! through a meta region and rooted in a per-thread slot of the root region —
//! so a recovery procedure can find every slot that was ever handed out.
//!
//! Reclamation is epoch-based: retiring threads defer slots (and volatile
//! node destructors) into per-epoch buckets, and a bucket for epoch `e` is
//! recycled only once the global epoch has passed `e + 1`. Free-lists are
//! volatile and rebuilt from invalid or removed slots during recovery.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::pmem::{Heap, PmemError, RegionId, SlotRef, LINE_SIZE};
use crate::stats::ThreadStats;

/// Root region: one slot per possible thread, holding the head of that
/// thread's area list. Fixed so the layout survives restarts with a
/// different thread count.
pub const MAX_THREADS: usize = 64;
/// Area-node records per meta region.
const META_SLOTS: usize = 256;
/// Node slots are one cache line.
pub const SLOT_SIZE: usize = LINE_SIZE;

/// AreaNode word layout (one slot of a meta region).
const AN_REGION: usize = 0;
const AN_PREV: usize = 1;
const AN_OWNER: usize = 2;
/// Root-slot word layout.
const ROOT_HEAD: usize = 0;

const IDLE: u64 = u64::MAX;

#[derive(Debug, thiserror::Error)]
pub enum AllocError {
    #[error("durable area budget exceeded ({0} areas)")]
    AreaBudget(usize),
    #[error(transparent)]
    Pmem(#[from] PmemError),
    #[error("allocator integrity fault: {0}")]
    Integrity(String),
}

fn enc_ref(slot: SlotRef) -> u64 {
    slot.pack() + 1
}

fn dec_ref(raw: u64) -> Option<SlotRef> {
    (raw != 0).then(|| SlotRef::unpack(raw - 1))
}

/// An object whose reuse must wait out the current readers.
pub enum Retired {
    /// A durable slot; lands in the owner's free-list.
    Slot(SlotRef),
    /// Deferred destructor for a volatile node.
    Deferred(Box<dyn FnOnce() + Send>),
}

struct AreaRuntime {
    region: RegionId,
    bump: u32,
    slot_count: u32,
}

struct RetireBucket {
    epoch: u64,
    items: Vec<Retired>,
}

struct ThreadAlloc {
    areas: Vec<AreaRuntime>,
    free: Vec<SlotRef>,
    retired: VecDeque<RetireBucket>,
    pending: usize,
    /// Packed+1 ref to the persistent head of this thread's area list.
    head: u64,
}

impl ThreadAlloc {
    fn new() -> ThreadAlloc {
        ThreadAlloc {
            areas: Vec::new(),
            free: Vec::new(),
            retired: VecDeque::new(),
            pending: 0,
            head: 0,
        }
    }
}

impl Drop for ThreadAlloc {
    fn drop(&mut self) {
        // Teardown is exclusive: run the deferred destructors that never
        // reached their reclamation epoch.
        for bucket in self.retired.drain(..) {
            for item in bucket.items {
                if let Retired::Deferred(f) = item {
                    f();
                }
            }
        }
    }
}

struct MetaState {
    regions: Vec<RegionId>,
    next_slot: u32,
    free: Vec<SlotRef>,
}

/// Global epoch plus per-thread announcements. A thread is announced while
/// inside a set operation and idle otherwise.
pub struct EpochClock {
    global: AtomicU64,
    announce: Vec<AtomicU64>,
}

impl EpochClock {
    fn new() -> EpochClock {
        EpochClock {
            global: AtomicU64::new(2), // start above 0 so epoch-2 math never underflows
            announce: (0..MAX_THREADS).map(|_| AtomicU64::new(IDLE)).collect(),
        }
    }

    pub fn global(&self) -> u64 {
        self.global.load(Ordering::SeqCst)
    }

    pub fn enter(&self, thread: usize) {
        let e = self.global.load(Ordering::SeqCst);
        self.announce[thread].store(e, Ordering::SeqCst);
    }

    pub fn exit(&self, thread: usize) {
        self.announce[thread].store(IDLE, Ordering::SeqCst);
    }

    /// Advances the global epoch if every thread has reached it or is idle.
    fn try_advance(&self) -> u64 {
        let e = self.global.load(Ordering::SeqCst);
        let all_caught_up = self
            .announce
            .iter()
            .all(|a| matches!(a.load(Ordering::SeqCst), v if v == IDLE || v >= e));
        if all_caught_up {
            let _ = self
                .global
                .compare_exchange(e, e + 1, Ordering::SeqCst, Ordering::SeqCst);
        }
        self.global.load(Ordering::SeqCst)
    }
}

/// How one slot is accounted for by the allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotClass {
    /// Handed out and not returned: should be reachable from a set.
    Live,
    FreeListed,
    Retired,
    /// Beyond the bump index, never handed out.
    Unallocated,
}

/// One durable area discovered by a post-crash scan.
pub struct ScannedArea {
    pub orig_thread: usize,
    pub region: RegionId,
    pub slot_count: u32,
}

pub struct Allocator {
    heap: Arc<Heap>,
    root_region: RegionId,
    area_slots: usize,
    area_budget: usize,
    area_count: AtomicU64,
    meta: Mutex<MetaState>,
    threads: Vec<Mutex<ThreadAlloc>>,
    pub epoch: EpochClock,
    /// Retire-count threshold that triggers a reclamation attempt.
    reclaim_threshold: usize,
}

impl Allocator {
    /// Fresh allocator on an empty heap. Creates the root region (always
    /// region 0) and the first meta region.
    pub fn new(
        heap: Arc<Heap>,
        area_slots: usize,
        area_budget: usize,
    ) -> Result<Allocator, AllocError> {
        let root_region = heap.allocate_region(SLOT_SIZE, MAX_THREADS)?;
        assert_eq!(root_region.0, 0, "root region must be region 0");
        let meta_region = heap.allocate_region(SLOT_SIZE, META_SLOTS)?;
        Ok(Allocator {
            heap,
            root_region,
            area_slots,
            area_budget,
            area_count: AtomicU64::new(0),
            meta: Mutex::new(MetaState {
                regions: vec![meta_region],
                next_slot: 0,
                free: Vec::new(),
            }),
            threads: (0..MAX_THREADS)
                .map(|_| Mutex::new(ThreadAlloc::new()))
                .collect(),
            epoch: EpochClock::new(),
            reclaim_threshold: 2 * area_slots,
        })
    }

    /// Rebuilds the allocator over a heap restored from a crash snapshot:
    /// walks every thread's persistent area list, adopts areas of threads
    /// beyond `new_threads` round-robin, and treats every recovered area as
    /// fully bumped (free slots are reinstated by the list recovery).
    pub fn recover(
        heap: Arc<Heap>,
        new_threads: usize,
        area_slots: usize,
        area_budget: usize,
    ) -> Result<(Allocator, Vec<ScannedArea>), AllocError> {
        assert!(new_threads >= 1 && new_threads <= MAX_THREADS);
        let root_region = RegionId(0);
        let (root_slot_size, root_slots) = heap.region_meta(root_region);
        if root_slot_size != SLOT_SIZE || root_slots != MAX_THREADS {
            return Err(AllocError::Integrity("root region shape mismatch".into()));
        }
        let region_count = heap.region_count() as u32;
        let mut areas = Vec::new();
        let mut heads = vec![0u64; MAX_THREADS];
        for t in 0..MAX_THREADS {
            let root_slot = SlotRef {
                region: root_region,
                slot: t as u32,
            };
            let mut cursor = heap.load(root_slot, ROOT_HEAD);
            heads[t] = cursor;
            let mut hops = 0u64;
            while let Some(node) = dec_ref(cursor) {
                if node.region.0 >= region_count {
                    return Err(AllocError::Integrity(format!(
                        "dangling area node {cursor:#x} in thread {t} chain"
                    )));
                }
                let (msize, mslots) = heap.region_meta(node.region);
                if msize != SLOT_SIZE || node.slot as usize >= mslots {
                    return Err(AllocError::Integrity(format!(
                        "area node ref {cursor:#x} out of bounds"
                    )));
                }
                let area_region = RegionId(heap.load(node, AN_REGION) as u32);
                if area_region.0 >= region_count {
                    return Err(AllocError::Integrity(format!(
                        "area node points at missing region {}",
                        area_region.0
                    )));
                }
                let (asize, aslots) = heap.region_meta(area_region);
                if asize != SLOT_SIZE {
                    return Err(AllocError::Integrity("area region shape mismatch".into()));
                }
                areas.push(ScannedArea {
                    orig_thread: t,
                    region: area_region,
                    slot_count: aslots as u32,
                });
                cursor = heap.load(node, AN_PREV);
                hops += 1;
                if hops > 1 << 20 {
                    return Err(AllocError::Integrity("area list cycle".into()));
                }
            }
        }

        let alloc = Allocator {
            heap,
            root_region,
            area_slots,
            area_budget,
            area_count: AtomicU64::new(areas.len() as u64),
            meta: Mutex::new(MetaState {
                regions: Vec::new(),
                next_slot: 0,
                free: Vec::new(),
            }),
            threads: (0..MAX_THREADS)
                .map(|_| Mutex::new(ThreadAlloc::new()))
                .collect(),
            epoch: EpochClock::new(),
            reclaim_threshold: 2 * area_slots,
        };
        for (t, head) in heads.iter().enumerate() {
            alloc.threads[t].lock().head = *head;
        }
        for area in &areas {
            let owner = if area.orig_thread < new_threads {
                area.orig_thread
            } else {
                area.orig_thread % new_threads
            };
            alloc.threads[owner].lock().areas.push(AreaRuntime {
                region: area.region,
                bump: area.slot_count,
                slot_count: area.slot_count,
            });
        }
        Ok((alloc, areas))
    }

    /// Hands out a slot for an area node, growing the meta storage when the
    /// current region fills (or when a recovered allocator has none yet).
    fn meta_alloc(&self) -> Result<SlotRef, AllocError> {
        let mut meta = self.meta.lock();
        if let Some(slot) = meta.free.pop() {
            return Ok(slot);
        }
        if meta.regions.is_empty() || meta.next_slot as usize == META_SLOTS {
            let region = self.heap.allocate_region(SLOT_SIZE, META_SLOTS)?;
            meta.regions.push(region);
            meta.next_slot = 0;
        }
        let region = *meta.regions.last().unwrap();
        let slot = meta.next_slot;
        meta.next_slot += 1;
        Ok(SlotRef { region, slot })
    }

    /// Returns a slot for a new node: the thread's free-list first, then the
    /// bump index, allocating (and durably linking) a new area if the
    /// current one is exhausted.
    pub fn alloc_from_area(
        &self,
        thread: usize,
        stats: &ThreadStats,
    ) -> Result<SlotRef, AllocError> {
        let mut ta = self.threads[thread].lock();
        if let Some(slot) = ta.free.pop() {
            return Ok(slot);
        }
        if let Some(area) = ta.areas.last_mut() {
            if area.bump < area.slot_count {
                let slot = SlotRef {
                    region: area.region,
                    slot: area.bump,
                };
                area.bump += 1;
                return Ok(slot);
            }
        }
        // Out of memory: reclaim before growing.
        self.reclaim_locked(thread, &mut ta);
        if let Some(slot) = ta.free.pop() {
            return Ok(slot);
        }
        self.grow(thread, stats, &mut ta)?;
        let area = ta.areas.last_mut().unwrap();
        let slot = SlotRef {
            region: area.region,
            slot: area.bump,
        };
        area.bump += 1;
        Ok(slot)
    }

    /// Allocates a new durable area and persists its area node: the record
    /// is written and flushed, then the thread's list head is redirected to
    /// it and flushed. Two psyncs, attributed to allocator infrastructure.
    fn grow(
        &self,
        thread: usize,
        stats: &ThreadStats,
        ta: &mut ThreadAlloc,
    ) -> Result<(), AllocError> {
        let count = self.area_count.fetch_add(1, Ordering::SeqCst) as usize;
        if count >= self.area_budget {
            self.area_count.fetch_sub(1, Ordering::SeqCst);
            return Err(AllocError::AreaBudget(count));
        }
        let region = self.heap.allocate_region(SLOT_SIZE, self.area_slots)?;
        let node = self.meta_alloc()?;
        self.heap.store(node, AN_REGION, region.0 as u64);
        self.heap.store(node, AN_PREV, ta.head);
        self.heap.store(node, AN_OWNER, thread as u64);
        self.heap.psync_infra(stats, node);
        let root_slot = SlotRef {
            region: self.root_region,
            slot: thread as u32,
        };
        self.heap.store(root_slot, ROOT_HEAD, enc_ref(node));
        self.heap.psync_infra(stats, root_slot);
        ta.head = enc_ref(node);
        ta.areas.push(AreaRuntime {
            region,
            bump: 0,
            slot_count: self.area_slots as u32,
        });
        Ok(())
    }

    /// Returns a never-published or restored slot straight to the free-list.
    pub fn free_slot(&self, thread: usize, slot: SlotRef) {
        self.threads[thread].lock().free.push(slot);
    }

    /// Defers a slot until all current readers have moved on, then recycles
    /// it through the free-list.
    pub fn retire_slot(&self, thread: usize, slot: SlotRef) {
        self.retire(thread, Retired::Slot(slot));
    }

    /// Defers an arbitrary destructor (volatile node reclamation).
    pub fn retire_deferred(&self, thread: usize, f: Box<dyn FnOnce() + Send>) {
        self.retire(thread, Retired::Deferred(f));
    }

    fn retire(&self, thread: usize, item: Retired) {
        let mut ta = self.threads[thread].lock();
        let epoch = self.epoch.global();
        match ta.retired.back_mut() {
            Some(bucket) if bucket.epoch == epoch => bucket.items.push(item),
            _ => ta.retired.push_back(RetireBucket {
                epoch,
                items: vec![item],
            }),
        }
        ta.pending += 1;
        if ta.pending > self.reclaim_threshold {
            self.reclaim_locked(thread, &mut ta);
        }
    }

    /// Advances the epoch if possible and recycles every bucket that is at
    /// least two epochs old.
    pub fn try_reclaim(&self, thread: usize) {
        let mut ta = self.threads[thread].lock();
        self.reclaim_locked(thread, &mut ta);
    }

    fn reclaim_locked(&self, _thread: usize, ta: &mut ThreadAlloc) {
        let global = self.epoch.try_advance();
        while let Some(front) = ta.retired.front() {
            if front.epoch + 2 > global {
                break;
            }
            let bucket = ta.retired.pop_front().unwrap();
            ta.pending -= bucket.items.len();
            for item in bucket.items {
                match item {
                    Retired::Slot(slot) => ta.free.push(slot),
                    Retired::Deferred(f) => f(),
                }
            }
        }
    }

    /// Returns fully reclaimed areas to the backing store: an area whose
    /// every handed-out slot sits in a free-list is unlinked from its
    /// persistent chain (one flushed link rewrite per unlinked node, each
    /// prefix of which is a consistent chain) and its region is released.
    /// Exclusive use, immediately after recovery; returns released areas.
    pub fn release_empty_areas(&self, stats: &ThreadStats) -> usize {
        let mut guards: Vec<_> = self.threads.iter().map(|t| t.lock()).collect();
        assert!(
            guards.iter().all(|ta| ta.retired.is_empty()),
            "area release requires a quiescent allocator"
        );
        // Free slots per region, across all adopting threads.
        let mut free_per_region: std::collections::HashMap<RegionId, usize> =
            std::collections::HashMap::new();
        for ta in guards.iter() {
            for slot in &ta.free {
                *free_per_region.entry(slot.region).or_default() += 1;
            }
        }
        let mut dropped: std::collections::HashSet<RegionId> = std::collections::HashSet::new();
        for ta in guards.iter_mut() {
            ta.areas.retain(|area| {
                let empty = area.bump > 0
                    && free_per_region.get(&area.region).copied().unwrap_or(0)
                        == area.bump as usize;
                if empty {
                    dropped.insert(area.region);
                }
                !empty
            });
        }
        if dropped.is_empty() {
            return 0;
        }
        for ta in guards.iter_mut() {
            ta.free.retain(|slot| !dropped.contains(&slot.region));
        }
        // Unlink the dropped areas' nodes from every persistent chain, one
        // durable rewrite at a time.
        let mut meta = self.meta.lock();
        for (t, ta) in guards.iter_mut().enumerate() {
            let root_slot = SlotRef {
                region: self.root_region,
                slot: t as u32,
            };
            let mut pred: Option<SlotRef> = None;
            let mut cursor = self.heap.load(root_slot, ROOT_HEAD);
            while let Some(node) = dec_ref(cursor) {
                let region = RegionId(self.heap.load(node, AN_REGION) as u32);
                let next = self.heap.load(node, AN_PREV);
                if dropped.contains(&region) {
                    match pred {
                        Some(p) => {
                            self.heap.store(p, AN_PREV, next);
                            self.heap.psync_infra(stats, p);
                        }
                        None => {
                            self.heap.store(root_slot, ROOT_HEAD, next);
                            self.heap.psync_infra(stats, root_slot);
                        }
                    }
                    meta.free.push(node);
                } else {
                    pred = Some(node);
                }
                cursor = next;
            }
            ta.head = self.heap.load(root_slot, ROOT_HEAD);
        }
        drop(meta);
        self.area_count
            .fetch_sub(dropped.len() as u64, Ordering::SeqCst);
        for region in &dropped {
            self.heap.release_region(*region);
        }
        dropped.len()
    }

    /// Every area currently owned, in (owner, region, slot_count) form.
    pub fn areas(&self) -> Vec<(usize, RegionId, u32)> {
        let mut out = Vec::new();
        for (t, ta) in self.threads.iter().enumerate() {
            for area in ta.lock().areas.iter() {
                out.push((t, area.region, area.slot_count));
            }
        }
        out
    }

    /// Accounting snapshot of every slot of every area. Quiescent use only.
    pub fn census(&self) -> std::collections::HashMap<SlotRef, SlotClass> {
        let mut map = std::collections::HashMap::new();
        for ta in &self.threads {
            let ta = ta.lock();
            for area in &ta.areas {
                for s in 0..area.slot_count {
                    let class = if s < area.bump {
                        SlotClass::Live
                    } else {
                        SlotClass::Unallocated
                    };
                    map.insert(
                        SlotRef {
                            region: area.region,
                            slot: s,
                        },
                        class,
                    );
                }
            }
            for slot in &ta.free {
                map.insert(*slot, SlotClass::FreeListed);
            }
            for bucket in &ta.retired {
                for item in &bucket.items {
                    if let Retired::Slot(slot) = item {
                        map.insert(*slot, SlotClass::Retired);
                    }
                }
            }
        }
        map
    }

    pub fn heap(&self) -> &Arc<Heap> {
        &self.heap
    }
}
