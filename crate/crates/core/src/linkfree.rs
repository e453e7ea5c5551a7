//! The link-free sorted list.
//!
//! Each key has a single representation: one durable slot holding two
//! validity bits, two flush flags, the key, the value, and a successor link
//! whose low bit is the Harris deletion mark. Links are never flushed for
//! their own sake — a node is durably in the set exactly when its slot
//! persists as initialized, valid (both validity bits equal) and unmarked,
//! which is what recovery keys on.
//!
//! A node is made invalid (validity bits unequal) before its fields are
//! written, so a crash can never surface a half-initialized node. Linking
//! precedes `make_valid`; doing it the other way could leave two valid
//! same-key nodes in the NVRAM with no way to pick one.

use std::sync::Arc;

use crate::domain::{Domain, ThreadHandle};
use crate::pmem::SlotRef;
use crate::sched::SharedWord;
use crate::stats::OpTag;
use crate::tagged::mark;
use crate::{DurableSet, RecoveryError, SetError};

/// Slot word layout. One node per 64-byte slot; offsets are fixed so
/// snapshots are portable.
pub const W_VALIDITY: usize = 0; // bit 0 = v1, bit 1 = v2
pub const W_INS_FLAG: usize = 1; // insert flush flag
pub const W_DEL_FLAG: usize = 2; // delete flush flag
pub const W_INIT: usize = 3; // set once the slot has ever held a node
pub const W_KEY: usize = 4;
pub const W_VALUE: usize = 5;
pub const W_NEXT: usize = 6; // handle << 1 | mark

/// Node handles as stored (shifted left of the mark bit): reserved values
/// for the sentinels, slots beyond.
const H_NULL: u64 = 0;
const H_HEAD: u64 = 1;
const H_TAIL: u64 = 2;
const H_SLOT_BASE: u64 = 3;

fn slot_handle(slot: SlotRef) -> u64 {
    slot.pack() + H_SLOT_BASE
}

fn handle_slot(handle: u64) -> SlotRef {
    debug_assert!(handle >= H_SLOT_BASE);
    SlotRef::unpack(handle - H_SLOT_BASE)
}

fn enc(handle: u64, marked: bool) -> u64 {
    (handle << 1) | marked as u64
}

fn word_handle(word: u64) -> u64 {
    mark::get_ref(word) >> 1
}

fn assert_user_key(key: i64) {
    assert!(
        key != i64::MIN && key != i64::MAX,
        "sentinel keys are reserved"
    );
}

/// The link-free list. Sentinels are volatile and recreated by recovery;
/// everything else lives in durable-area slots.
pub struct LfList {
    domain: Arc<Domain>,
    head_next: SharedWord,
    tail_next: SharedWord,
}

impl LfList {
    pub fn new(domain: Arc<Domain>) -> LfList {
        LfList {
            domain,
            head_next: SharedWord::new(enc(H_TAIL, false)),
            tail_next: SharedWord::new(enc(H_NULL, false)),
        }
    }

    fn key(&self, handle: u64) -> i64 {
        match handle {
            H_HEAD => i64::MIN,
            H_TAIL => i64::MAX,
            _ => self.domain.heap().load(handle_slot(handle), W_KEY) as i64,
        }
    }

    fn next_load(&self, handle: u64) -> u64 {
        match handle {
            H_HEAD => self.head_next.load(),
            H_TAIL => self.tail_next.load(),
            _ => self.domain.heap().load(handle_slot(handle), W_NEXT),
        }
    }

    fn next_cas(&self, handle: u64, expected: u64, new: u64) -> bool {
        match handle {
            H_HEAD => self.head_next.compare_exchange(expected, new),
            H_TAIL => self.tail_next.compare_exchange(expected, new),
            _ => self
                .domain
                .heap()
                .compare_exchange(handle_slot(handle), W_NEXT, expected, new),
        }
    }

    fn is_valid(&self, slot: SlotRef) -> bool {
        let v = self.domain.heap().load(slot, W_VALIDITY);
        (v & 1) == ((v >> 1) & 1)
    }

    /// Flips the first validity bit, making the node invalid.
    fn flip_v1(&self, slot: SlotRef) {
        let heap = self.domain.heap();
        let v = heap.load(slot, W_VALIDITY);
        heap.store(slot, W_VALIDITY, v ^ 1);
    }

    /// Equates the second validity bit to the first, making the node valid.
    /// Idempotent, and a no-op on nodes that never became invalid.
    fn make_valid(&self, slot: SlotRef) {
        let heap = self.domain.heap();
        let v = heap.load(slot, W_VALIDITY);
        let v1 = v & 1;
        heap.store(slot, W_VALIDITY, v1 | (v1 << 1));
    }

    /// psync the node unless its latest insertion is already known durable.
    fn flush_insert(&self, handle: &ThreadHandle, slot: SlotRef) {
        let heap = self.domain.heap();
        if heap.load(slot, W_INS_FLAG) == 0 {
            heap.psync(handle.stats(), slot);
            heap.store(slot, W_INS_FLAG, 1);
        }
    }

    /// psync the node unless its deletion mark is already known durable.
    fn flush_delete(&self, handle: &ThreadHandle, slot: SlotRef) {
        let heap = self.domain.heap();
        if heap.load(slot, W_DEL_FLAG) == 0 {
            heap.psync(handle.stats(), slot);
            heap.store(slot, W_DEL_FLAG, 1);
        }
    }

    /// Unlinks the marked node `curr`, flushing its mark first so the
    /// deletion is durable before the node becomes unreachable. Returns
    /// whether this call won the unlink; the winner retires the slot.
    fn trim(&self, handle: &ThreadHandle, pred: u64, curr: u64) -> bool {
        let curr_slot = handle_slot(curr);
        self.flush_delete(handle, curr_slot);
        let succ_word = mark::get_ref(self.next_load(curr));
        let won = self.next_cas(pred, enc(curr, false), succ_word);
        if won {
            handle.retire_slot(curr_slot);
        }
        won
    }

    /// Locates the window for `key`: `pred.key < key <= curr.key`. Marked
    /// nodes met on the way are trimmed.
    fn find(&self, handle: &ThreadHandle, key: i64) -> (u64, u64) {
        let mut pred = H_HEAD;
        let mut curr = word_handle(self.next_load(pred));
        loop {
            let w = self.next_load(curr);
            if !mark::is_marked(w) {
                if self.key(curr) >= key {
                    break;
                }
                pred = curr;
            } else {
                self.trim(handle, pred, curr);
            }
            curr = word_handle(self.next_load(curr));
        }
        (pred, curr)
    }

    /// Wait-free membership test. A `true` answer is durable before it is
    /// returned: the node is made valid and flushed, so the NVRAM view
    /// matches the answer. A marked hit is flushed before `false`.
    pub fn contains(&self, handle: &ThreadHandle, key: i64) -> bool {
        assert_user_key(key);
        let _op = handle.begin_op(OpTag::Contains);
        let mut curr = word_handle(self.next_load(H_HEAD));
        while self.key(curr) < key {
            curr = word_handle(self.next_load(curr));
        }
        if self.key(curr) != key {
            return false;
        }
        let curr_slot = handle_slot(curr);
        if mark::is_marked(self.next_load(curr)) {
            self.flush_delete(handle, curr_slot);
            return false;
        }
        self.make_valid(curr_slot);
        self.flush_insert(handle, curr_slot);
        true
    }

    /// Adds `key` if absent. A duplicate hit helps the existing node become
    /// valid and durable before reporting failure; otherwise the new node is
    /// initialized invalid, linked, made valid, and flushed.
    pub fn insert(&self, handle: &ThreadHandle, key: i64, value: i64) -> Result<bool, SetError> {
        assert_user_key(key);
        let _op = handle.begin_op(OpTag::Insert);
        let heap = Arc::clone(self.domain.heap());
        loop {
            let (pred, curr) = self.find(handle, key);
            if self.key(curr) == key {
                let curr_slot = handle_slot(curr);
                self.make_valid(curr_slot);
                self.flush_insert(handle, curr_slot);
                return Ok(false);
            }
            let slot = handle.alloc_slot()?;
            self.domain.emit_milestone(
                handle.index(),
                crate::domain::Milestone::LfAllocated {
                    slot,
                    validity: heap.load(slot, W_VALIDITY),
                },
            );
            self.flip_v1(slot);
            heap.fence(handle.stats());
            heap.store(slot, W_INS_FLAG, 0);
            heap.store(slot, W_DEL_FLAG, 0);
            heap.store(slot, W_INIT, 1);
            heap.store(slot, W_KEY, key as u64);
            heap.store(slot, W_VALUE, value as u64);
            heap.store(slot, W_NEXT, enc(curr, false));
            if self.next_cas(pred, enc(curr, false), enc(slot_handle(slot), false)) {
                self.make_valid(slot);
                self.flush_insert(handle, slot);
                return Ok(true);
            }
            // Lost the linking race. Return the slot to the free-list in an
            // allocation-ready shape that no crash can resurrect: mark its
            // link first, then re-equalize the validity bits.
            let w = heap.load(slot, W_NEXT);
            heap.store(slot, W_NEXT, mark::mark(w));
            self.flip_v1(slot);
            handle.free_slot(slot);
        }
    }

    /// Removes `key` if present: helps the node become valid, marks its
    /// link, then trims. The mark CAS is the logical removal; valid and
    /// marked share a cache line, so no psync is needed between them.
    pub fn remove(&self, handle: &ThreadHandle, key: i64) -> bool {
        assert_user_key(key);
        let _op = handle.begin_op(OpTag::Remove);
        loop {
            let (pred, curr) = self.find(handle, key);
            if self.key(curr) != key {
                return false;
            }
            let curr_slot = handle_slot(curr);
            let succ_word = mark::get_ref(self.next_load(curr));
            self.make_valid(curr_slot);
            if self.next_cas(curr, succ_word, mark::mark(succ_word)) {
                self.domain.emit_milestone(
                    handle.index(),
                    crate::domain::Milestone::LfMarked {
                        slot: curr_slot,
                        validity: self.domain.heap().load(curr_slot, W_VALIDITY),
                    },
                );
                self.trim(handle, pred, curr);
                return true;
            }
        }
    }

    /// Scans every durable-area slot of the recovered domain and splits it
    /// into survivors (initialized, valid, unmarked) and reclaimable slots.
    /// Reclaimable slots are restored to an allocation-ready shape and
    /// pushed to the adopting thread's free-list. No psyncs are issued.
    pub(crate) fn classify_slots(
        domain: &Arc<Domain>,
    ) -> Result<Vec<(i64, SlotRef)>, RecoveryError> {
        let heap = domain.heap();
        let alloc = domain.allocator();
        let mut survivors = Vec::new();
        for (owner, region, slot_count) in alloc.areas() {
            for s in 0..slot_count {
                let slot = SlotRef { region, slot: s };
                if heap.load(slot, W_INIT) == 0 {
                    alloc.free_slot(owner, slot);
                    continue;
                }
                let v = heap.load(slot, W_VALIDITY);
                let valid = (v & 1) == ((v >> 1) & 1);
                let marked = mark::is_marked(heap.load(slot, W_NEXT));
                if !valid {
                    // Mid-initialization casualty. Mark the link before
                    // re-equalizing the bits so no intermediate eviction can
                    // persist it as a live node.
                    let w = heap.load(slot, W_NEXT);
                    heap.store(slot, W_NEXT, mark::mark(w));
                    let v1 = v & 1;
                    heap.store(slot, W_VALIDITY, v1 | (v1 << 1));
                    alloc.free_slot(owner, slot);
                } else if marked {
                    alloc.free_slot(owner, slot);
                } else {
                    survivors.push((heap.load(slot, W_KEY) as i64, slot));
                }
            }
        }
        Ok(survivors)
    }

    /// Chains recovered slots, sorted, between fresh sentinels. Persisted
    /// next fields are ignored and overwritten; flush flags are set to
    /// reflect that the content is already durable.
    pub(crate) fn link_recovered(&self, sorted: &[(i64, SlotRef)]) {
        let heap = self.domain.heap();
        let mut next = H_TAIL;
        for (_, slot) in sorted.iter().rev() {
            heap.store(*slot, W_NEXT, enc(next, false));
            heap.store(*slot, W_INS_FLAG, 1);
            heap.store(*slot, W_DEL_FLAG, 0);
            next = slot_handle(*slot);
        }
        self.head_next.store(enc(next, false));
    }

    /// Rebuilds a list from the recovered domain: exactly the initialized,
    /// valid and unmarked persistent nodes survive; everything else is
    /// reclaimed. Flush-free.
    pub fn recover(handle: &ThreadHandle) -> Result<LfList, RecoveryError> {
        let _op = handle.begin_op(OpTag::Recover);
        let domain = Arc::clone(handle.domain());
        let mut survivors = Self::classify_slots(&domain)?;
        survivors.sort_by_key(|(k, _)| *k);
        for pair in survivors.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(RecoveryError::DuplicateKey(pair[0].0));
            }
        }
        let list = LfList::new(domain);
        list.link_recovered(&survivors);
        Ok(list)
    }

    /// Quiescent traversal of (key, value, marked, valid) for sweeps.
    pub fn debug_scan(&self) -> Vec<(i64, i64, bool, bool)> {
        let heap = self.domain.heap();
        let mut out = Vec::new();
        let mut curr = word_handle(self.next_load(H_HEAD));
        while curr != H_TAIL {
            assert!(out.len() < 1 << 26, "traversal did not terminate");
            let slot = handle_slot(curr);
            out.push((
                heap.load(slot, W_KEY) as i64,
                heap.load(slot, W_VALUE) as i64,
                mark::is_marked(heap.load(slot, W_NEXT)),
                self.is_valid(slot),
            ));
            curr = word_handle(self.next_load(curr));
        }
        out
    }

    /// Slots currently reachable from the head, including marked ones.
    pub fn debug_slots(&self) -> Vec<SlotRef> {
        let mut out = Vec::new();
        let mut curr = word_handle(self.next_load(H_HEAD));
        while curr != H_TAIL {
            assert!(out.len() < 1 << 26, "traversal did not terminate");
            out.push(handle_slot(curr));
            curr = word_handle(self.next_load(curr));
        }
        out
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }
}

impl DurableSet for LfList {
    fn contains(&self, handle: &ThreadHandle, key: i64) -> bool {
        LfList::contains(self, handle, key)
    }

    fn insert(&self, handle: &ThreadHandle, key: i64, value: i64) -> Result<bool, SetError> {
        LfList::insert(self, handle, key, value)
    }

    fn remove(&self, handle: &ThreadHandle, key: i64) -> bool {
        LfList::remove(self, handle, key)
    }
}
