//! The SOFT list: sets with an optimal flushing technique.
//!
//! Every key has two representations. The *persistent node* (one durable
//! slot: three validity flags, key, value) is the only thing ever flushed.
//! The *volatile node* carries the links and a two-bit state in its own
//! successor pointer: `INTEND_TO_INSERT` → `INSERTED` → `INTEND_TO_DELETE`
//! → `DELETED`. The intention states let every racing thread help finish
//! the update — first writing the NVRAM, then flipping the state — so each
//! thread issues at most one psync per update and none per lookup.
//!
//! Persistent flags flip meaning per allocation generation: a slot starts
//! with all three flags equal (valid and removed). `create` moves the first
//! two flags to the negated value, `destroy` follows with the third, which
//! leaves the slot allocation-ready again.

use std::sync::Arc;

use crate::domain::{Domain, ThreadHandle};
use crate::pmem::SlotRef;
use crate::sched::SharedWord;
use crate::stats::OpTag;
use crate::tagged::state;
use crate::{DurableSet, RecoveryError, SetError};

/// PNode slot word layout; offsets fixed for snapshot portability.
pub const W_VALID_START: usize = 0;
pub const W_VALID_END: usize = 1;
pub const W_DELETED: usize = 2;
pub const W_KEY: usize = 3;
pub const W_VALUE: usize = 4;

/// Volatile node states, encoded in the two low bits of the node's own
/// `next` pointer. `DELETED` is 0b00 so a zeroed link decodes to a state
/// that traversals treat as removable rather than live.
pub const ST_DELETED: u64 = 0b00;
pub const ST_INSERTED: u64 = 0b01;
pub const ST_INTEND_TO_INSERT: u64 = 0b10;
pub const ST_INTEND_TO_DELETE: u64 = 0b11;

pub(crate) struct VNode {
    key: i64,
    value: i64,
    pslot: Option<SlotRef>,
    p_validity: bool,
    next: SharedWord,
}

fn vnode(raw: u64) -> &'static VNode {
    debug_assert_ne!(raw, 0);
    debug_assert_eq!(raw & state::STATE_MASK, 0);
    unsafe { &*(raw as *const VNode) }
}

fn assert_user_key(key: i64) {
    assert!(
        key != i64::MIN && key != i64::MAX,
        "sentinel keys are reserved"
    );
}

/// The SOFT list. Sentinel volatile nodes are permanently `INSERTED` and
/// have no persistent twin.
pub struct SoftList {
    domain: Arc<Domain>,
    head: *mut VNode,
    tail: *mut VNode,
}

// The raw sentinel pointers are owned by the list and only ever read
// concurrently; interior mutability is confined to atomic words.
unsafe impl Send for SoftList {}
unsafe impl Sync for SoftList {}

impl SoftList {
    pub fn new(domain: Arc<Domain>) -> SoftList {
        let tail = Box::into_raw(Box::new(VNode {
            key: i64::MAX,
            value: 0,
            pslot: None,
            p_validity: false,
            next: SharedWord::new(state::create_ref(0, ST_INSERTED)),
        }));
        let head = Box::into_raw(Box::new(VNode {
            key: i64::MIN,
            value: 0,
            pslot: None,
            p_validity: false,
            next: SharedWord::new(state::create_ref(tail as u64, ST_INSERTED)),
        }));
        SoftList { domain, head, tail }
    }

    /// `!validStart`: the flag value this slot generation will flip to.
    fn pnode_alloc(&self, slot: SlotRef) -> bool {
        self.domain.heap().load(slot, W_VALID_START) == 0
    }

    /// Writes the persistent node and flushes it: validStart, fence, key,
    /// value, validEnd, psync. Idempotent under helping races.
    fn pnode_create(
        &self,
        handle: &ThreadHandle,
        slot: SlotRef,
        key: i64,
        value: i64,
        p_validity: bool,
    ) {
        let heap = self.domain.heap();
        let v = p_validity as u64;
        heap.store(slot, W_VALID_START, v);
        heap.fence(handle.stats());
        heap.store(slot, W_KEY, key as u64);
        heap.store(slot, W_VALUE, value as u64);
        heap.store(slot, W_VALID_END, v);
        heap.psync(handle.stats(), slot);
        self.domain.emit_milestone(
            handle.index(),
            crate::domain::Milestone::SoftCreateDone { slot },
        );
    }

    /// Marks the persistent node removed and flushes it, returning the slot
    /// to its allocation-ready shape.
    fn pnode_destroy(&self, handle: &ThreadHandle, slot: SlotRef, p_validity: bool) {
        let heap = self.domain.heap();
        heap.store(slot, W_DELETED, p_validity as u64);
        heap.psync(handle.stats(), slot);
        self.domain.emit_milestone(
            handle.index(),
            crate::domain::Milestone::SoftDestroyDone { slot },
        );
    }

    /// Replaces the state tag while preserving the address, failing if the
    /// current tag differs from `old_state`.
    fn state_cas(&self, word: &SharedWord, old_state: u64, new_state: u64) -> bool {
        debug_assert!(
            matches!(
                (old_state, new_state),
                (ST_INTEND_TO_INSERT, ST_INSERTED)
                    | (ST_INSERTED, ST_INTEND_TO_DELETE)
                    | (ST_INTEND_TO_DELETE, ST_DELETED)
            ),
            "illegal state transition"
        );
        let old = word.load();
        word.compare_exchange(
            state::create_ref(state::get_ref(old), old_state),
            state::create_ref(state::get_ref(old), new_state),
        )
    }

    /// Unlinks a `DELETED` node. No psync: the deletion already persisted
    /// before the state became `DELETED`, so unlinking is always safe.
    fn trim(&self, handle: &ThreadHandle, pred: u64, curr: u64) -> bool {
        let pred_state = state::get_state(curr);
        let curr_ref = state::get_ref(curr);
        let succ = state::get_ref(vnode(curr_ref).next.load());
        let new_word = state::create_ref(succ, pred_state);
        let won = vnode(pred).next.compare_exchange(curr, new_word);
        if won {
            if let Some(slot) = vnode(curr_ref).pslot {
                handle.retire_slot(slot);
            }
            let raw = curr_ref as usize;
            handle.retire_deferred(Box::new(move || unsafe {
                drop(Box::from_raw(raw as *mut VNode));
            }));
        }
        won
    }

    /// Window search. Returns the predecessor (untagged), the tagged word
    /// under which `curr` hangs off `pred`, and `curr`'s own state.
    /// `DELETED` nodes on the way are trimmed, without any psync.
    fn find(&self, handle: &ThreadHandle, key: i64) -> (u64, u64, u64) {
        let mut pred = self.head as u64;
        let mut curr = vnode(pred).next.load();
        let mut curr_ref = state::get_ref(curr);
        let mut pred_state = state::get_state(curr);
        let c_state;
        loop {
            let succ = vnode(curr_ref).next.load();
            let succ_ref = state::get_ref(succ);
            let s = state::get_state(succ);
            if s != ST_DELETED {
                if vnode(curr_ref).key >= key {
                    c_state = s;
                    break;
                }
                pred = curr_ref;
                pred_state = s;
            } else {
                self.trim(handle, pred, curr);
            }
            curr = state::create_ref(succ_ref, pred_state);
            curr_ref = succ_ref;
        }
        (pred, curr, c_state)
    }

    /// Wait-free lookup; zero psyncs and zero fences in every execution. A
    /// node counts as present exactly when its state is `INSERTED` or
    /// `INTEND_TO_DELETE`.
    pub fn contains(&self, handle: &ThreadHandle, key: i64) -> bool {
        assert_user_key(key);
        let _op = handle.begin_op(OpTag::Contains);
        let mut curr = state::get_ref(vnode(self.head as u64).next.load());
        while vnode(curr).key < key {
            curr = state::get_ref(vnode(curr).next.load());
        }
        let curr_state = state::get_state(vnode(curr).next.load());
        if vnode(curr).key != key {
            return false;
        }
        !(curr_state == ST_DELETED || curr_state == ST_INTEND_TO_INSERT)
    }

    /// Adds `key` if absent. The new node is linked in `INTEND_TO_INSERT`,
    /// its persistent node is created (the single psync), and only then does
    /// the state flip to `INSERTED` — the NVRAM is ahead of the volatile
    /// view. Finding the key mid-insertion helps finish it before failing.
    pub fn insert(&self, handle: &ThreadHandle, key: i64, value: i64) -> Result<bool, SetError> {
        assert_user_key(key);
        let _op = handle.begin_op(OpTag::Insert);
        let result_node;
        let mut result = false;
        loop {
            let (pred, curr, curr_state) = self.find(handle, key);
            let curr_ref = state::get_ref(curr);
            let pred_state = state::get_state(curr);
            if vnode(curr_ref).key == key {
                if curr_state != ST_INTEND_TO_INSERT {
                    return Ok(false);
                }
                result_node = curr_ref;
                break;
            }
            let pslot = handle.alloc_slot()?;
            let p_validity = self.pnode_alloc(pslot);
            let new_node = Box::into_raw(Box::new(VNode {
                key,
                value,
                pslot: Some(pslot),
                p_validity,
                next: SharedWord::new(state::create_ref(curr_ref, ST_INTEND_TO_INSERT)),
            }));
            if !vnode(pred)
                .next
                .compare_exchange(curr, state::create_ref(new_node as u64, pred_state))
            {
                // Lost the linking race; the pair was never published.
                unsafe { drop(Box::from_raw(new_node)) };
                handle.free_slot(pslot);
                continue;
            }
            self.domain.emit_milestone(
                handle.index(),
                crate::domain::Milestone::SoftLinked {
                    slot: pslot,
                    p_validity,
                },
            );
            result_node = new_node as u64;
            result = true;
            break;
        }
        let n = vnode(result_node);
        self.pnode_create(handle, n.pslot.unwrap(), n.key, n.value, n.p_validity);
        while state::get_state(n.next.load()) == ST_INTEND_TO_INSERT {
            self.state_cas(&n.next, ST_INTEND_TO_INSERT, ST_INSERTED);
        }
        Ok(result)
    }

    /// Removes `key` if present. Racing removers compete on the
    /// `INSERTED` → `INTEND_TO_DELETE` transition; the winner returns true
    /// and trims, but every racer helps destroy the persistent node and
    /// complete the `DELETED` transition.
    pub fn remove(&self, handle: &ThreadHandle, key: i64) -> bool {
        assert_user_key(key);
        let _op = handle.begin_op(OpTag::Remove);
        let mut result = false;
        let (pred, curr, curr_state) = self.find(handle, key);
        let curr_ref = state::get_ref(curr);
        if vnode(curr_ref).key != key {
            return false;
        }
        if curr_state == ST_INTEND_TO_INSERT {
            // Not guaranteed to have a valid persistent node yet.
            return false;
        }
        let n = vnode(curr_ref);
        while !result && state::get_state(n.next.load()) == ST_INSERTED {
            result = self.state_cas(&n.next, ST_INSERTED, ST_INTEND_TO_DELETE);
        }
        if result {
            self.domain.emit_milestone(
                handle.index(),
                crate::domain::Milestone::SoftItdWon {
                    slot: n.pslot.unwrap(),
                    p_validity: n.p_validity,
                },
            );
        }
        self.pnode_destroy(handle, n.pslot.unwrap(), n.p_validity);
        while state::get_state(n.next.load()) == ST_INTEND_TO_DELETE {
            self.state_cas(&n.next, ST_INTEND_TO_DELETE, ST_DELETED);
        }
        if result {
            self.trim(handle, pred, curr);
        }
        result
    }

    /// Splits every durable slot of the recovered domain into survivors
    /// (validStart == validEnd != deleted) and reclaimable slots, restoring
    /// the latter to the allocation-ready all-equal shape. Flush-free.
    pub(crate) fn classify_slots(
        domain: &Arc<Domain>,
    ) -> Result<Vec<(i64, i64, SlotRef, bool)>, RecoveryError> {
        let heap = domain.heap();
        let alloc = domain.allocator();
        let mut survivors = Vec::new();
        for (owner, region, slot_count) in alloc.areas() {
            for s in 0..slot_count {
                let slot = SlotRef { region, slot: s };
                let vs = heap.load(slot, W_VALID_START);
                let ve = heap.load(slot, W_VALID_END);
                let del = heap.load(slot, W_DELETED);
                if vs == ve && del != vs {
                    survivors.push((
                        heap.load(slot, W_KEY) as i64,
                        heap.load(slot, W_VALUE) as i64,
                        slot,
                        vs != 0,
                    ));
                } else {
                    if vs != ve {
                        // Mid-create casualty: restore to all-equal, writing
                        // `deleted` first so no eviction can surface the
                        // slot as valid and not removed.
                        heap.store(slot, W_DELETED, vs);
                        heap.store(slot, W_VALID_END, vs);
                    }
                    alloc.free_slot(owner, slot);
                }
            }
        }
        Ok(survivors)
    }

    /// Rebuilds a list from the recovered domain: one fresh `INSERTED`
    /// volatile node per surviving persistent node, linked sorted, zero
    /// psyncs.
    pub fn recover(handle: &ThreadHandle) -> Result<SoftList, RecoveryError> {
        let _op = handle.begin_op(OpTag::Recover);
        let domain = Arc::clone(handle.domain());
        let mut survivors = Self::classify_slots(&domain)?;
        survivors.sort_by_key(|(k, ..)| *k);
        for pair in survivors.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(RecoveryError::DuplicateKey(pair[0].0));
            }
        }
        let list = SoftList::new(domain);
        list.link_recovered(&survivors);
        Ok(list)
    }

    pub(crate) fn link_recovered(&self, sorted: &[(i64, i64, SlotRef, bool)]) {
        let mut next = self.tail as u64;
        for (key, value, slot, p_validity) in sorted.iter().rev() {
            let node = Box::into_raw(Box::new(VNode {
                key: *key,
                value: *value,
                pslot: Some(*slot),
                p_validity: *p_validity,
                next: SharedWord::new(state::create_ref(next, ST_INSERTED)),
            }));
            next = node as u64;
        }
        vnode(self.head as u64)
            .next
            .store(state::create_ref(next, ST_INSERTED));
    }

    /// Quiescent traversal of (key, value, state, pslot) for sweeps,
    /// including `DELETED` nodes that are still linked.
    pub fn debug_scan(&self) -> Vec<(i64, i64, u64, Option<SlotRef>)> {
        let mut out = Vec::new();
        let mut curr = state::get_ref(vnode(self.head as u64).next.load());
        while curr != self.tail as u64 {
            assert!(out.len() < 1 << 26, "traversal did not terminate");
            let n = vnode(curr);
            out.push((n.key, n.value, state::get_state(n.next.load()), n.pslot));
            curr = state::get_ref(n.next.load());
        }
        out
    }

    /// Slots of nodes currently reachable from the head.
    pub fn debug_slots(&self) -> Vec<SlotRef> {
        self.debug_scan().iter().filter_map(|(.., s)| *s).collect()
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    /// Forces the state of a reachable key (test scaffolding for helper and
    /// crash paths).
    #[doc(hidden)]
    pub fn force_state(&self, key: i64, from: u64, to: u64) -> bool {
        let mut curr = state::get_ref(vnode(self.head as u64).next.load());
        while vnode(curr).key < key {
            curr = state::get_ref(vnode(curr).next.load());
        }
        if vnode(curr).key != key {
            return false;
        }
        self.state_cas(&vnode(curr).next, from, to)
    }
}

impl Drop for SoftList {
    fn drop(&mut self) {
        // Exclusive at drop: free every node still linked, then the
        // sentinels. Unlinked nodes are freed by their retire closures.
        let mut curr = state::get_ref(vnode(self.head as u64).next.load());
        while curr != self.tail as u64 {
            let next = state::get_ref(vnode(curr).next.load());
            unsafe { drop(Box::from_raw(curr as *mut VNode)) };
            curr = next;
        }
        unsafe {
            drop(Box::from_raw(self.head));
            drop(Box::from_raw(self.tail));
        }
    }
}

impl DurableSet for SoftList {
    fn contains(&self, handle: &ThreadHandle, key: i64) -> bool {
        SoftList::contains(self, handle, key)
    }

    fn insert(&self, handle: &ThreadHandle, key: i64, value: i64) -> Result<bool, SetError> {
        SoftList::insert(self, handle, key, value)
    }

    fn remove(&self, handle: &ThreadHandle, key: i64) -> bool {
        SoftList::remove(self, handle, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainConfig;

    fn fresh(area_slots: usize) -> (Arc<Domain>, ThreadHandle, SoftList) {
        let domain = Domain::new(DomainConfig {
            area_slots,
            ..DomainConfig::default()
        })
        .unwrap();
        let handle = domain.register_thread(0);
        let list = SoftList::new(Arc::clone(&domain));
        (domain, handle, list)
    }

    fn recover_domain(
        snap: &crate::pmem::PersistentSnapshot,
        area_slots: usize,
    ) -> (Arc<Domain>, ThreadHandle) {
        let domain = Domain::recover(
            snap,
            DomainConfig {
                area_slots,
                ..DomainConfig::default()
            },
            1,
        )
        .unwrap();
        let handle = domain.register_thread(0);
        (domain, handle)
    }

    #[test]
    fn pnode_alloc_reads_generation() {
        let (d, h, list) = fresh(8);
        let slot = h.alloc_slot().unwrap();
        assert!(list.pnode_alloc(slot)); // fresh zeroed slot
        assert!(list.pnode_alloc(slot)); // pure read, repeatable
        for w in [W_VALID_START, W_VALID_END, W_DELETED] {
            d.heap().store(slot, w, 1);
        }
        assert!(!list.pnode_alloc(slot)); // recycled all-true slot
    }

    #[test]
    fn create_then_destroy_round_trips_the_generation() {
        let (d, h, list) = fresh(8);
        let slot = h.alloc_slot().unwrap();
        let v = list.pnode_alloc(slot);
        list.pnode_create(&h, slot, 9, 90, v);
        assert_eq!(h.stats().algo_psync_count(), 1);
        // Valid and not removed.
        assert_eq!(d.heap().persistent_word(slot, W_VALID_START), 1);
        assert_eq!(d.heap().persistent_word(slot, W_VALID_END), 1);
        assert_eq!(d.heap().persistent_word(slot, W_DELETED), 0);
        list.pnode_destroy(&h, slot, v);
        assert_eq!(h.stats().algo_psync_count(), 2);
        // All flags equal again: allocation-ready, next generation negates.
        assert!(!list.pnode_alloc(slot));
    }

    #[test]
    fn basic_set_semantics() {
        let (_d, h, list) = fresh(16);
        assert!(!list.contains(&h, 3));
        assert!(list.insert(&h, 3, 30).unwrap());
        assert!(list.contains(&h, 3));
        assert!(!list.insert(&h, 3, 31).unwrap());
        assert!(list.remove(&h, 3));
        assert!(!list.contains(&h, 3));
        assert!(!list.remove(&h, 3));
    }

    #[test]
    fn psync_budget_exact_single_threaded() {
        let (_d, h, list) = fresh(2048);
        let n = 100u64;
        for k in 0..n as i64 {
            assert!(list.insert(&h, k, k).unwrap());
        }
        let (ops, psyncs, max, _) = h.stats().op_totals(OpTag::Insert);
        assert_eq!((ops, psyncs, max), (n, n, 1));
        for k in 0..n as i64 {
            assert!(list.contains(&h, k));
        }
        let (cops, cpsyncs, cmax, cfences) = h.stats().op_totals(OpTag::Contains);
        assert_eq!((cops, cpsyncs, cmax, cfences), (n, 0, 0, 0));
        for k in 0..n as i64 {
            assert!(list.remove(&h, k));
        }
        let (rops, rpsyncs, rmax, _) = h.stats().op_totals(OpTag::Remove);
        assert_eq!((rops, rpsyncs, rmax), (n, n, 1));
    }

    #[test]
    fn failed_operations_flush_nothing() {
        let (_d, h, list) = fresh(16);
        list.insert(&h, 5, 50).unwrap();
        let before = h.stats().psync_count();
        assert!(!list.insert(&h, 5, 51).unwrap()); // duplicate of INSERTED key
        assert!(!list.remove(&h, 6)); // absent key
        assert!(!list.contains(&h, 6));
        assert_eq!(h.stats().psync_count(), before);
    }

    #[test]
    fn contains_state_rules() {
        let (_d, h, list) = fresh(16);
        list.insert(&h, 5, 50).unwrap();
        // INSERTED -> present.
        assert!(list.contains(&h, 5));
        // INTEND_TO_DELETE: still present, a remover is mid-flight.
        assert!(list.force_state(5, ST_INSERTED, ST_INTEND_TO_DELETE));
        assert!(list.contains(&h, 5));
    }

    #[test]
    fn intend_to_insert_is_not_in_the_set_and_remove_fails_on_it() {
        let (_d, h, list) = fresh(16);
        // Build a node stuck in INTEND_TO_INSERT: link manually.
        let pslot = h.alloc_slot().unwrap();
        let p_validity = list.pnode_alloc(pslot);
        let (_, curr, _) = list.find(&h, 7);
        let curr_ref = state::get_ref(curr);
        let pred_state = state::get_state(curr);
        let stuck = Box::into_raw(Box::new(VNode {
            key: 7,
            value: 70,
            pslot: Some(pslot),
            p_validity,
            next: SharedWord::new(state::create_ref(curr_ref, ST_INTEND_TO_INSERT)),
        }));
        assert!(vnode(list.head as u64)
            .next
            .compare_exchange(curr, state::create_ref(stuck as u64, pred_state)));
        assert!(!list.contains(&h, 7));
        let before = h.stats().psync_count();
        assert!(!list.remove(&h, 7));
        assert_eq!(h.stats().psync_count(), before);
    }

    #[test]
    fn insert_helps_a_stuck_insertion_before_failing() {
        let (d, h, list) = fresh(16);
        let pslot = h.alloc_slot().unwrap();
        let p_validity = list.pnode_alloc(pslot);
        let (_, curr, _) = list.find(&h, 7);
        let curr_ref = state::get_ref(curr);
        let pred_state = state::get_state(curr);
        let stuck = Box::into_raw(Box::new(VNode {
            key: 7,
            value: 70,
            pslot: Some(pslot),
            p_validity,
            next: SharedWord::new(state::create_ref(curr_ref, ST_INTEND_TO_INSERT)),
        }));
        assert!(vnode(list.head as u64)
            .next
            .compare_exchange(curr, state::create_ref(stuck as u64, pred_state)));

        let before = h.stats().psync_count();
        // The helper fails the insert but completes the stuck one: creates
        // the persistent node (one psync) and flips the state.
        assert!(!list.insert(&h, 7, 71).unwrap());
        assert_eq!(h.stats().psync_count(), before + 1);
        assert!(list.contains(&h, 7));
        assert_eq!(d.heap().persistent_word(pslot, W_KEY), 7);
        assert_eq!(d.heap().persistent_word(pslot, W_VALUE), 70); // helped values, not the helper's
    }

    #[test]
    fn remove_helps_a_pending_removal_and_still_fails() {
        let (_d, h, list) = fresh(16);
        list.insert(&h, 5, 50).unwrap();
        assert!(list.force_state(5, ST_INSERTED, ST_INTEND_TO_DELETE));
        let before = h.stats().psync_count();
        // Loser of the intend-to-delete race: helps destroy (1 psync) and
        // finish the transition, then reports failure.
        assert!(!list.remove(&h, 5));
        assert_eq!(h.stats().psync_count(), before + 1);
        assert!(!list.contains(&h, 5));
    }

    #[test]
    fn recovery_keeps_created_and_drops_destroyed_and_invalid() {
        let (d, h, list) = fresh(8);
        for k in [1i64, 2, 3] {
            list.insert(&h, k, k * 10).unwrap();
        }
        list.remove(&h, 2);
        // A mid-create casualty: validStart flipped and psynced, rest unwritten.
        let partial = h.alloc_slot().unwrap();
        d.heap().store(partial, W_VALID_START, 1);
        d.heap().store(partial, W_KEY, 9);
        d.heap().psync(h.stats(), partial);

        let snap = d.heap().crash();
        let (domain2, h2) = recover_domain(&snap, 8);
        let before = domain2.thread_stats(0).psync_count();
        let recovered = SoftList::recover(&h2).unwrap();
        assert_eq!(
            domain2.thread_stats(0).psync_count(),
            before,
            "recovery is flush-free"
        );
        let keys: Vec<i64> = recovered.debug_scan().iter().map(|(k, ..)| *k).collect();
        assert_eq!(keys, vec![1, 3]);
        assert!(!recovered.contains(&h2, 9));
        // pValidity adopted from validStart.
        assert!(recovered.insert(&h2, 2, 20).unwrap());
        assert!(recovered.remove(&h2, 2));
    }

    #[test]
    fn crash_mid_remove_semantics() {
        // Destroy psynced -> excluded; crash before destroy -> included.
        for destroyed in [true, false] {
            let (d, h, list) = fresh(8);
            list.insert(&h, 7, 70).unwrap();
            assert!(list.force_state(7, ST_INSERTED, ST_INTEND_TO_DELETE));
            if destroyed {
                let slot = list.debug_slots()[0];
                list.pnode_destroy(&h, slot, true);
            }
            let snap = d.heap().crash();
            let (_domain2, h2) = recover_domain(&snap, 8);
            let recovered = SoftList::recover(&h2).unwrap();
            assert_eq!(recovered.contains(&h2, 7), !destroyed);
        }
    }

    #[test]
    fn crash_after_link_before_create_loses_the_key() {
        let (d, h, list) = fresh(8);
        // Linked in INTEND_TO_INSERT, persistent node never created.
        let pslot = h.alloc_slot().unwrap();
        let p_validity = list.pnode_alloc(pslot);
        let (_, curr, _) = list.find(&h, 7);
        let curr_ref = state::get_ref(curr);
        let pred_state = state::get_state(curr);
        let stuck = Box::into_raw(Box::new(VNode {
            key: 7,
            value: 70,
            pslot: Some(pslot),
            p_validity,
            next: SharedWord::new(state::create_ref(curr_ref, ST_INTEND_TO_INSERT)),
        }));
        assert!(vnode(list.head as u64)
            .next
            .compare_exchange(curr, state::create_ref(stuck as u64, pred_state)));
        let snap = d.heap().crash();
        let (_domain2, h2) = recover_domain(&snap, 8);
        let recovered = SoftList::recover(&h2).unwrap();
        assert!(!recovered.contains(&h2, 7));
    }

    #[test]
    fn recycled_pnode_flips_parity_across_generations() {
        let domain = Domain::new(DomainConfig {
            area_slots: 1,
            area_budget: 4,
            ..DomainConfig::default()
        })
        .unwrap();
        let h = domain.register_thread(0);
        let list = SoftList::new(Arc::clone(&domain));
        assert!(list.insert(&h, 1, 10).unwrap());
        assert!(list.remove(&h, 1));
        domain.allocator().try_reclaim(0);
        domain.allocator().try_reclaim(0);
        assert!(list.insert(&h, 2, 20).unwrap());
        assert_eq!(domain.allocator().areas().len(), 1, "slot was recycled");
        let snap = domain.heap().crash();
        let (_domain2, h2) = recover_domain(&snap, 1);
        let recovered = SoftList::recover(&h2).unwrap();
        assert!(recovered.contains(&h2, 2));
        assert!(!recovered.contains(&h2, 1));
    }

    #[test]
    fn recovery_rejects_duplicate_valid_keys() {
        let (d, h, list) = fresh(8);
        list.insert(&h, 4, 40).unwrap();
        // Forge a second created persistent node with the same key.
        let forged = h.alloc_slot().unwrap();
        let v = list.pnode_alloc(forged);
        list.pnode_create(&h, forged, 4, 41, v);
        let snap = d.heap().crash();
        let (_domain2, h2) = recover_domain(&snap, 8);
        assert!(matches!(
            SoftList::recover(&h2),
            Err(crate::RecoveryError::DuplicateKey(4))
        ));
    }

    #[test]
    fn sorted_unique_traversal() {
        let (_d, h, list) = fresh(64);
        for k in [9i64, 1, 5, 3, 7, 5] {
            list.insert(&h, k, 0).unwrap();
        }
        let keys: Vec<i64> = list.debug_scan().iter().map(|(k, ..)| *k).collect();
        assert_eq!(keys, vec![1, 3, 5, 7, 9]);
    }
}
