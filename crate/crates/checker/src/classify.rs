//! Diagnostic classification of crash-pending operations.
//!
//! For each operation cut off by the crash, decide from the milestone log
//! and the crash snapshot whether the recovery semantics commit it:
//!
//! * a link-free insert survives when its (final) node persisted valid in
//!   its new generation — it was made valid and flushed, marked or not;
//! * a link-free remove survives when its victim persisted marked;
//! * a SOFT insert survives when its node was linked and its persistent
//!   node persisted as created (valid and not removed in its generation);
//! * a SOFT remove survives when it won the intend-to-delete race and the
//!   victim's persistent node persisted as removed.
//!
//! Labels explain checker outcomes; the durable-linearizability verdict
//! never depends on them.

use durable_sets::domain::Milestone;
use durable_sets::pmem::{PersistentSnapshot, SlotRef};
use durable_sets::tagged::mark;
use durable_sets::{linkfree, soft};

use crate::history::{History, OpKind};
use crate::scenario::MilestoneRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurvivalLabel {
    /// Completed before the crash, or pending with its durable effect
    /// committed.
    Survived,
    /// Pending and its effect did not reach the NVRAM.
    NotSurvived,
    /// Pending lookup: it has no effect to commit.
    NotApplicable,
}

/// Labels one history's operations; index matches the extracted op ids.
/// Supports single-crash histories (every milestone precedes the crash).
pub fn classify_surviving(
    history: &History,
    milestones: &[MilestoneRecord],
    snapshot: &PersistentSnapshot,
) -> Vec<SurvivalLabel> {
    let ops = history
        .extract_ops(64)
        .expect("classify requires a well-formed history");
    ops.iter()
        .map(|op| {
            if !op.pending() {
                return SurvivalLabel::Survived;
            }
            match op.op {
                OpKind::Contains => SurvivalLabel::NotApplicable,
                OpKind::Insert => classify_insert(op.thread, op.invoke, milestones, snapshot),
                OpKind::Remove => classify_remove(op.thread, op.invoke, milestones, snapshot),
            }
        })
        .collect()
}

fn classify_insert(
    thread: usize,
    invoke: u64,
    milestones: &[MilestoneRecord],
    snapshot: &PersistentSnapshot,
) -> SurvivalLabel {
    // Link-free: the last slot this thread's attempt allocated (earlier
    // attempts lost their CAS and were recycled thread-locally).
    let lf = milestones
        .iter()
        .filter(|m| m.thread == thread && m.seq > invoke)
        .filter_map(|m| match m.milestone {
            Milestone::LfAllocated { slot, validity } => Some((slot, validity)),
            _ => None,
        })
        .last();
    if let Some((slot, validity_at_alloc)) = lf {
        let b = validity_at_alloc & 1;
        let new_gen_valid = (b ^ 1) | ((b ^ 1) << 1);
        let persisted = snapshot.word(slot, linkfree::W_VALIDITY) & 0b11;
        let initialized = snapshot.word(slot, linkfree::W_INIT) == 1;
        return if initialized && persisted == new_gen_valid {
            SurvivalLabel::Survived
        } else {
            SurvivalLabel::NotSurvived
        };
    }
    // SOFT: linked by this thread, and the persistent node reached the
    // NVRAM as valid-not-removed in this generation — by the create's psync
    // or by an implicit write-back of the fully written node.
    let linked = milestones
        .iter()
        .filter(|m| m.thread == thread && m.seq > invoke)
        .filter_map(|m| match m.milestone {
            Milestone::SoftLinked { slot, p_validity } => Some((slot, p_validity)),
            _ => None,
        })
        .last();
    match linked {
        Some((slot, p_validity)) if soft_persisted_created(snapshot, slot, p_validity) => {
            SurvivalLabel::Survived
        }
        _ => SurvivalLabel::NotSurvived,
    }
}

fn soft_persisted_created(snapshot: &PersistentSnapshot, slot: SlotRef, p_validity: bool) -> bool {
    let v = p_validity as u64;
    snapshot.word(slot, soft::W_VALID_START) == v
        && snapshot.word(slot, soft::W_VALID_END) == v
        && snapshot.word(slot, soft::W_DELETED) != v
}

fn soft_persisted_destroyed(
    snapshot: &PersistentSnapshot,
    slot: SlotRef,
    p_validity: bool,
) -> bool {
    let v = p_validity as u64;
    snapshot.word(slot, soft::W_VALID_START) == v
        && snapshot.word(slot, soft::W_VALID_END) == v
        && snapshot.word(slot, soft::W_DELETED) == v
}

fn classify_remove(
    thread: usize,
    invoke: u64,
    milestones: &[MilestoneRecord],
    snapshot: &PersistentSnapshot,
) -> SurvivalLabel {
    let lf = milestones
        .iter()
        .filter(|m| m.thread == thread && m.seq > invoke)
        .filter_map(|m| match m.milestone {
            Milestone::LfMarked { slot, validity } => Some((slot, validity)),
            _ => None,
        })
        .last();
    if let Some((slot, validity_at_mark)) = lf {
        let persisted_validity = snapshot.word(slot, linkfree::W_VALIDITY) & 0b11;
        let persisted_marked = mark::is_marked(snapshot.word(slot, linkfree::W_NEXT));
        return if persisted_marked && persisted_validity == validity_at_mark & 0b11 {
            SurvivalLabel::Survived
        } else {
            SurvivalLabel::NotSurvived
        };
    }
    let won = milestones
        .iter()
        .filter(|m| m.thread == thread && m.seq > invoke)
        .filter_map(|m| match m.milestone {
            Milestone::SoftItdWon { slot, p_validity } => Some((slot, p_validity)),
            _ => None,
        })
        .last();
    match won {
        Some((slot, p_validity)) if soft_persisted_destroyed(snapshot, slot, p_validity) => {
            SurvivalLabel::Survived
        }
        _ => SurvivalLabel::NotSurvived,
    }
}
