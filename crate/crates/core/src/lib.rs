//! Lock-free durable sets over a simulated persistent-memory heap.
//!
//! Two set algorithms are provided, both keeping their persistent footprint
//! down to the nodes themselves (links are never flushed):
//!
//! * [`linkfree::LfList`] — a single-representation sorted list whose nodes
//!   carry a two-bit validity scheme, a Harris-style deletion mark and two
//!   flush flags that suppress redundant write-backs.
//! * [`soft::SoftList`] — a split persistent/volatile list whose volatile
//!   nodes carry a four-state tag in their successor link and whose updates
//!   issue at most one `psync` per thread.
//!
//! Both can back a fixed-table hash set ([`hashmap::HashSet`]).
//!
//! Persistence is simulated by [`pmem::Heap`]: every durable byte lives in a
//! cache-line shadow that tracks a volatile image, a persistent image, and
//! flush bookkeeping, so tests can crash the heap, enumerate legal surviving
//! states, and count every flush and fence a thread issues.

pub mod alloc;
pub mod domain;
pub mod hashmap;
pub mod linkfree;
pub mod pmem;
pub mod sched;
pub mod soft;
pub mod stats;
pub mod tagged;

pub use domain::{Domain, DomainConfig, ThreadHandle};
pub use pmem::{EvictionPolicy, Heap, HeapConfig, PersistentSnapshot, SlotRef};
pub use stats::OpTag;

use alloc::AllocError;

/// Error surfaced by set operations. Only allocation can fail.
#[derive(Debug, thiserror::Error)]
pub enum SetError {
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

/// Error surfaced by post-crash reconstruction.
#[derive(Debug, thiserror::Error)]
pub enum RecoveryError {
    /// Two distinct persistent nodes with the same key survived a crash.
    #[error("integrity fault: duplicate surviving key {0}")]
    DuplicateKey(i64),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

/// Common trait over both list variants and the hash set, used by the
/// benchmark and test harnesses.
pub trait DurableSet {
    fn contains(&self, handle: &ThreadHandle, key: i64) -> bool;
    fn insert(&self, handle: &ThreadHandle, key: i64, value: i64) -> Result<bool, SetError>;
    fn remove(&self, handle: &ThreadHandle, key: i64) -> bool;
}
