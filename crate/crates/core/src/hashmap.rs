//! Hash set built as a fixed table of buckets, each bucket one list of the
//! chosen variant. Bucketing is volatile: only node payloads are durable,
//! so recovery may rebuild the table with a different bucket count.

use std::sync::Arc;

use crate::domain::{Domain, ThreadHandle};
use crate::linkfree::LfList;
use crate::soft::SoftList;
use crate::{DurableSet, RecoveryError, SetError};

/// Fibonacci multiplicative hashing constant (2^64 / golden ratio), fixed
/// so bucket routing is reproducible across runs.
pub const HASH_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    LinkFree,
    Soft,
}

enum Buckets {
    LinkFree(Vec<LfList>),
    Soft(Vec<SoftList>),
}

/// A durable hash set: operations route to `hash(key) % bucket_count` and
/// inherit the bucket list's contracts wholesale.
pub struct HashSet {
    domain: Arc<Domain>,
    variant: Variant,
    buckets: Buckets,
}

fn bucket_of(key: i64, bucket_count: usize) -> usize {
    ((key as u64).wrapping_mul(HASH_MULTIPLIER) % bucket_count as u64) as usize
}

impl HashSet {
    pub fn new(domain: Arc<Domain>, variant: Variant, bucket_count: usize) -> HashSet {
        assert!(bucket_count > 0);
        let buckets = match variant {
            Variant::LinkFree => Buckets::LinkFree(
                (0..bucket_count)
                    .map(|_| LfList::new(Arc::clone(&domain)))
                    .collect(),
            ),
            Variant::Soft => Buckets::Soft(
                (0..bucket_count)
                    .map(|_| SoftList::new(Arc::clone(&domain)))
                    .collect(),
            ),
        };
        HashSet {
            domain,
            variant,
            buckets,
        }
    }

    pub fn bucket_count(&self) -> usize {
        match &self.buckets {
            Buckets::LinkFree(b) => b.len(),
            Buckets::Soft(b) => b.len(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn contains(&self, handle: &ThreadHandle, key: i64) -> bool {
        match &self.buckets {
            Buckets::LinkFree(b) => b[bucket_of(key, b.len())].contains(handle, key),
            Buckets::Soft(b) => b[bucket_of(key, b.len())].contains(handle, key),
        }
    }

    pub fn insert(&self, handle: &ThreadHandle, key: i64, value: i64) -> Result<bool, SetError> {
        match &self.buckets {
            Buckets::LinkFree(b) => b[bucket_of(key, b.len())].insert(handle, key, value),
            Buckets::Soft(b) => b[bucket_of(key, b.len())].insert(handle, key, value),
        }
    }

    pub fn remove(&self, handle: &ThreadHandle, key: i64) -> bool {
        match &self.buckets {
            Buckets::LinkFree(b) => b[bucket_of(key, b.len())].remove(handle, key),
            Buckets::Soft(b) => b[bucket_of(key, b.len())].remove(handle, key),
        }
    }

    /// Rebuilds a hash set from a recovered domain with one area scan: each
    /// surviving node is re-hashed into a fresh table, which may have a
    /// different bucket count than before the crash. Flush-free.
    pub fn recover(
        handle: &ThreadHandle,
        variant: Variant,
        bucket_count: usize,
    ) -> Result<HashSet, RecoveryError> {
        let _op = handle.begin_op(crate::stats::OpTag::Recover);
        let domain = Arc::clone(handle.domain());
        let set = HashSet::new(Arc::clone(&domain), variant, bucket_count);
        match (&set.buckets, variant) {
            (Buckets::LinkFree(buckets), Variant::LinkFree) => {
                let mut survivors = LfList::classify_slots(&domain)?;
                survivors.sort_by_key(|(k, _)| *k);
                for pair in survivors.windows(2) {
                    if pair[0].0 == pair[1].0 {
                        return Err(RecoveryError::DuplicateKey(pair[0].0));
                    }
                }
                for b in 0..bucket_count {
                    let mine: Vec<_> = survivors
                        .iter()
                        .filter(|(k, _)| bucket_of(*k, bucket_count) == b)
                        .copied()
                        .collect();
                    buckets[b].link_recovered(&mine);
                }
            }
            (Buckets::Soft(buckets), Variant::Soft) => {
                let mut survivors = SoftList::classify_slots(&domain)?;
                survivors.sort_by_key(|(k, ..)| *k);
                for pair in survivors.windows(2) {
                    if pair[0].0 == pair[1].0 {
                        return Err(RecoveryError::DuplicateKey(pair[0].0));
                    }
                }
                for b in 0..bucket_count {
                    let mine: Vec<_> = survivors
                        .iter()
                        .filter(|(k, ..)| bucket_of(*k, bucket_count) == b)
                        .copied()
                        .collect();
                    buckets[b].link_recovered(&mine);
                }
            }
            _ => unreachable!(),
        }
        Ok(set)
    }

    /// Sorted keys across all buckets (quiescent sweeps).
    pub fn debug_keys(&self) -> Vec<i64> {
        let mut keys: Vec<i64> = match &self.buckets {
            Buckets::LinkFree(b) => b
                .iter()
                .flat_map(|l| {
                    l.debug_scan()
                        .into_iter()
                        .filter(|(.., m, _)| !m)
                        .map(|(k, ..)| k)
                })
                .collect(),
            Buckets::Soft(b) => b
                .iter()
                .flat_map(|l| {
                    l.debug_scan()
                        .into_iter()
                        .filter(|(_, _, s, _)| {
                            *s == crate::soft::ST_INSERTED || *s == crate::soft::ST_INTEND_TO_DELETE
                        })
                        .map(|(k, ..)| k)
                })
                .collect(),
        };
        keys.sort_unstable();
        keys
    }

    /// Slots of nodes currently reachable in any bucket.
    pub fn debug_slots(&self) -> Vec<crate::pmem::SlotRef> {
        match &self.buckets {
            Buckets::LinkFree(b) => b.iter().flat_map(|l| l.debug_slots()).collect(),
            Buckets::Soft(b) => b.iter().flat_map(|l| l.debug_slots()).collect(),
        }
    }

    /// Per-bucket sorted key lists (for sweep checks).
    pub fn debug_bucket_keys(&self) -> Vec<Vec<i64>> {
        match &self.buckets {
            Buckets::LinkFree(b) => b
                .iter()
                .map(|l| l.debug_scan().into_iter().map(|(k, ..)| k).collect())
                .collect(),
            Buckets::Soft(b) => b
                .iter()
                .map(|l| l.debug_scan().into_iter().map(|(k, ..)| k).collect())
                .collect(),
        }
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }
}

impl DurableSet for HashSet {
    fn contains(&self, handle: &ThreadHandle, key: i64) -> bool {
        HashSet::contains(self, handle, key)
    }

    fn insert(&self, handle: &ThreadHandle, key: i64, value: i64) -> Result<bool, SetError> {
        HashSet::insert(self, handle, key, value)
    }

    fn remove(&self, handle: &ThreadHandle, key: i64) -> bool {
        HashSet::remove(self, handle, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainConfig;

    fn fresh(variant: Variant, buckets: usize) -> (Arc<Domain>, ThreadHandle, HashSet) {
        let domain = Domain::new(DomainConfig {
            area_slots: 64,
            ..DomainConfig::default()
        })
        .unwrap();
        let handle = domain.register_thread(0);
        let set = HashSet::new(Arc::clone(&domain), variant, buckets);
        (domain, handle, set)
    }

    #[test]
    fn both_variants_delegate() {
        for variant in [Variant::LinkFree, Variant::Soft] {
            let (_d, h, set) = fresh(variant, 4);
            assert!(set.insert(&h, 10, 1).unwrap());
            assert!(set.contains(&h, 10));
            assert!(!set.insert(&h, 10, 2).unwrap());
            assert!(set.remove(&h, 10));
            assert!(!set.contains(&h, 10));
        }
    }

    #[test]
    fn colliding_keys_behave_like_a_plain_list() {
        let (_d, h, set) = fresh(Variant::LinkFree, 1);
        for k in [5i64, 1, 9, 3] {
            set.insert(&h, k, k).unwrap();
        }
        assert_eq!(set.debug_keys(), vec![1, 3, 5, 9]);
    }

    #[test]
    fn uniform_keys_spread_close_to_load_factor_one() {
        // Table sized for load factor 1: mean occupancy is exactly 1 and
        // the multiplicative hash keeps the worst bucket small.
        let n = 10_000usize;
        let domain = Domain::new(DomainConfig {
            area_slots: 1024,
            ..DomainConfig::default()
        })
        .unwrap();
        let h = domain.register_thread(0);
        let set = HashSet::new(Arc::clone(&domain), Variant::Soft, n);
        for k in 1..=n as i64 {
            set.insert(&h, k, 0).unwrap();
        }
        let sizes: Vec<usize> = set.debug_bucket_keys().iter().map(|b| b.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
        let max = *sizes.iter().max().unwrap();
        assert!(max <= 12, "pathological clustering: max bucket {max}");
    }

    #[test]
    fn recover_with_different_bucket_count_keeps_the_key_set() {
        for variant in [Variant::LinkFree, Variant::Soft] {
            let domain = Domain::new(DomainConfig {
                area_slots: 16,
                ..DomainConfig::default()
            })
            .unwrap();
            let h = domain.register_thread(0);
            let set = HashSet::new(Arc::clone(&domain), variant, 4);
            for k in 1..=20i64 {
                set.insert(&h, k, k).unwrap();
            }
            for k in (1..=20i64).step_by(2) {
                set.remove(&h, k);
            }
            let snap = domain.heap().crash();
            let domain2 = Domain::recover(
                &snap,
                DomainConfig {
                    area_slots: 16,
                    ..DomainConfig::default()
                },
                1,
            )
            .unwrap();
            let h2 = domain2.register_thread(0);
            let before = domain2.thread_stats(0).psync_count();
            let recovered = HashSet::recover(&h2, variant, 8).unwrap();
            assert_eq!(domain2.thread_stats(0).psync_count(), before);
            let expect: Vec<i64> = (2..=20).step_by(2).collect();
            assert_eq!(recovered.debug_keys(), expect);
            // Per-bucket lists are sorted and duplicate-free.
            for bucket in recovered.debug_bucket_keys() {
                let mut sorted = bucket.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(bucket, sorted);
            }
            for k in 1..=20i64 {
                assert_eq!(recovered.contains(&h2, k), k % 2 == 0);
            }
        }
    }
}
