//! Simulated persistent memory.
//!
//! Durable data lives in regions of fixed-size slots. Every cache line of a
//! region is shadowed twice: a *volatile image* (what running threads read
//! and write) and a *persistent image* (what survives a crash). The two are
//! reconciled only by explicit [`Heap::psync`] calls or by implicit
//! write-backs drawn from the configured [`EvictionPolicy`]. A persistent
//! image is always a whole-line snapshot of the volatile image at a single
//! past instant, never a mix of two instants; same-line stores therefore
//! persist in program order.
//!
//! [`Heap::crash`] freezes the persistent images into a
//! [`PersistentSnapshot`] and poisons the heap: the volatile side is gone,
//! and recovery code must rebuild everything from the snapshot via
//! [`Heap::from_snapshot`].

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sched;
use crate::stats::ThreadStats;

/// Bytes per simulated cache line. Node types are padded to exactly one
/// line so a single psync covers a whole node.
pub const LINE_SIZE: usize = 64;
const WORDS_PER_LINE: usize = LINE_SIZE / 8;

/// How the simulation performs implicit write-backs. Lines may reach the
/// persistent medium even when no explicit flush was executed; the policy
/// controls when.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvictionPolicy {
    /// Persistent images change only on explicit psync.
    None,
    /// After each store, the written line is evicted with this probability.
    RandomRate(f64),
    /// No evictions during the run; at crash time every dirty line either
    /// keeps its last flushed image or advances to the current volatile
    /// image, chosen per line by the seeded RNG.
    AdversarialAtCrash,
}

#[derive(Debug, Clone)]
pub struct HeapConfig {
    pub eviction: EvictionPolicy,
    pub rng_seed: u64,
    /// Record every store's whole-line image so tests can enumerate the
    /// legal persisted states of a line. Costs memory; off by default.
    pub write_log: bool,
    pub max_regions: usize,
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig {
            eviction: EvictionPolicy::None,
            rng_seed: 0,
            write_log: false,
            max_regions: 1 << 15,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PmemError {
    #[error("region capacity exhausted ({0} regions)")]
    CapacityExhausted(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad snapshot magic")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    BadVersion(u32),
    #[error("snapshot truncated")]
    Truncated,
}

/// Identifies one region of the heap. Ids are dense and stable for the
/// process lifetime, and survive crashes via the snapshot region table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub u32);

/// One fixed-size slot of a region. All durable node types occupy exactly
/// one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotRef {
    pub region: RegionId,
    pub slot: u32,
}

impl SlotRef {
    /// Packs into 47 bits (region below 2^15, slot below 2^32) so list code
    /// can steal low pointer bits for marks and state tags.
    pub fn pack(self) -> u64 {
        debug_assert!(self.region.0 < (1 << 15));
        ((self.region.0 as u64) << 32) | self.slot as u64
    }

    pub fn unpack(raw: u64) -> SlotRef {
        SlotRef {
            region: RegionId((raw >> 32) as u32),
            slot: raw as u32,
        }
    }
}

/// A write-log record: the line's whole image right after the store that
/// produced `version`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineRecord {
    pub version: u64,
    pub image: Vec<u64>,
}

struct LineMeta {
    persistent: [u64; WORDS_PER_LINE],
    /// Monotone count of stores to this line.
    version: u64,
    /// Version captured by the most recent write-back of any kind.
    flushed_version: u64,
    /// Version captured by the most recent explicit psync.
    psync_version: u64,
    log: Option<Vec<LineRecord>>,
}

struct Line {
    words: [AtomicU64; WORDS_PER_LINE],
    meta: Mutex<LineMeta>,
}

impl Line {
    fn new(log: bool) -> Line {
        Line {
            words: Default::default(),
            meta: Mutex::new(LineMeta {
                persistent: [0; WORDS_PER_LINE],
                version: 0,
                flushed_version: 0,
                psync_version: 0,
                log: log.then(Vec::new),
            }),
        }
    }

    fn image(&self) -> [u64; WORDS_PER_LINE] {
        let mut img = [0; WORDS_PER_LINE];
        for (dst, word) in img.iter_mut().zip(self.words.iter()) {
            *dst = word.load(Ordering::SeqCst);
        }
        img
    }
}

struct Region {
    slot_size: usize,
    slot_count: usize,
    lines: Vec<Line>,
}

impl Region {
    fn lines_per_slot(&self) -> usize {
        self.slot_size / LINE_SIZE
    }
}

/// The simulated NVM heap. Cheap to share; all access is through `&self`.
pub struct Heap {
    config: HeapConfig,
    regions: RwLock<Vec<Arc<Region>>>,
    rng: Mutex<ChaCha8Rng>,
    crashed: AtomicBool,
}

impl Heap {
    pub fn new(config: HeapConfig) -> Arc<Heap> {
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Arc::new(Heap {
            config,
            regions: RwLock::new(Vec::new()),
            rng: Mutex::new(rng),
            crashed: AtomicBool::new(false),
        })
    }

    /// Rebuilds a heap from a crash snapshot: every region reappears with
    /// its original id and both images equal to the snapshot content.
    pub fn from_snapshot(snapshot: &PersistentSnapshot, config: HeapConfig) -> Arc<Heap> {
        let heap = Heap::new(config);
        {
            let mut regions = heap.regions.write();
            for (idx, sr) in snapshot.regions.iter().enumerate() {
                assert_eq!(idx as u32, sr.id.0, "snapshot region ids must be dense");
                let line_count = sr.slot_size * sr.slot_count / LINE_SIZE;
                let region = Region {
                    slot_size: sr.slot_size,
                    slot_count: sr.slot_count,
                    lines: (0..line_count)
                        .map(|_| Line::new(heap.config.write_log))
                        .collect(),
                };
                for (li, line) in region.lines.iter().enumerate() {
                    let mut meta = line.meta.lock();
                    for w in 0..WORDS_PER_LINE {
                        let base = (li * WORDS_PER_LINE + w) * 8;
                        let word = u64::from_le_bytes(sr.bytes[base..base + 8].try_into().unwrap());
                        line.words[w].store(word, Ordering::SeqCst);
                        meta.persistent[w] = word;
                    }
                }
                regions.push(Arc::new(region));
            }
        }
        heap
    }

    pub fn config(&self) -> &HeapConfig {
        &self.config
    }

    pub fn region_count(&self) -> usize {
        self.regions.read().len()
    }

    /// (slot_size, slot_count) of an existing region.
    pub fn region_meta(&self, id: RegionId) -> (usize, usize) {
        let regions = self.regions.read();
        let r = &regions[id.0 as usize];
        (r.slot_size, r.slot_count)
    }

    /// Carves a fresh region of zeroed lines. Addresses (region id + slot
    /// index) are stable for the process lifetime.
    pub fn allocate_region(
        &self,
        slot_size: usize,
        slot_count: usize,
    ) -> Result<RegionId, PmemError> {
        assert!(!self.crashed(), "pmem access after crash");
        assert!(
            slot_size > 0 && slot_size % LINE_SIZE == 0,
            "slot size must be a positive multiple of the cache line size"
        );
        let mut regions = self.regions.write();
        if regions.len() >= self.config.max_regions {
            return Err(PmemError::CapacityExhausted(regions.len()));
        }
        let id = RegionId(regions.len() as u32);
        let line_count = slot_size / LINE_SIZE * slot_count;
        regions.push(Arc::new(Region {
            slot_size,
            slot_count,
            lines: (0..line_count)
                .map(|_| Line::new(self.config.write_log))
                .collect(),
        }));
        Ok(id)
    }

    fn crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    fn with_line<R>(&self, slot: SlotRef, line_in_slot: usize, f: impl FnOnce(&Line) -> R) -> R {
        let regions = self.regions.read();
        let region = &regions[slot.region.0 as usize];
        assert!(
            (slot.slot as usize) < region.slot_count,
            "slot out of bounds"
        );
        assert!(
            line_in_slot < region.lines_per_slot(),
            "access beyond slot bounds"
        );
        let line_idx = slot.slot as usize * region.lines_per_slot() + line_in_slot;
        f(&region.lines[line_idx])
    }

    fn locate(&self, word: usize) -> (usize, usize) {
        (word / WORDS_PER_LINE, word % WORDS_PER_LINE)
    }

    /// Atomic word load from the volatile image.
    pub fn load(&self, slot: SlotRef, word: usize) -> u64 {
        sched::checkpoint();
        assert!(!self.crashed(), "pmem access after crash");
        let (line, w) = self.locate(word);
        self.with_line(slot, line, |l| l.words[w].load(Ordering::SeqCst))
    }

    /// Atomic word store to the volatile image only. May trigger an
    /// implicit write-back of the whole line, per the eviction policy.
    pub fn store(&self, slot: SlotRef, word: usize, value: u64) {
        sched::checkpoint();
        assert!(!self.crashed(), "pmem access after crash");
        let (line, w) = self.locate(word);
        self.with_line(slot, line, |l| {
            let mut meta = l.meta.lock();
            l.words[w].store(value, Ordering::SeqCst);
            self.record_store(l, &mut meta);
        });
    }

    /// Atomic compare-and-swap on one word of the volatile image. Returns
    /// whether the swap happened.
    pub fn compare_exchange(&self, slot: SlotRef, word: usize, expected: u64, new: u64) -> bool {
        sched::checkpoint();
        assert!(!self.crashed(), "pmem access after crash");
        let (line, w) = self.locate(word);
        self.with_line(slot, line, |l| {
            let mut meta = l.meta.lock();
            if l.words[w].load(Ordering::SeqCst) != expected {
                return false;
            }
            l.words[w].store(new, Ordering::SeqCst);
            self.record_store(l, &mut meta);
            true
        })
    }

    fn record_store(&self, line: &Line, meta: &mut LineMeta) {
        meta.version += 1;
        if meta.log.is_some() {
            let image = line.image().to_vec();
            let version = meta.version;
            meta.log
                .as_mut()
                .unwrap()
                .push(LineRecord { version, image });
        }
        if let EvictionPolicy::RandomRate(p) = self.config.eviction {
            if self.rng.lock().gen::<f64>() < p {
                meta.persistent = line.image();
                meta.flushed_version = meta.version;
            }
        }
    }

    /// Explicit write-back of every line of a slot, with fence semantics:
    /// on return the slot's persistent images equal the volatile images as
    /// of this call, and no later store by the caller persists before them.
    pub fn psync(&self, stats: &ThreadStats, slot: SlotRef) {
        self.psync_inner(stats, slot, false)
    }

    /// Same write-back, attributed to allocator infrastructure rather than
    /// the set operation in progress.
    pub fn psync_infra(&self, stats: &ThreadStats, slot: SlotRef) {
        self.psync_inner(stats, slot, true)
    }

    fn psync_inner(&self, stats: &ThreadStats, slot: SlotRef, infra: bool) {
        sched::checkpoint();
        assert!(!self.crashed(), "pmem access after crash");
        let regions = self.regions.read();
        let region = &regions[slot.region.0 as usize];
        assert!(
            (slot.slot as usize) < region.slot_count,
            "slot out of bounds"
        );
        let lps = region.lines_per_slot();
        let base = slot.slot as usize * lps;
        for line in &region.lines[base..base + lps] {
            let mut meta = line.meta.lock();
            meta.persistent = line.image();
            meta.flushed_version = meta.version;
            meta.psync_version = meta.version;
        }
        std::sync::atomic::fence(Ordering::SeqCst);
        stats.note_psync(lps as u64, infra);
    }

    /// Ordering fence without a write-back. Counted separately from psyncs.
    pub fn fence(&self, stats: &ThreadStats) {
        sched::checkpoint();
        std::sync::atomic::fence(Ordering::SeqCst);
        stats.note_fence();
    }

    /// Power failure. Per the eviction policy, each dirty line's persistent
    /// image may first advance to the current volatile image; the result is
    /// frozen and returned, and the heap becomes unusable.
    pub fn crash(&self) -> PersistentSnapshot {
        assert!(
            !self.crashed.swap(true, Ordering::SeqCst),
            "heap crashed twice"
        );
        let adversarial = self.config.eviction == EvictionPolicy::AdversarialAtCrash;
        let mut rng = self.rng.lock();
        let regions = self.regions.read();
        let mut snap_regions = Vec::with_capacity(regions.len());
        for (id, region) in regions.iter().enumerate() {
            let mut bytes = Vec::with_capacity(region.lines.len() * LINE_SIZE);
            for line in &region.lines {
                let mut meta = line.meta.lock();
                if adversarial && meta.version > meta.flushed_version && rng.gen::<bool>() {
                    meta.persistent = line.image();
                    meta.flushed_version = meta.version;
                }
                for word in meta.persistent {
                    bytes.extend_from_slice(&word.to_le_bytes());
                }
            }
            snap_regions.push(SnapshotRegion {
                id: RegionId(id as u32),
                slot_size: region.slot_size,
                slot_count: region.slot_count,
                bytes,
            });
        }
        PersistentSnapshot {
            line_size: LINE_SIZE as u32,
            regions: snap_regions,
        }
    }

    /// Returns a region's storage to the backing store. The caller must
    /// guarantee nothing references it anymore; subsequent access faults.
    pub fn release_region(&self, id: RegionId) {
        let mut regions = self.regions.write();
        let old = &regions[id.0 as usize];
        regions[id.0 as usize] = Arc::new(Region {
            slot_size: old.slot_size,
            slot_count: 0,
            lines: Vec::new(),
        });
    }

    /// Current persistent image of one word (debug/verification aid).
    pub fn persistent_word(&self, slot: SlotRef, word: usize) -> u64 {
        let (line, w) = self.locate(word);
        self.with_line(slot, line, |l| l.meta.lock().persistent[w])
    }

    /// (version, flushed_version, psync_version) of a slot's line.
    pub fn line_versions(&self, slot: SlotRef, line_in_slot: usize) -> (u64, u64, u64) {
        self.with_line(slot, line_in_slot, |l| {
            let meta = l.meta.lock();
            (meta.version, meta.flushed_version, meta.psync_version)
        })
    }

    /// Clone of the write log for a slot's line, if logging is enabled.
    pub fn line_log(&self, slot: SlotRef, line_in_slot: usize) -> Option<Vec<LineRecord>> {
        self.with_line(slot, line_in_slot, |l| l.meta.lock().log.clone())
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"DSETSNAP";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRegion {
    pub id: RegionId,
    pub slot_size: usize,
    pub slot_count: usize,
    pub bytes: Vec<u8>,
}

/// Frozen persistent images of all regions, produced by [`Heap::crash`].
/// Serializes bit-exactly: `dump` then `load` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentSnapshot {
    pub line_size: u32,
    pub regions: Vec<SnapshotRegion>,
}

impl PersistentSnapshot {
    /// Persistent content of one word of a slot.
    pub fn word(&self, slot: SlotRef, word: usize) -> u64 {
        let region = &self.regions[slot.region.0 as usize];
        let base = slot.slot as usize * region.slot_size + word * 8;
        u64::from_le_bytes(region.bytes[base..base + 8].try_into().unwrap())
    }

    pub fn dump<W: std::io::Write>(&self, sink: &mut W) -> Result<(), SnapshotError> {
        sink.write_all(SNAPSHOT_MAGIC)?;
        sink.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        sink.write_all(&self.line_size.to_le_bytes())?;
        sink.write_all(&(self.regions.len() as u32).to_le_bytes())?;
        for r in &self.regions {
            sink.write_all(&r.id.0.to_le_bytes())?;
            sink.write_all(&(r.slot_size as u32).to_le_bytes())?;
            sink.write_all(&(r.slot_count as u32).to_le_bytes())?;
            sink.write_all(&(r.bytes.len() as u64).to_le_bytes())?;
            sink.write_all(&r.bytes)?;
        }
        Ok(())
    }

    pub fn load<R: std::io::Read>(source: &mut R) -> Result<PersistentSnapshot, SnapshotError> {
        fn read_exact<R: std::io::Read, const N: usize>(
            source: &mut R,
        ) -> Result<[u8; N], SnapshotError> {
            let mut buf = [0u8; N];
            source
                .read_exact(&mut buf)
                .map_err(|_| SnapshotError::Truncated)?;
            Ok(buf)
        }
        let magic: [u8; 8] = read_exact(source)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = u32::from_le_bytes(read_exact(source)?);
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::BadVersion(version));
        }
        let line_size = u32::from_le_bytes(read_exact(source)?);
        let region_count = u32::from_le_bytes(read_exact(source)?);
        let mut regions = Vec::with_capacity(region_count as usize);
        for _ in 0..region_count {
            let id = RegionId(u32::from_le_bytes(read_exact(source)?));
            let slot_size = u32::from_le_bytes(read_exact(source)?) as usize;
            let slot_count = u32::from_le_bytes(read_exact(source)?) as usize;
            let len = u64::from_le_bytes(read_exact(source)?) as usize;
            let mut bytes = vec![0u8; len];
            source
                .read_exact(&mut bytes)
                .map_err(|_| SnapshotError::Truncated)?;
            regions.push(SnapshotRegion {
                id,
                slot_size,
                slot_count,
                bytes,
            });
        }
        Ok(PersistentSnapshot { line_size, regions })
    }
}
