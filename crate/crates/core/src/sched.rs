//! Cooperative deterministic scheduling hooks.
//!
//! Every shared-memory access in the library passes through
//! [`checkpoint`]. In normal builds the call is a thread-local lookup that
//! finds nothing and returns. Under a [`Scheduler`], each worker thread
//! registers itself and then blocks at every checkpoint until the scheduler
//! grants it the next step, yielding one fully serialized, seed-reproducible
//! interleaving. A scripted crash step aborts all workers by unwinding them
//! with [`CrashSignal`] at their next checkpoint.

use std::cell::RefCell;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Panic payload used to abandon a worker when the scheduler crashes the
/// run. Workers catch it; anything else is resumed.
#[derive(Debug)]
pub struct CrashSignal;

thread_local! {
    static CURRENT: RefCell<Option<SchedSlot>> = const { RefCell::new(None) };
}

#[derive(Clone)]
struct SchedSlot {
    sched: Arc<Scheduler>,
    me: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum ThreadState {
    Running,
    Waiting,
    Exited,
}

struct SchedState {
    threads: Vec<ThreadState>,
    registered: usize,
    granted: Option<usize>,
    steps: u64,
    crashed: bool,
    rng: ChaCha8Rng,
}

/// A seeded round-by-round scheduler for a fixed set of worker threads.
pub struct Scheduler {
    expected: usize,
    crash_at: Option<u64>,
    state: Mutex<SchedState>,
    cv: Condvar,
}

impl Scheduler {
    /// `expected` workers will register; scheduling starts once all have
    /// arrived. If `crash_at` is `Some(n)`, the run is crashed after
    /// granting exactly `n` steps.
    pub fn new(expected: usize, seed: u64, crash_at: Option<u64>) -> Arc<Scheduler> {
        Arc::new(Scheduler {
            expected,
            crash_at,
            state: Mutex::new(SchedState {
                threads: vec![ThreadState::Waiting; expected],
                registered: 0,
                granted: None,
                steps: 0,
                crashed: false,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            cv: Condvar::new(),
        })
    }

    /// Total steps granted so far.
    pub fn steps(&self) -> u64 {
        self.state.lock().steps
    }

    pub fn crashed(&self) -> bool {
        self.state.lock().crashed
    }

    /// Binds the calling thread to worker index `me` and blocks until it is
    /// granted its first step. Panics with [`CrashSignal`] if the run
    /// crashes first.
    pub fn register(self: &Arc<Self>, me: usize) {
        CURRENT.with(|c| {
            *c.borrow_mut() = Some(SchedSlot {
                sched: Arc::clone(self),
                me,
            });
        });
        let mut state = self.state.lock();
        state.registered += 1;
        if state.registered == self.expected {
            self.pick_next(&mut state);
        }
        self.wait_for_grant(state, me);
    }

    /// Unbinds the calling thread; its remaining steps go to others.
    pub fn deregister(self: &Arc<Self>) {
        let me = CURRENT.with(|c| c.borrow_mut().take()).map(|s| s.me);
        let me = match me {
            Some(me) => me,
            None => return,
        };
        let mut state = self.state.lock();
        state.threads[me] = ThreadState::Exited;
        if state.granted == Some(me) {
            state.granted = None;
            self.pick_next(&mut state);
        }
    }

    fn yield_step(&self, me: usize) {
        let mut state = self.state.lock();
        if state.crashed {
            drop(state);
            std::panic::panic_any(CrashSignal);
        }
        state.threads[me] = ThreadState::Waiting;
        if state.granted == Some(me) {
            state.granted = None;
            self.pick_next(&mut state);
        }
        self.wait_for_grant(state, me);
    }

    fn wait_for_grant(&self, mut state: parking_lot::MutexGuard<'_, SchedState>, me: usize) {
        loop {
            if state.crashed {
                drop(state);
                std::panic::panic_any(CrashSignal);
            }
            if state.granted == Some(me) {
                state.threads[me] = ThreadState::Running;
                return;
            }
            self.cv.wait(&mut state);
        }
    }

    fn pick_next(&self, state: &mut SchedState) {
        if state.registered < self.expected || state.crashed {
            return;
        }
        if let Some(limit) = self.crash_at {
            if state.steps >= limit {
                state.crashed = true;
                self.cv.notify_all();
                return;
            }
        }
        let waiting: Vec<usize> = state
            .threads
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == ThreadState::Waiting)
            .map(|(i, _)| i)
            .collect();
        if waiting.is_empty() {
            return;
        }
        let choice = waiting[state.rng.gen_range(0..waiting.len())];
        state.steps += 1;
        state.granted = Some(choice);
        self.cv.notify_all();
    }
}

/// One scheduling point. No-op unless the calling thread is registered
/// with a [`Scheduler`].
#[inline]
pub fn checkpoint() {
    let slot = CURRENT.with(|c| c.borrow().clone());
    if let Some(slot) = slot {
        slot.sched.yield_step(slot.me);
    }
}

/// A shared atomic word whose accesses are scheduling points. Used for the
/// volatile-side links that do not live in simulated persistent memory.
pub struct SharedWord(std::sync::atomic::AtomicU64);

impl SharedWord {
    pub fn new(v: u64) -> SharedWord {
        SharedWord(std::sync::atomic::AtomicU64::new(v))
    }

    pub fn load(&self) -> u64 {
        checkpoint();
        self.0.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn store(&self, v: u64) {
        checkpoint();
        self.0.store(v, std::sync::atomic::Ordering::SeqCst)
    }

    pub fn compare_exchange(&self, expected: u64, new: u64) -> bool {
        checkpoint();
        self.0
            .compare_exchange(
                expected,
                new,
                std::sync::atomic::Ordering::SeqCst,
                std::sync::atomic::Ordering::SeqCst,
            )
            .is_ok()
    }
}
