//! Logical allocation accounting.
//!
//! Every [`Matrix`](crate::Matrix) registers its float count with all
//! allocation ledgers active on the creating thread, and releases it again
//! when dropped. Counting is in floats, not bytes, and ignores everything
//! that is not a matrix (scalars, per-channel vectors, bookkeeping).
//!
//! Ledgers are scoped with [`track`] and nest: an inner scope's allocations
//! are also visible to every enclosing scope.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

/// Snapshot of a ledger: floats alive now and the high-water mark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AllocationLedger {
    pub current_floats: u64,
    pub peak_floats: u64,
}

impl AllocationLedger {
    fn alloc(&mut self, floats: u64) {
        self.current_floats += floats;
        self.peak_floats = self.peak_floats.max(self.current_floats);
    }

    fn release(&mut self, floats: u64) {
        self.current_floats = self.current_floats.saturating_sub(floats);
    }
}

/// Identifies the allocation registration of a single matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AllocTag {
    thread: u64,
    // id of the innermost ledger active at allocation time
    ledger: u64,
}

static NEXT_THREAD_KEY: AtomicU64 = AtomicU64::new(1);

struct Active {
    id: u64,
    ledger: AllocationLedger,
}

thread_local! {
    static THREAD_KEY: u64 = NEXT_THREAD_KEY.fetch_add(1, Ordering::Relaxed);
    static NEXT_LEDGER: Cell<u64> = const { Cell::new(1) };
    static STACK: RefCell<Vec<Active>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn register(floats: usize) -> Option<AllocTag> {
    STACK.with(|stack| {
        let mut stack = stack.borrow_mut();
        let innermost = stack.last()?.id;
        for entry in stack.iter_mut() {
            entry.ledger.alloc(floats as u64);
        }
        Some(AllocTag {
            thread: THREAD_KEY.with(|k| *k),
            ledger: innermost,
        })
    })
}

pub(crate) fn release(tag: AllocTag, floats: usize) {
    if THREAD_KEY.try_with(|k| *k) != Ok(tag.thread) {
        return;
    }
    // Ledger ids grow monotonically and the stack is LIFO, so every ledger
    // still active with id <= tag.ledger was active when the matrix was made.
    let _ = STACK.try_with(|stack| {
        for entry in stack.borrow_mut().iter_mut() {
            if entry.id <= tag.ledger {
                entry.ledger.release(floats as u64);
            }
        }
    });
}

/// Runs `f` inside a fresh ledger scope and returns its result together with
/// the ledger state observed when the scope closed.
///
/// Matrices returned out of the scope are still counted in `current_floats`.
pub fn track<T>(f: impl FnOnce() -> T) -> (T, AllocationLedger) {
    let id = NEXT_LEDGER.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    });
    STACK.with(|s| {
        s.borrow_mut().push(Active {
            id,
            ledger: AllocationLedger::default(),
        })
    });
    let guard = ScopeGuard { id };
    let out = f();
    let ledger = guard.close();
    (out, ledger)
}

/// State of the innermost active ledger, if any.
pub fn current() -> Option<AllocationLedger> {
    STACK.with(|s| s.borrow().last().map(|a| a.ledger))
}

struct ScopeGuard {
    id: u64,
}

impl ScopeGuard {
    fn close(self) -> AllocationLedger {
        let ledger = pop(self.id);
        std::mem::forget(self);
        ledger
    }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        // unwinding out of `f`
        pop(self.id);
    }
}

fn pop(id: u64) -> AllocationLedger {
    STACK.with(|s| {
        let mut s = s.borrow_mut();
        let top = s.pop().expect("ledger stack underflow");
        assert_eq!(top.id, id, "ledger scopes closed out of order");
        top.ledger
    })
}
