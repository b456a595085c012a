//! Test hook recording which per-point operator slices a computation reads.
//!
//! Tracking is per thread and off unless a caller wraps work in [`track_access`].
//! The online correction path is single-threaded, so everything it touches is
//! observed.

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static TOUCHED: RefCell<BTreeSet<usize>> = const { RefCell::new(BTreeSet::new()) };
}

#[inline]
pub(crate) fn record(index: usize) {
    if ENABLED.with(Cell::get) {
        TOUCHED.with(|t| {
            t.borrow_mut().insert(index);
        });
    }
}

/// Run `f` and return the set of training-point indices whose operator slices
/// were read while it ran.
pub fn track_access<R>(f: impl FnOnce() -> R) -> (R, BTreeSet<usize>) {
    let was = ENABLED.with(|e| e.replace(true));
    let saved = TOUCHED.with(|t| std::mem::take(&mut *t.borrow_mut()));
    let out = f();
    let touched = TOUCHED.with(|t| std::mem::replace(&mut *t.borrow_mut(), saved));
    ENABLED.with(|e| e.set(was));
    (out, touched)
}
