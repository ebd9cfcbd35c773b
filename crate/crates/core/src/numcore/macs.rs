//! Thread-local multiply-accumulate counter.
//!
//! Every matrix product issued through the kernels adds `m·k·n` here. Norms,
//! rotary embedding, elementwise ops and embedding lookups are not counted.

use std::cell::Cell;

thread_local! {
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    COUNT.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    COUNT.with(|c| c.set(0));
}

pub fn get() -> u64 {
    COUNT.with(|c| c.get())
}

/// Runs `f` and returns its result with the MACs it issued on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = get();
    let out = f();
    (out, get() - before)
}
