//! Per-thread floating-point operation counter for the convolution kernels.
//!
//! A multiply-add counts as two operations, so a k×k convolution contributes
//! `2·k²·C_in·C_out·H_out·W_out` per image.

use std::cell::Cell;

thread_local! {
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    COUNT.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    COUNT.with(|c| c.set(0));
}

pub fn count() -> u64 {
    COUNT.with(Cell::get)
}

/// Runs `f` and returns its result with the operations it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = count();
    let out = f();
    (out, count() - before)
}
