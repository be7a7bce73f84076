//! Thread-local multiply-accumulate counter fed by the forward kernels.
//!
//! Conv, matmul and batched matmul record `m·k·n`-style loop counts; softmax,
//! layer norm and GELU record one unit per element. Everything else (adds,
//! reshapes, pooling, interpolation) is free under this convention.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn record(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

pub fn reset() {
    MACS.with(|m| m.set(0));
}

pub fn read() -> u64 {
    MACS.with(|m| m.get())
}

/// Runs `f` and returns its result along with the MACs it executed on this
/// thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
