//! Live-byte accounting for tensor storage.
//!
//! Every [`crate::tensor::Tensor`] registers its buffer on construction and
//! releases it on drop. Counters are thread-local, so concurrent test threads
//! never observe each other's allocations.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as i64));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> u64 {
    LIVE.with(|l| l.get().max(0) as u64)
}

/// Runs `f` and returns its result together with the high-water mark of
/// tensor bytes allocated during the call, measured above the live bytes at
/// entry.
pub fn track_measured_peak<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let base = LIVE.with(|l| l.get());
    let saved_peak = PEAK.with(|p| p.replace(base));
    let out = f();
    let peak = PEAK.with(|p| p.get());
    // Restore an enclosing tracker's view.
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (out, (peak - base).max(0) as u64)
}
