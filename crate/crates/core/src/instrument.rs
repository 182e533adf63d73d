//! Per-thread operation and allocation counters.
//!
//! Kernels report the multiply-adds they perform and every [`Tensor`]
//! reports its scalar count on creation and drop. The benchmark harness
//! resets the counters, runs one forward pass and reads them back.
//!
//! [`Tensor`]: crate::tensor::Tensor

use std::cell::Cell;

thread_local! {
    static MADDS: Cell<u64> = const { Cell::new(0) };
    static LIVE: Cell<u64> = const { Cell::new(0) };
    static PEAK: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn count_madds(n: u64) {
    MADDS.with(|c| c.set(c.get() + n));
}

#[inline]
pub(crate) fn alloc(n: usize) {
    LIVE.with(|live| {
        let now = live.get() + n as u64;
        live.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

#[inline]
pub(crate) fn release(n: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(n as u64)));
}

/// Snapshot of the counters for the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counters {
    pub madds: u64,
    pub live_scalars: u64,
    pub peak_scalars: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        madds: MADDS.with(Cell::get),
        live_scalars: LIVE.with(Cell::get),
        peak_scalars: PEAK.with(Cell::get),
    }
}

/// Zero the multiply-add counter and restart peak tracking from the
/// current live count.
pub fn reset() {
    MADDS.with(|c| c.set(0));
    let live = LIVE.with(Cell::get);
    PEAK.with(|p| p.set(live));
}
