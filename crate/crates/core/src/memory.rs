//! Allocation accounting for tensor payloads.
//!
//! Every [`Tensor`](crate::Tensor) registers the bytes of its data buffer on
//! creation and releases them on drop. Counters are per thread, so concurrent
//! workers do not see each other's traffic; a tensor dropped on a different
//! thread than the one that created it saturates at zero instead of wrapping.
//!
//! A soft cap can be installed with [`set_limit`]. Crossing it never aborts an
//! allocation; it raises a sticky flag that the tape checks after every
//! primitive and converts into [`Error::OutOfMemory`](crate::Error).

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LIMIT: Cell<Option<usize>> = const { Cell::new(None) };
    static EXCEEDED: Cell<bool> = const { Cell::new(false) };
}

pub(crate) fn allocate(bytes: usize) {
    let live = LIVE.with(|l| {
        let v = l.get() + bytes;
        l.set(v);
        v
    });
    PEAK.with(|p| p.set(p.get().max(live)));
    if let Some(limit) = LIMIT.with(Cell::get) {
        if live > limit {
            EXCEEDED.with(|e| e.set(true));
        }
    }
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensors on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restart peak tracking from the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

pub fn set_limit(limit: Option<usize>) {
    LIMIT.with(|l| l.set(limit));
    EXCEEDED.with(|e| e.set(false));
}

pub fn limit() -> Option<usize> {
    LIMIT.with(Cell::get)
}

/// Returns the limit if it has been crossed since the flag was last cleared.
pub(crate) fn exceeded() -> Option<usize> {
    if EXCEEDED.with(Cell::get) {
        limit()
    } else {
        None
    }
}

pub fn clear_exceeded() {
    EXCEEDED.with(|e| e.set(false));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn tensors_register_and_release() {
        let before = live_bytes();
        let t = Tensor::<f64>::zeros(&[10, 10]);
        assert_eq!(live_bytes(), before + 800);
        let f = Tensor::<f32>::zeros(&[10]);
        assert_eq!(live_bytes(), before + 840);
        drop(t);
        drop(f);
        assert_eq!(live_bytes(), before);
    }

    #[test]
    fn limit_sets_sticky_flag() {
        set_limit(Some(live_bytes() + 100));
        let _a = Tensor::<f64>::zeros(&[10]);
        assert!(exceeded().is_none());
        let _b = Tensor::<f64>::zeros(&[10]);
        assert!(exceeded().is_some());
        set_limit(None);
        assert!(exceeded().is_none());
    }
}
