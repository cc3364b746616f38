//! Process-global accounting of live tensor buffers.
//!
//! Every buffer allocation takes a [`BufferToken`]; dropping the token
//! releases it. `live_buffers` therefore equals allocations minus releases
//! at every point in time, and `peak_buffers` is the high-water mark since
//! the last [`reset_peak`].

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Number of currently allocated tensor buffers.
pub fn live_buffers() -> usize {
    LIVE.load(Ordering::SeqCst)
}

/// High-water mark of live buffers since the last reset.
pub fn peak_buffers() -> usize {
    PEAK.load(Ordering::SeqCst)
}

/// Reset the high-water mark to the current live count.
pub fn reset_peak() {
    PEAK.store(LIVE.load(Ordering::SeqCst), Ordering::SeqCst);
}

/// RAII registration of one buffer.
#[derive(Debug)]
pub struct BufferToken {
    id: u64,
}

impl BufferToken {
    pub(crate) fn register() -> BufferToken {
        let live = LIVE.fetch_add(1, Ordering::SeqCst) + 1;
        PEAK.fetch_max(live, Ordering::SeqCst);
        BufferToken {
            id: NEXT_ID.fetch_add(1, Ordering::SeqCst),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

impl Drop for BufferToken {
    fn drop(&mut self) {
        LIVE.fetch_sub(1, Ordering::SeqCst);
    }
}
