//! Worker-pool sizing. `MTPFN_THREADS` caps every parallel section in the
//! crate; results are always reduced in a fixed order, so the thread count
//! never changes any output.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn thread_cap() -> usize {
    std::env::var("MTPFN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}

/// Shared pool for data-parallel sections (independent datasets or
/// ensemble members).
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_cap())
            .build()
            .expect("worker pool")
    })
}
