//! Worker-pool plumbing. Every parallel section collects results in input
//! order, so outputs do not depend on the worker count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rayon::ThreadPool;

pub const THREADS_ENV: &str = "MOE_REBASIN_THREADS";

/// Worker count from `MOE_REBASIN_THREADS`, or the number of available cores.
pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn pool(threads: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(Default::default);
    let mut guard = pools.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("failed to build worker pool"),
            )
        })
        .clone()
}

/// Runs `f` inside a pool of exactly `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    pool(threads.max(1)).install(f)
}

/// Order-preserving parallel map using the configured worker count.
///
/// Nested calls reuse the pool they are already running in.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if rayon::current_thread_index().is_some() {
        return items.par_iter().map(f).collect();
    }
    with_threads(configured_threads(), || items.par_iter().map(f).collect())
}
