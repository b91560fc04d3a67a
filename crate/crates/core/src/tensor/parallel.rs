//! Intra-op parallelism.
//!
//! Work is only ever split across independent output slices, each computed
//! in the same order it would be sequentially, so results do not depend on
//! the thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "EXVIDEO_THREADS";

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| build_pool(threads_from_env())).as_ref()
}

fn build_pool(threads: usize) -> Option<rayon::ThreadPool> {
    (threads > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// Fixes the worker count before first use. Returns false if the pool was
/// already initialized.
pub fn init_threads(threads: usize) -> bool {
    POOL.set(build_pool(threads.max(1))).is_ok()
}

pub fn threads() -> usize {
    pool().map_or(1, rayon::ThreadPool::current_num_threads)
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized piece of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    match pool() {
        Some(pool) if out.len() > chunk_len => pool.install(|| {
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        }),
        _ => out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
    }
}
