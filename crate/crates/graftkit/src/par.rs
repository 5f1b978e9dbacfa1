//! Data-parallel execution facade.
//!
//! All parallelism in the crate is expressed as an ordered map over
//! independent work items (batch shards, layers, samples). With the
//! `parallel` feature the map runs on a rayon pool; without it the same
//! code runs sequentially. Results are collected in input order and every
//! work item owns its tapes, so outputs are identical for any thread
//! count, including one.

use std::sync::OnceLock;

#[cfg(feature = "parallel")]
static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Thread cap from `GRAFTKIT_THREADS`; `None` means use the default.
pub fn configured_threads() -> Option<usize> {
    std::env::var("GRAFTKIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = configured_threads() {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build thread pool")
    })
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T, F>(n: usize, degree: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match degree {
        Some(1) => (0..n).map(f).collect(),
        Some(d) => {
            let local = rayon::ThreadPoolBuilder::new()
                .num_threads(d)
                .build()
                .expect("failed to build thread pool");
            local.install(|| (0..n).into_par_iter().map(f).collect())
        }
        None => pool().install(|| (0..n).into_par_iter().map(f).collect()),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, F>(n: usize, _degree: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential reference path, kept callable regardless of features so the
/// bench suite can compare both on one build.
pub fn seq_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
