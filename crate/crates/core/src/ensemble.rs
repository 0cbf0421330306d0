//! Path-parallel orchestration with results in path order.
//!
//! Every ensemble computation maps `path_index ↦ T` on the global rayon pool and
//! collects into a `Vec` indexed by path. Reductions are then plain sequential
//! folds over that vector, so nothing depends on how work was scheduled.

use crate::error::Result;
use rayon::prelude::*;

/// Runs `f(p)` for `p = 0..n` in parallel and returns the results in order.
/// Any error aborts the whole collection.
pub fn map_paths<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..n as u64).into_par_iter().map(f).collect()
}

/// Fold over paths in blocks of `block`, keeping at most one block of per-path
/// results alive at a time. `fold` sees the results strictly in path order.
pub fn fold_paths<T, A, F, G>(n: usize, block: usize, init: A, f: F, mut fold: G) -> Result<A>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
    G: FnMut(A, u64, T) -> A,
{
    let block = block.max(1);
    let mut acc = init;
    let mut start = 0usize;
    while start < n {
        let end = (start + block).min(n);
        let chunk: Vec<T> = (start as u64..end as u64).into_par_iter().map(&f).collect::<Result<_>>()?;
        for (k, v) in chunk.into_iter().enumerate() {
            acc = fold(acc, (start + k) as u64, v);
        }
        start = end;
    }
    Ok(acc)
}

/// Runs `f` inside a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
