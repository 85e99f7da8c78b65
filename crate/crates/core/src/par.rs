//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it they fall back to plain sequential iteration with identical
//! results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Folds each shard of `items` into an accumulator and merges the shards.
/// `merge` must be associative and commutative for the result to be
/// independent of how the work is split.
#[cfg(feature = "parallel")]
pub fn fold_merge<T, A, I, F, M>(items: &[T], init: I, fold: F, merge: M) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, &T) -> A + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    items.par_iter().fold(&init, fold).reduce(&init, merge)
}

#[cfg(not(feature = "parallel"))]
pub fn fold_merge<T, A, I, F, M>(items: &[T], init: I, fold: F, _merge: M) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, &T) -> A + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    items.iter().fold(init(), fold)
}

/// Runs `f` on a dedicated pool of `workers` threads (`0` means the rayon
/// default). Sequential builds ignore the worker count.
#[cfg(feature = "parallel")]
pub fn with_workers<R, F>(workers: usize, f: F) -> std::io::Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(std::io::Error::other)?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R, F>(_workers: usize, f: F) -> std::io::Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    Ok(f())
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
