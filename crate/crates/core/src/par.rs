//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it,
//! or after [`set_enabled`]`(false)`, they run the same closures sequentially.
//! Every helper partitions work over independent outputs, so both paths
//! produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Work items below this size are not worth a rayon split.
pub const MIN_PARALLEL_LEN: usize = 4096;

/// Runtime switch, mainly for benchmarks comparing both paths in one binary.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if enabled() && data.len() >= MIN_PARALLEL_LEN && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Zips two equally chunked mutable slices with a shared read-only slice.
pub fn for_each_zip3_mut<A, B, C, F>(a: &mut [A], b: &mut [B], c: &mut [C], chunk_len: usize, f: F)
where
    A: Send,
    B: Send,
    C: Send,
    F: Fn(usize, &mut [A], &mut [B], &mut [C]) + Sync + Send,
{
    assert!(a.len() == b.len() && b.len() == c.len());
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if enabled() && a.len() >= MIN_PARALLEL_LEN && a.len() > chunk_len {
        use rayon::prelude::*;
        a.par_chunks_mut(chunk_len)
            .zip(b.par_chunks_mut(chunk_len))
            .zip(c.par_chunks_mut(chunk_len))
            .enumerate()
            .for_each(|(i, ((x, y), z))| f(i, x, y, z));
        return;
    }
    a.chunks_mut(chunk_len)
        .zip(b.chunks_mut(chunk_len))
        .zip(c.chunks_mut(chunk_len))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));
}
