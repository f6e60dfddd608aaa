//! Execution strategy for data-parallel inner loops.
//!
//! Every hot kernel is written as "split the output into fixed-size chunks,
//! compute each chunk independently". Chunk boundaries depend only on the
//! problem size, never on the thread count, and each chunk's arithmetic is
//! sequential, so the parallel and sequential paths produce bit-identical
//! results. The `parallel` feature selects the default; callers that need
//! to force a mode (the benches) pass it explicitly.

/// True when the crate was built with the `parallel` feature.
pub(crate) fn default_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Apply `f` to fixed-size mutable chunks of `data`, optionally in parallel.
/// `f` receives the chunk index and the chunk.
pub(crate) fn chunks_mut<T, F>(data: &mut [T], chunk_len: usize, parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel;
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Map `0..n` through `f`, collecting results in index order.
pub(crate) fn map_collect<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
