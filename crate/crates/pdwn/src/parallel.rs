//! Data-parallel loop primitives.
//!
//! Every kernel in this crate parallelizes by handing out disjoint output
//! chunks (rows, planes, or single cells) to worker threads; no kernel ever
//! reduces across threads. Because each chunk is filled by the same
//! sequential inner loop in both modes, results are bitwise identical with
//! and without the `parallel` feature, and independent of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Splits `data` into consecutive chunks of `chunk` elements (the last may be
/// shorter) and runs `f(chunk_index, chunk)` on each.
#[cfg(feature = "parallel")]
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
