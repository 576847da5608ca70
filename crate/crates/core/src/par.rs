//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (default) the loops run on the rayon pool;
//! without it they run sequentially. Reductions always split the index range
//! into fixed-size chunks and add the chunk partials in index order, so every
//! result is bit-identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for reductions and elementwise loops.
pub const CHUNK: usize = 4096;

/// Deterministic sum of `f(i)` for `i in 0..n`.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial = |c: usize| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut s = 0.0;
        for i in lo..hi {
            s += f(i);
        }
        s
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<f64> = (0..chunks).into_par_iter().map(partial).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<f64> = (0..chunks).map(partial).collect();
    partials.iter().sum()
}

/// Deterministic maximum of `f(i)` (returns `f64::NEG_INFINITY` for `n == 0`).
pub fn max_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial = |c: usize| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        (lo..hi).map(&f).fold(f64::NEG_INFINITY, f64::max)
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<f64> = (0..chunks).into_par_iter().map(partial).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<f64> = (0..chunks).map(partial).collect();
    partials.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_by(a.len(), |i| a[i] * b[i])
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Calls `f(i, &mut v[i])` for every element.
pub fn for_each_mut<T, F>(v: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    v.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let base = c * CHUNK;
        for (k, x) in chunk.iter_mut().enumerate() {
            f(base + k, x);
        }
    });
    #[cfg(not(feature = "parallel"))]
    for (i, x) in v.iter_mut().enumerate() {
        f(i, x);
    }
}

/// Calls `f(c, chunk)` on consecutive chunks of length `len` (the last may be shorter).
pub fn for_each_chunk_mut<T, F>(v: &mut [T], len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let len = len.max(1);
    #[cfg(feature = "parallel")]
    v.par_chunks_mut(len).enumerate().for_each(|(c, chunk)| f(c, chunk));
    #[cfg(not(feature = "parallel"))]
    for (c, chunk) in v.chunks_mut(len).enumerate() {
        f(c, chunk);
    }
}

/// Builds a vector from `f(i)`.
pub fn collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f` over the items of a small slice, in parallel when enabled.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for_each_mut(y, |i, yi| *yi += alpha * x[i]);
}

/// `y = x + beta * y`
pub fn xpby(x: &[f64], beta: f64, y: &mut [f64]) {
    for_each_mut(y, |i, yi| *yi = x[i] + beta * *yi);
}

pub fn scale(alpha: f64, y: &mut [f64]) {
    for_each_mut(y, |_, yi| *yi *= alpha);
}

pub fn copy(src: &[f64], dst: &mut [f64]) {
    for_each_mut(dst, |i, d| *d = src[i]);
}

/// Raw pointer that may be shared across the red-black sweeps, where each
/// task writes a disjoint set of entries and only reads entries of the other
/// colour.
#[derive(Clone, Copy)]
pub(crate) struct SharedMut(pub *mut f64);

unsafe impl Send for SharedMut {}
unsafe impl Sync for SharedMut {}

/// Runs `f(k)` for every `k in 0..n`, in parallel when enabled.
pub(crate) fn for_range<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    (0..n).into_par_iter().for_each(f);
    #[cfg(not(feature = "parallel"))]
    (0..n).for_each(f);
}
