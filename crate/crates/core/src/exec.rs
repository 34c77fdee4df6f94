//! Deterministic data-parallel execution helpers.
//!
//! Every hot loop in this crate is expressed through the two helpers below so
//! the whole numeric stack can run either data-parallel (rayon, the default)
//! or strictly sequentially. Work is split into *fixed* chunks whose
//! boundaries depend only on problem size, each chunk owns a disjoint slice
//! of the output, and reductions fold per-chunk partials in chunk order.
//! Because the per-chunk arithmetic is identical on both paths, parallel and
//! sequential runs produce bitwise-identical results — a property the test
//! suite asserts and training determinism relies on.
//!
//! The `parallel` cargo feature selects whether rayon is compiled in at all;
//! [`force_sequential`] additionally lets a parallel build fall back to the
//! sequential path at runtime, which the benchmark suite uses to compare the
//! two on identical inputs.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential execution path at runtime even when the crate was
/// built with the `parallel` feature. Benchmarks toggle this to compare the
/// two paths; tests toggle it to assert bitwise equality.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when the sequential path is active (feature disabled or forced).
pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

#[cfg(feature = "parallel")]
fn parallel_active() -> bool {
    !sequential_forced()
}

/// Split `out` into chunks of `chunk_len` elements (the last may be shorter)
/// and run `f(chunk_index, chunk)` on each. Chunks are disjoint, so the
/// closure may freely mutate its slice.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        if parallel_active() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Evaluate `f(i)` for `i in 0..n` and collect the results in index order.
/// Used both for embarrassingly parallel maps and, combined with an ordered
/// fold over the returned vector, for deterministic reductions.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_active() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(|i| f(i)).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Number of fixed-size chunks covering `len` elements.
pub fn chunk_count(len: usize, chunk_len: usize) -> usize {
    len.div_ceil(chunk_len)
}

/// Bounds of chunk `i` for a `len`-element range split into `chunk_len`
/// pieces.
pub fn chunk_bounds(len: usize, chunk_len: usize, i: usize) -> (usize, usize) {
    let lo = i * chunk_len;
    let hi = (lo + chunk_len).min(len);
    (lo, hi)
}
