//! Data-parallel helpers over independent samples.
//!
//! Every helper returns results in index order, so callers that reduce the
//! returned vector front to back get the same bits whether the work ran on
//! one thread or many. Without the `parallel` feature (or after
//! [`set_sequential`]) everything runs on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces the sequential path at runtime. Used by the benches to compare
/// both paths inside one binary.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// A one-thread pool runs inline: handing work to a single worker only adds
/// a context switch per call.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.load(Ordering::Relaxed) && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 && is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Runs `f(i, chunk)` over consecutive `chunk_len`-sized pieces of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() > chunk_len && is_parallel() {
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

/// Sums equally sized vectors element-wise in index order.
pub fn sum_in_order<T: Copy + std::ops::AddAssign + Default>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else {
        return Vec::new();
    };
    for part in iter {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    acc
}
