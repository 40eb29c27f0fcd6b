//! Execution helpers for the data-parallel kernels.
//!
//! Every hot loop in the crate funnels through this module. With the
//! `parallel` feature (default) the helpers dispatch to rayon; without it
//! they fall back to plain sequential loops. A runtime override
//! ([`force_sequential`]) lets a parallel build run the sequential path,
//! which is what the criterion suite uses to compare both on one binary.
//!
//! All helpers partition work so that each output element is produced by
//! exactly one task with a fixed-order inner loop, so parallel and
//! sequential runs are bitwise identical.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential fallback at runtime even when the `parallel`
/// feature is compiled in. Intended for benchmarks and debugging.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when work will actually be distributed across threads.
pub fn parallel_active() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Run `f(chunk_index, chunk)` over disjoint consecutive chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_active() {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Run `f(i)` for every `i` in `0..n`.
///
/// `f` must only touch state that is disjoint per index (for example via
/// interior pointers into pre-split buffers) or read-only.
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        (0..n).into_par_iter().for_each(f);
        return;
    }
    for i in 0..n {
        f(i);
    }
}

/// Collect `f(i)` for `i` in `0..n`, preserving index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Sort a slice by an f64 key (total order, NaN sorts last).
pub fn sort_by_f64_key<T, F>(data: &mut [T], key: F)
where
    T: Send,
    F: Fn(&T) -> f64 + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        data.par_sort_unstable_by(|a, b| key(a).total_cmp(&key(b)));
        return;
    }
    data.sort_unstable_by(|a, b| key(a).total_cmp(&key(b)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_map_matches_sequential() {
        let mut par = vec![0u64; 1000];
        let mut seq = par.clone();
        for_each_chunk_mut(&mut par, 7, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 1000 + j) as u64;
            }
        });
        force_sequential(true);
        for_each_chunk_mut(&mut seq, 7, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 1000 + j) as u64;
            }
        });
        force_sequential(false);
        assert_eq!(par, seq);
    }

    #[test]
    fn map_indices_preserves_order() {
        let v = map_indices(100, |i| i * 3);
        assert_eq!(v[0], 0);
        assert_eq!(v[99], 297);
    }
}
