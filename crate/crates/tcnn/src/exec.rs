//! Parallel/sequential execution of the data-parallel inner loops.
//!
//! With the `parallel` feature (default) large workloads fan out over rayon;
//! without it everything runs on the calling thread. Both paths are
//! bit-identical: every task owns a disjoint output slab and all floating
//! point accumulation happens inside one task in a fixed order, so the split
//! never changes a result.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (in rough flop units) below which a kernel stays on the
/// calling thread even when the `parallel` feature is enabled.
pub const PARALLEL_THRESHOLD: usize = 100_000;

/// Splits `data` into consecutive `slab_len` chunks and runs `f(chunk_index, chunk)`
/// on each. `work` is the caller's estimate of total flops, used to skip the
/// thread pool for small inputs.
pub fn for_each_slab<F>(data: &mut [f64], slab_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if work >= PARALLEL_THRESHOLD {
        data.par_chunks_mut(slab_len)
            .enumerate()
            .for_each(|(i, s)| f(i, s));
        return;
    }
    let _ = work;
    for (i, s) in data.chunks_mut(slab_len).enumerate() {
        f(i, s);
    }
}

/// Always-sequential twin of [`for_each_slab`], kept public so the benchmark
/// suite can compare both paths within one build.
pub fn for_each_slab_seq<F>(data: &mut [f64], slab_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (i, s) in data.chunks_mut(slab_len).enumerate() {
        f(i, s);
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if work >= PARALLEL_THRESHOLD {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_split_matches_sequential() {
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        let fill = |i: usize, s: &mut [f64]| {
            for (j, v) in s.iter_mut().enumerate() {
                *v = (i * 100 + j) as f64;
            }
        };
        for_each_slab(&mut a, 8, usize::MAX, fill);
        for_each_slab_seq(&mut b, 8, fill);
        assert_eq!(a, b);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(10, usize::MAX, |i| i * i);
        assert_eq!(v, (0..10).map(|i| i * i).collect::<Vec<_>>());
    }
}
