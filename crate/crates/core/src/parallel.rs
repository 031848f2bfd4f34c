//! Row-parallel execution helpers.
//!
//! All parallelism in this crate maps independent output rows to threads;
//! each row is computed by the same sequential code either way, so results
//! are bit-identical with and without the `parallel` feature and do not
//! depend on the thread count.

/// Below this many output elements the rayon dispatch overhead outweighs
/// the work and we stay sequential even with `parallel` enabled.
pub(crate) const PAR_THRESHOLD: usize = 16 * 1024;

#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<F>(out: &mut [f64], row_len: usize, _work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}
