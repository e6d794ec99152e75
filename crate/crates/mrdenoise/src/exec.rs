//! Execution helpers for the data-parallel kernels.
//!
//! Every parallel loop in this crate follows one rule: a worker owns a
//! disjoint output chunk and performs any reduction into it in a fixed
//! sequential order. Parallel and sequential execution therefore produce
//! bit-identical results, and the choice between them is purely a
//! performance decision.
//!
//! With the `parallel` feature disabled the helpers compile to plain
//! sequential loops and rayon is not linked at all.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Estimated-scalar-op threshold below which rayon dispatch costs more than
/// it saves.
const PAR_MIN_WORK: usize = 32 * 1024;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces all kernels onto their sequential paths while the guard lives.
/// Used by the benches to compare both paths within one binary and by tests
/// asserting par/seq bit-equality. Not meant for production configuration.
#[doc(hidden)]
pub struct SequentialGuard(());

impl SequentialGuard {
    pub fn new() -> Self {
        FORCE_SEQUENTIAL.store(true, Ordering::SeqCst);
        SequentialGuard(())
    }
}

impl Default for SequentialGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for SequentialGuard {
    fn drop(&mut self) {
        FORCE_SEQUENTIAL.store(false, Ordering::SeqCst);
    }
}

#[inline]
fn parallel_enabled(work: usize) -> bool {
    cfg!(feature = "parallel")
        && work >= PAR_MIN_WORK
        && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of `out`.
/// `out.len()` must be a multiple of `chunk_len`. `work` estimates the total
/// scalar operations of the whole call and gates the parallel dispatch.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled(work) {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel_enabled(work);
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Fills `out[i] = f(i)` element-wise.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled(out.len()) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
        return;
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = f(i);
    }
}

/// Element-wise update over three parallel slices of equal length, in fixed
/// `chunk_len` blocks: `f(chunk_index, a_chunk, b_chunk, c_chunk)`.
pub fn for_each_zip3_mut<T, F>(a: &mut [T], b: &mut [T], c: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T], &mut [T]) + Sync,
{
    debug_assert!(a.len() == b.len() && b.len() == c.len());
    #[cfg(feature = "parallel")]
    if parallel_enabled(a.len() * 8) {
        a.par_chunks_mut(chunk_len)
            .zip(b.par_chunks_mut(chunk_len))
            .zip(c.par_chunks_mut(chunk_len))
            .enumerate()
            .for_each(|(i, ((ca, cb), cc))| f(i, ca, cb, cc));
        return;
    }
    let mut ia = a.chunks_mut(chunk_len);
    let mut ib = b.chunks_mut(chunk_len);
    let mut ic = c.chunks_mut(chunk_len);
    let mut i = 0;
    while let (Some(ca), Some(cb), Some(cc)) = (ia.next(), ib.next(), ic.next()) {
        f(i, ca, cb, cc);
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_and_indexed_fill_agree() {
        let n = 64 * 1024;
        let mut a = vec![0u64; n];
        let mut b = vec![0u64; n];
        for_each_chunk_mut(&mut a, 1024, n, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = (i * 1024 + j) as u64 * 3;
            }
        });
        fill_indexed(&mut b, |i| i as u64 * 3);
        assert_eq!(a, b);
    }

    #[test]
    fn sequential_guard_matches_parallel_output() {
        let n = 128 * 1024;
        let mut par = vec![0.0f32; n];
        fill_indexed(&mut par, |i| (i as f32).sin());
        let guard = SequentialGuard::new();
        let mut seq = vec![0.0f32; n];
        fill_indexed(&mut seq, |i| (i as f32).sin());
        drop(guard);
        assert_eq!(par, seq);
    }
}
