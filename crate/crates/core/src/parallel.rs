//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every hot loop in the crate goes through this module. With the `parallel`
//! feature (default) the loops fan out on the rayon pool; without it they
//! compile to plain sequential iteration. [`run_sequential`] additionally
//! forces the sequential path at runtime for the current thread, which is how
//! the criterion benches compare both paths in one binary and how tests assert
//! that the two paths agree bit-for-bit.
//!
//! Determinism: each closure invocation owns a disjoint output chunk whose
//! position is a pure function of the chunk index, and all accumulations
//! inside a chunk run in a fixed order. No reduction order ever depends on
//! thread scheduling, so parallel and sequential results are identical down
//! to the last bit.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with all crate-level parallel loops forced onto the sequential
/// path (for the current thread). Nestable; restores the previous state.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

/// True when the calling thread should use the rayon path.
pub fn parallel_active() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Splits `data` into chunks of `chunk_len` and applies `f(chunk_index, chunk)`
/// to each. The final chunk may be shorter. Chunk boundaries are fixed, so the
/// work decomposition is identical on both paths.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    if parallel_active() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Parallel loop over `0..n` for tasks without shared mutable output
/// (each task writes through its own synchronization-free channel, e.g.
/// raw pointers into disjoint regions managed by the caller, or is pure).
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        (0..n).into_par_iter().for_each(|i| f(i));
        return;
    }
    for i in 0..n {
        f(i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_loop_covers_all_elements_once() {
        let mut v = vec![0u32; 1003];
        for_each_chunk_mut(&mut v, 64, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = (i * 64 + j) as u32;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| x as usize == i));
    }

    #[test]
    fn sequential_override_restores_state() {
        assert_eq!(parallel_active(), cfg!(feature = "parallel"));
        let inner = run_sequential(|| {
            assert!(!parallel_active());
            run_sequential(parallel_active)
        });
        assert!(!inner);
        assert_eq!(parallel_active(), cfg!(feature = "parallel"));
    }
}
