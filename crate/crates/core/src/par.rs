//! Data-parallel map helpers.
//!
//! `map_collect` fans a pure function over a slice. With the `parallel`
//! feature it runs on the rayon pool; without it the sequential twin is
//! used. Both return results in input order, so any reduction done by the
//! caller sees the same operand order and outputs stay bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, parallel when the `parallel` feature is on.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
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

/// Sequential twin of [`map_collect`], always available. Used as the
/// reference path in tests and benches.
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over indices `0..n`, parallel when the feature is on.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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
