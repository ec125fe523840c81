//! Data-parallel helpers.
//!
//! Every hot loop in the crate (multistart local searches, per-asset
//! stage-one fits, Monte-Carlo replications, factor draws, rolling windows)
//! goes through [`map_indexed`]. With the `parallel` feature the work is
//! spread over the rayon pool; without it, or when the process-wide mode is
//! switched to [`Execution::Sequential`], the same closure runs in a plain
//! loop. Results are always returned in index order, so the output does not
//! depend on the number of worker threads.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Current process-wide execution mode.
pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Switch the process-wide execution mode. A no-op request for
/// [`Execution::Parallel`] when the crate is built without `parallel`.
pub fn set_execution(mode: Execution) {
    MODE.store(
        match mode {
            Execution::Sequential => 0,
            Execution::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if execution() == Execution::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Evaluate `f` on each element of `items`, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let out = map_indexed(1000, |i| i * 2);
        assert!(out.iter().enumerate().all(|(i, &v)| v == 2 * i));
        let out = map_slice(&[3, 1, 2], |x| x + 1);
        assert_eq!(out, vec![4, 2, 3]);
    }
}
