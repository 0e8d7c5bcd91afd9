//! Execution strategy for the data-parallel inner loops (batch rows,
//! grid cells, sweep cells, retrospective evaluation).
//!
//! With the `parallel` feature the work is spread over the current rayon
//! pool. Without it, or with [`Exec::Sequential`], everything runs on the
//! calling thread. Results always come back in index order, and every
//! reduction over them happens sequentially in that order, so both modes
//! produce bit-identical numbers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this build can actually run work in parallel.
    pub const fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// Evaluate `f(0..n)` and collect in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel => par_map(n, f),
        }
    }

    /// Map over a slice, preserving order.
    pub fn map_slice<'a, A, T, F>(self, items: &'a [A], f: F) -> Vec<T>
    where
        A: Sync,
        T: Send,
        F: Fn(&'a A) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Run `f` inside a pool with `workers` threads. `workers == 0` uses the
/// global pool.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_workers: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}
