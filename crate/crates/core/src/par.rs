//! Row-parallel dispatch.
//!
//! Every compensation formula is independent per output row given the shared
//! inverse factor, so the hot loops split the weight matrix into row chunks.
//! With the `parallel` feature the chunks run on the rayon pool; without it,
//! or with [`Exec::Sequential`], they run in order on the calling thread.
//! Results are identical either way: no reduction crosses a chunk boundary.

use serde::{Deserialize, Serialize};

/// How row chunks and independent trials are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` only has an effect when the crate is built with `parallel`.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn threads(self) -> usize {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return rayon::current_num_threads();
        }
        1
    }

    /// Rows per task: one chunk when sequential, otherwise a few chunks per
    /// worker but never fewer than `min_rows` rows each.
    pub(crate) fn rows_per_task(self, rows: usize, min_rows: usize) -> usize {
        let threads = self.threads();
        if threads <= 1 {
            return rows.max(1);
        }
        rows.div_ceil(threads * 4).max(min_rows).max(1)
    }
}

/// Splits a row-major buffer into chunks of `per` rows.
pub(crate) fn row_chunks<T>(data: &mut [T], row_len: usize, per: usize) -> Vec<&mut [T]> {
    if row_len == 0 {
        return Vec::new();
    }
    data.chunks_mut(per * row_len).collect()
}

/// Runs `f` on every item, on the rayon pool when allowed.
pub(crate) fn run_chunks<I, F>(exec: Exec, items: Vec<I>, f: F)
where
    I: Send,
    F: Fn(I) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        items.into_par_iter().for_each(f);
        return;
    }
    let _ = exec;
    items.into_iter().for_each(f);
}

/// Maps `f` over `0..n`, in parallel when allowed. Output order is index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `f` on a dedicated pool of `threads` workers (inline when the
/// `parallel` feature is off).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
