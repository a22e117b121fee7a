//! Chunked map over samples, backed by rayon when the `parallel` feature is on.
//!
//! Results come back in chunk order and the chunk boundaries do not depend
//! on the thread count, so any in-order reduction over them is reproducible
//! bit for bit.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    /// Rayon worker pool; identical to `Sequential` without the `parallel` feature.
    #[default]
    Parallel,
}

/// Apply `f` to consecutive chunks of `items` and collect results in order.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            items.par_chunks(chunk).map(f).collect()
        }
        _ => items.chunks(chunk).map(f).collect(),
    }
}
