//! Bounded data-parallel execution.
//!
//! With the `parallel` feature, work fans out over a rayon pool of the
//! requested width. Without it, or with a width of 1, everything runs on the
//! calling thread. Results always come back in input order.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Parallelism(NonZeroUsize);

impl Parallelism {
    pub fn sequential() -> Self {
        Self(NonZeroUsize::MIN)
    }

    /// `threads` is clamped to at least 1.
    pub fn new(threads: usize) -> Self {
        Self(NonZeroUsize::new(threads).unwrap_or(NonZeroUsize::MIN))
    }

    /// One worker per available core.
    pub fn available() -> Self {
        Self(std::thread::available_parallelism().unwrap_or(NonZeroUsize::MIN))
    }

    pub fn threads(self) -> usize {
        self.0.get()
    }

    /// Whether this build can actually run work concurrently.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self.threads() > 1
    }

    /// Applies `f` to every item, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() && items.len() > 1 {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(self.threads()).build() {
                Ok(pool) => return pool.install(|| items.par_iter().map(&f).collect()),
                Err(e) => log::warn!("falling back to sequential execution: {e}"),
            }
        }
        items.iter().map(f).collect()
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Self::available()
    }
}
