// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ordered map over independent work items.
//!
//! With the `parallel` feature the items are spread over a rayon pool;
//! without it, or with one worker, they run in order on the calling thread.
//! Either way results come back in input order, so aggregation downstream
//! never depends on scheduling.

#[cfg(feature = "parallel")]
use crate::error::Error;
use crate::error::Result;

pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    /// `workers == 0` uses every available core; `1` is strictly sequential.
    pub fn new(workers: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = if workers == 1 {
                None
            } else {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(workers)
                        .build()
                        .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
                )
            };
            let workers = pool.as_ref().map_or(1, rayon::ThreadPool::current_num_threads);
            Ok(Self { workers, pool })
        }
        #[cfg(not(feature = "parallel"))]
        {
            if workers > 1 {
                log::warn!("built without the `parallel` feature; running {workers} workers sequentially");
            }
            Ok(Self { workers: 1 })
        }
    }

    pub fn sequential() -> Self {
        Self {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// Like [`map`](Self::map), failing with the error of the earliest failed item.
    pub fn try_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}
