//! Order-preserving map over work items, on a rayon pool when the
//! `parallel` feature is enabled and sequentially otherwise.
//!
//! Results always come back in input order, so any reduction done by the
//! caller is independent of the worker count.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
    workers: usize,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            #[cfg(feature = "parallel")]
            pool: None,
            workers: 1,
        }
    }

    /// `workers <= 1` (or a build without the `parallel` feature) runs
    /// everything on the calling thread.
    pub fn with_workers(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        if workers > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return Executor {
                    pool: Some(Arc::new(pool)),
                    workers,
                };
            }
        }
        let _ = workers;
        Executor::sequential()
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..200).collect();
        let seq = Executor::sequential().map(&items, |x| x * x + 1);
        let par = Executor::with_workers(4).map(&items, |x| x * x + 1);
        assert_eq!(seq, par);
        assert_eq!(seq[10], 101);
    }
}
