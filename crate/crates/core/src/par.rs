//! Order-preserving map over batch items, optionally on a thread pool.

#[cfg(feature = "parallel")]
pub struct Pool(Option<rayon::ThreadPool>);

#[cfg(not(feature = "parallel"))]
pub struct Pool;

impl Pool {
    /// `threads <= 1` runs everything on the calling thread.
    pub fn new(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if threads > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("thread pool");
                return Pool(Some(pool));
            }
            Pool(None)
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Pool
        }
    }

    /// Results come back in index order regardless of scheduling.
    pub fn map<R: Send>(&self, indices: &[usize], f: impl Fn(usize) -> R + Sync) -> Vec<R> {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.0 {
            use rayon::prelude::*;
            return pool.install(|| indices.par_iter().map(|&i| f(i)).collect());
        }
        indices.iter().map(|&i| f(i)).collect()
    }
}
