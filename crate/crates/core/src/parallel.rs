//! Fan-out of independent inference work over rayon's pool, with a
//! sequential path that produces identical results in identical order.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Parallel when built with the `parallel` feature and more than one
    /// thread is requested.
    pub fn for_threads(threads: usize) -> Self {
        if cfg!(feature = "parallel") && threads != 1 {
            Self::Parallel
        } else {
            Self::Sequential
        }
    }
}

/// Configures the global pool. `0` keeps rayon's default.
pub fn set_threads(threads: usize) -> Result<()> {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        if threads > 1 {
            return Err(Error::Config(format!(
                "--threads {threads} requested but this build has no parallel support"
            )));
        }
    }
    Ok(())
}

/// `(0..n).map(f)` collected in index order, stopping at the first error.
pub fn map_indices<T, F>(n: usize, exec: Execution, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let f = |i: usize| Ok((i as f64).sqrt().sin());
        let a = map_indices(1000, Execution::Sequential, f).unwrap();
        let b = map_indices(1000, Execution::Parallel, f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_propagate() {
        let r = map_indices(10, Execution::Parallel, |i| {
            if i == 7 {
                Err(Error::Protocol("seven".into()))
            } else {
                Ok(i)
            }
        });
        assert!(r.is_err());
    }
}
