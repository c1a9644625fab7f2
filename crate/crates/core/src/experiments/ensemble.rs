//! Path-parallel ensemble execution with deterministic aggregation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::hash_seed;

/// Per-path seed `hash(base, index)`.
pub fn path_seed(base: u64, index: usize) -> u64 {
    hash_seed(base, index as u64)
}

/// Runs `f(index, seed)` for `index in 0..m` on a pool of `workers` threads
/// (all available cores when `None`) and returns the results in path order.
/// The first failing path by index aborts the ensemble.
pub fn map_paths<T, F>(m: usize, base_seed: u64, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync + Send,
{
    if m == 0 {
        return Err(Error::NotEnoughData {
            what: "ensemble paths",
            need: 1,
            got: 0,
        });
    }
    let run = || -> Vec<Result<T>> {
        (0..m)
            .into_par_iter()
            .map(|i| f(i, path_seed(base_seed, i)))
            .collect()
    };
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::PathFailed {
                index,
                seed: path_seed(base_seed, index),
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_worker_independence() {
        let f = |i: usize, s: u64| Ok((i, s, (s as f64).sqrt()));
        let a = map_paths(37, 11, Some(1), f).unwrap();
        let b = map_paths(37, 11, Some(8), f).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, r)| r.0 == i && r.1 == path_seed(11, i)));
    }

    #[test]
    fn failure_reports_lowest_index_and_seed() {
        let err = map_paths(10, 3, Some(4), |i, _| {
            if i == 4 || i == 7 {
                Err(Error::InvalidInput("boom".into()))
            } else {
                Ok(i)
            }
        })
        .unwrap_err();
        match err {
            Error::PathFailed { index, seed, .. } => {
                assert_eq!(index, 4);
                assert_eq!(seed, path_seed(3, 4));
            }
            other => panic!("{other:?}"),
        }
        assert!(map_paths(0, 1, None, |_, _| Ok(())).is_err());
    }
}
