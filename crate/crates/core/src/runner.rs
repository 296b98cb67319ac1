//! Seed-level parallelism. Every run owns its parameters and RNG streams, so
//! results depend only on the seed; they are returned in input order.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable that forces sequential execution when set to `1`.
pub const DETERMINISTIC_ENV: &str = "TRUSTTUNE_DETERMINISTIC";

/// Worker count after applying the sequential override.
pub fn effective_jobs(requested: usize) -> usize {
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
        1
    } else {
        requested.max(1)
    }
}

/// Runs `f` for every seed on up to `jobs` workers.
pub fn run_seeds<T, F>(seeds: &[u64], jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let jobs = effective_jobs(jobs);
    if jobs == 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_across_workers() {
        let seeds: Vec<u64> = (0..17).collect();
        let seq = run_seeds(&seeds, 1, |s| Ok(s * s)).unwrap();
        let par = run_seeds(&seeds, 4, |s| Ok(s * s)).unwrap();
        assert_eq!(seq, par);
        assert_eq!(par[5], 25);
    }

    #[test]
    fn first_error_is_reported() {
        let err = run_seeds(&[1, 2, 3], 2, |s| {
            if s == 2 {
                Err(Error::Config("bad".into()))
            } else {
                Ok(s)
            }
        });
        assert!(err.is_err());
    }
}
