//! Independent replicas on the rayon pool, each on its own stream.

use rayon::prelude::*;

use crate::rng::RngStream;

/// Runs `f(replica, stream)` for `replica in 0..n`, where `stream` is
/// `root.child(replica)`. Results come back in replica order, so any
/// reduction over them is reproducible regardless of scheduling.
pub fn run_replicas<T, F>(root: &RngStream, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, RngStream) -> T + Sync + Send,
{
    (0..n as u64)
        .into_par_iter()
        .map(|r| f(r, root.child(r)))
        .collect()
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
