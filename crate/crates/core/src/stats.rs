//! Ensemble helpers: ordered parallel maps and Monte-Carlo estimates.
//!
//! Every reduction runs sequentially over an index-ordered buffer, so totals
//! are bit-identical regardless of the rayon thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Number of batches for batch-means standard errors.
pub const DEFAULT_BATCHES: usize = 20;

/// A Monte-Carlo point estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Self { mean, se: 0.0 }
    }

    /// `|mean - target| <= k * se + slack`.
    pub fn within(&self, target: f64, k: f64, slack: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + slack
    }

    pub fn z_score(&self, target: f64) -> f64 {
        if self.se > 0.0 {
            (self.mean - target) / self.se
        } else if self.mean == target {
            0.0
        } else {
            f64::INFINITY.copysign(self.mean - target)
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean with the iid standard error `sd / sqrt(n)`.
pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return Estimate { mean: m, se: f64::NAN };
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    Estimate {
        mean: m,
        se: (var / n as f64).sqrt(),
    }
}

/// Mean with a batch-means standard error over `n_batches` contiguous batches.
/// Falls back to the iid error when there are too few samples per batch.
pub fn batch_means(xs: &[f64], n_batches: usize) -> Estimate {
    let n = xs.len();
    if n_batches < 2 || n < 2 * n_batches {
        return mean_se(xs);
    }
    let size = n / n_batches;
    let batch: Vec<f64> = (0..n_batches)
        .map(|b| {
            let end = if b + 1 == n_batches { n } else { (b + 1) * size };
            mean(&xs[b * size..end])
        })
        .collect();
    let m = mean(xs);
    let bm = mean(&batch);
    let var = batch.iter().map(|x| (x - bm) * (x - bm)).sum::<f64>() / (n_batches - 1) as f64;
    Estimate {
        mean: m,
        se: (var / n_batches as f64).sqrt(),
    }
}

/// `-log E[e^{-f}]` from samples of `f`, with a delta-method error.
/// Returns the estimate and the per-sample influence values.
pub fn neg_log_mean_exp(f: &[f64]) -> (Estimate, Vec<f64>) {
    let shift = f.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = f.iter().map(|v| (-(v - shift)).exp()).collect();
    let me = mean(&e);
    let value = shift - me.ln();
    let infl: Vec<f64> = e.iter().map(|x| -(x - me) / me).collect();
    let se = mean_se(&infl).se;
    (Estimate { mean: value, se }, infl)
}

/// Ordered parallel map over `0..n`.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Fallible ordered parallel map; the first error in index order is returned.
pub fn try_par_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = (0..n).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_samples() {
        let e = mean_se(&[3.0; 10]);
        assert_eq!(e.mean, 3.0);
        assert_eq!(e.se, 0.0);
        let b = batch_means(&[3.0; 100], 20);
        assert_eq!(b.mean, 3.0);
        assert_eq!(b.se, 0.0);
    }

    #[test]
    fn batch_means_matches_iid_order_of_magnitude() {
        let xs: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let a = mean_se(&xs);
        let b = batch_means(&xs, 20);
        assert_eq!(a.mean, b.mean);
        assert!(b.se < 10.0 * a.se + 1e-3);
    }

    #[test]
    fn neg_log_mean_exp_constant() {
        let (e, _) = neg_log_mean_exp(&[2.0; 50]);
        assert!((e.mean - 2.0).abs() < 1e-15);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn neg_log_mean_exp_is_stable_for_large_values() {
        let (e, _) = neg_log_mean_exp(&[-800.0, -800.0]);
        assert!((e.mean + 800.0).abs() < 1e-9);
    }

    #[test]
    fn par_map_is_ordered() {
        let v = par_map(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
