//! Cost and accuracy metrics over replicated runs.

use crate::driver::WeightedSample;
use crate::error::{ArtError, Result};

/// `k + gain * mean(reduced evaluations per run)`.
pub fn expected_cost(k: f64, reduced_evals_per_run: &[u64], gain: f64) -> f64 {
    if reduced_evals_per_run.is_empty() {
        return k;
    }
    let mean = reduced_evals_per_run.iter().map(|&v| v as f64).sum::<f64>()
        / reduced_evals_per_run.len() as f64;
    k + gain * mean
}

/// `(1/R) sum_r (p_r - p)^2 / p^2`.
pub fn relative_sq_error(estimates: &[f64], truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(ArtError::InvalidArgument(
            "relative error against a zero truth".into(),
        ));
    }
    if estimates.is_empty() {
        return Err(ArtError::InsufficientData("no estimates".into()));
    }
    Ok(estimates
        .iter()
        .map(|e| ((e - truth) / truth).powi(2))
        .sum::<f64>()
        / estimates.len() as f64)
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A cumulative distribution function with a known (possibly empty) set of jumps.
pub trait Cdf {
    fn cdf(&self, x: f64) -> f64;
    /// Left limit `F(x-)`.
    fn cdf_left(&self, x: f64) -> f64;
    fn jumps(&self) -> &[f64];
}

/// Right-continuous CDF of a weighted sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    points: Vec<f64>,
    cumulative: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn from_weighted(sample: &WeightedSample) -> Result<Self> {
        if sample.is_empty() {
            return Err(ArtError::InsufficientData("empty sample".into()));
        }
        let w = sample.normalized_weights()?;
        let mut pairs: Vec<(f64, f64)> = sample.values.iter().copied().zip(w).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut points: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut cumulative: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut total = 0.0;
        for (x, wi) in pairs {
            total += wi;
            if points.last() == Some(&x) {
                *cumulative.last_mut().expect("non-empty") = total;
            } else {
                points.push(x);
                cumulative.push(total);
            }
        }
        // guard the top against rounding
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Self { points, cumulative })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        Self::from_weighted(&WeightedSample::uniform(values))
    }
}

impl Cdf for EmpiricalCdf {
    fn cdf(&self, x: f64) -> f64 {
        let i = self.points.partition_point(|&p| p <= x);
        if i == 0 {
            0.0
        } else {
            self.cumulative[i - 1]
        }
    }

    fn cdf_left(&self, x: f64) -> f64 {
        let i = self.points.partition_point(|&p| p < x);
        if i == 0 {
            0.0
        } else {
            self.cumulative[i - 1]
        }
    }

    fn jumps(&self) -> &[f64] {
        &self.points
    }
}

/// Continuous CDF given as a function.
pub struct ContinuousCdf<F: Fn(f64) -> f64>(pub F);

impl<F: Fn(f64) -> f64> Cdf for ContinuousCdf<F> {
    fn cdf(&self, x: f64) -> f64 {
        (self.0)(x)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        (self.0)(x)
    }

    fn jumps(&self) -> &[f64] {
        &[]
    }
}

/// `sup_x |F_sample(x) - F_ref(x)|`, exact: both sides of every jump of
/// either CDF are checked.
pub fn ks_distance(sample: &WeightedSample, reference: &dyn Cdf) -> Result<f64> {
    let f = EmpiricalCdf::from_weighted(sample)?;
    let mut best: f64 = 0.0;
    for &x in f.jumps().iter().chain(reference.jumps()) {
        best = best
            .max((f.cdf(x) - reference.cdf(x)).abs())
            .max((f.cdf_left(x) - reference.cdf_left(x)).abs());
    }
    Ok(best.clamp(0.0, 1.0))
}
