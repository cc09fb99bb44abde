//! Discrete norms, Monte Carlo statistics and rate fits over ensembles of trajectories.

pub mod error;
pub mod extrapolation;
pub mod rates;
pub mod stability;

use nalgebra::DMatrix;
use serde::Serialize;

pub use error::{
    error_stats, sample_error, sample_errors, temporal_oscillation, ErrorContext, ErrorLevel, ErrorStats, SampleError,
    Transfer,
};
pub use extrapolation::{
    extrapolation_check, extrapolation_sample, ExtrapolationReport, ExtrapolationSample, StoppingRule,
};
pub use rates::{fit_rate, RateFit};
pub use stability::{besov_halves, sample_stability, stability_stats, BesovMode, SampleStability, StabilityStats};

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }
}

/// Pairwise squared distances `D[n][m] = ‖x_n − x_m‖²` from a Gram matrix.
pub(crate) fn pairwise_from_gram(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    DMatrix::from_fn(n, n, |i, j| (g[(i, i)] + g[(j, j)] - 2.0 * g[(i, j)]).max(0.0))
}

/// `D_k = Σ_{n=k}^{N} d(n, n−k)` for `k = 1..=N`.
pub(crate) fn lag_sums(d: &DMatrix<f64>) -> Vec<f64> {
    let n = d.nrows();
    (1..n).map(|k| (k..n).map(|i| d[(i, i - k)]).sum()).collect()
}

/// Gram matrix `XᵀAX` of column vectors under a symmetric operator.
pub(crate) fn gram(cols: &[Vec<f64>], apply: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let dim = cols[0].len();
    let x = DMatrix::from_fn(dim, cols.len(), |i, j| cols[j][i]);
    let ax_cols: Vec<Vec<f64>> = cols.iter().map(|c| apply(c)).collect();
    let ax = DMatrix::from_fn(dim, cols.len(), |i, j| ax_cols[j][i]);
    let g = x.transpose() * ax;
    (&g + g.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = Estimate::of(&[2.0; 5]);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn estimate_matches_hand_computation() {
        let e = Estimate::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((e.mean - 2.5).abs() < 1e-15);
        assert!((e.se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lag_sums_of_scalar_sequence() {
        let xs = [0.0, 1.0, 3.0, 6.0];
        let d = DMatrix::from_fn(4, 4, |i, j| (xs[i] - xs[j]) * (xs[i] - xs[j]));
        assert_eq!(lag_sums(&d), vec![1.0 + 4.0 + 9.0, 9.0 + 25.0, 36.0]);
    }
}
