use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};

/// Least-squares fit of `log y = intercept + slope · log x`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square of the log-space residuals.
    pub residual: f64,
    pub slope_se: f64,
    /// 95% interval for the slope; absent with only two points.
    pub ci95: Option<(f64, f64)>,
    pub points: usize,
}

pub fn fit_rate(x: &[f64], y: &[f64]) -> Result<RateFit> {
    if x.len() != y.len() {
        return invalid("rate fit needs as many abscissae as values");
    }
    if x.len() < 2 {
        return invalid("rate fit needs at least two points");
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0 && v.is_finite())) {
        return invalid("rate fit needs positive finite data");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("rate fit needs distinct abscissae");
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let dof = x.len() - 2;
    let (slope_se, ci95) = if dof == 0 {
        (0.0, None)
    } else {
        let se = (rss / dof as f64 / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, dof as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        (se, Some((slope - t * se, slope + t * se)))
    };
    Ok(RateFit {
        slope,
        intercept,
        residual: (rss / n).sqrt(),
        slope_se,
        ci95,
        points: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_power_law_is_recovered() {
        let x = [0.5, 0.25, 0.125, 0.0625];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let f = fit_rate(&x, &y).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(f.residual < 1e-12);
        let (lo, hi) = f.ci95.unwrap();
        assert!(lo <= 1.5 + 1e-12 && hi >= 1.5 - 1e-12);
    }

    #[test]
    fn two_points_have_no_interval() {
        let f = fit_rate(&[1.0, 2.0], &[1.0, 4.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14);
        assert!(f.ci95.is_none());
    }

    #[test]
    fn student_interval_for_known_residuals() {
        // log-log data (0,0), (1,1), (2,1), (3,2): slope 0.6, rss 0.2.
        let e = std::f64::consts::E;
        let x = [1.0, e, e * e, e * e * e];
        let y = [1.0, e, e, e * e];
        let f = fit_rate(&x, &y).unwrap();
        assert!((f.slope - 0.6).abs() < 1e-12);
        let se = (0.2f64 / 2.0 / 5.0).sqrt();
        assert!((f.slope_se - se).abs() < 1e-12);
        let (lo, hi) = f.ci95.unwrap();
        // t_{0.975, 2} = 4.302652729911275
        assert!((hi - lo - 2.0 * 4.302_652_729_911_275 * se).abs() < 1e-9);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(fit_rate(&[1.0], &[1.0]).is_err());
        assert!(fit_rate(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert!(fit_rate(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    proptest! {
        #[test]
        fn slope_is_scale_invariant(a in 0.1f64..10.0, b in 0.1f64..10.0, s in -2.0f64..3.0) {
            let x = [1.0f64, 2.0, 4.0, 8.0, 16.0];
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.powf(s) * (1.0 + 0.1 * ((i * 7) % 3) as f64)).collect();
            let f1 = fit_rate(&x, &y).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| a * v).collect();
            let ys: Vec<f64> = y.iter().map(|v| b * v).collect();
            let f2 = fit_rate(&xs, &ys).unwrap();
            prop_assert!((f1.slope - f2.slope).abs() < 1e-9);
            prop_assert!((f1.residual - f2.residual).abs() < 1e-9);
        }
    }
}
