use super::grid::TimeGrid;
use super::sampling::WienerPath;

/// Scalar coefficients of the compensator at `t ∈ J_n`:
/// `Ē(t) = Σ_k alpha_k G_n e_k + beta_k G_{n+1} e_k` with
/// `alpha_k = -∫_t^{t_n+τ/2} a_n dW_k` and `beta_k = ∫_{t_n-τ/2}^t a_{n+1} dW_k` (zero when `n = N`).
#[derive(Clone, Debug, PartialEq)]
pub struct CompensatorCoeffs {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn compensator_coeffs(grid: &TimeGrid, path: &WienerPath, n: usize, t: f64) -> CompensatorCoeffs {
    assert!(n >= 1 && n <= grid.n_steps());
    let (lo, hi) = grid.window(n);
    let t = t.clamp(lo, hi);
    let modes = path.n_modes();
    let alpha = (0..modes)
        .map(|k| -path.integrate(k, t, hi, |a, b| grid.weight_integral(n, a, b)))
        .collect();
    let beta = if n < grid.n_steps() {
        (0..modes)
            .map(|k| path.integrate(k, lo, t, |a, b| grid.weight_integral(n + 1, a, b)))
            .collect()
    } else {
        vec![0.0; modes]
    };
    CompensatorCoeffs { alpha, beta }
}

/// Conditional variance weights: `∫_t^{hi} a_n²` and `∫_{lo}^t a_{n+1}²`.
pub fn compensator_variances(grid: &TimeGrid, n: usize, t: f64) -> (f64, f64) {
    let (lo, hi) = grid.window(n);
    let va = grid.weight_sq_integral(n, t, hi);
    let vb = if n < grid.n_steps() {
        grid.weight_sq_integral(n + 1, lo, t)
    } else {
        0.0
    };
    (va, vb)
}

/// `‖Σ alpha_k f_k + beta_k g_k‖²` from Gram blocks `F = (f_k, f_l)`, `H = (f_k, g_l)`, `K = (g_k, g_l)`
/// stored row-major `M x M`.
pub fn combination_norm_sq(c: &CompensatorCoeffs, f: &[f64], h: &[f64], k: &[f64]) -> f64 {
    let m = c.alpha.len();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += c.alpha[i] * f[i * m + j] * c.alpha[j]
                + 2.0 * c.alpha[i] * h[i * m + j] * c.beta[j]
                + c.beta[i] * k[i * m + j] * c.beta[j];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sampling::{sample_coupled, sample_rng};

    #[test]
    fn endpoints_recover_increments() {
        // at the right end of J_n only beta survives and equals the part of Δ_{n+1}W on J_n
        let g = TimeGrid::new(1.0, 6).unwrap();
        let mut rng = sample_rng(5, 0);
        let path = WienerPath::sample(1.0, g.tau() / 8.0, 2, &mut rng).unwrap();
        let inc = sample_coupled(&g, &path).unwrap();
        let n = 3;
        let (lo, hi) = g.window(n);
        let left = compensator_coeffs(&g, &path, n, lo);
        let right = compensator_coeffs(&g, &path, n, hi);
        let prev_part = path.integrate(0, g.window(n - 1).0, g.window(n - 1).1, |a, b| {
            g.weight_integral(n, a, b)
        });
        assert!((-left.alpha[0] + prev_part - inc.get(n, 0)).abs() < 1e-12);
        assert_eq!(left.beta[0], 0.0);
        assert!(right.alpha[0].abs() < 1e-15);
        let next_tail = path.integrate(0, g.window(n + 1).0, g.window(n + 1).1, |a, b| {
            g.weight_integral(n + 1, a, b)
        });
        assert!((right.beta[0] + next_tail - inc.get(n + 1, 0)).abs() < 1e-12);
    }

    #[test]
    fn variances_bounded_by_third_tau() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        for n in 1..=10 {
            let (lo, hi) = g.window(n);
            for i in 0..=20 {
                let t = lo + (hi - lo) * i as f64 / 20.0;
                let (a, b) = compensator_variances(&g, n, t);
                assert!(a <= g.tau() / 3.0 + 1e-15 && b <= g.tau() / 3.0 + 1e-15);
            }
        }
    }
}
