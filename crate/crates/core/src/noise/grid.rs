use crate::error::{invalid, Result};

/// Uniform grid `t_n = nτ`, `τ = T/(N+1)`, with averaging windows `J_n = [t_n - τ/2, t_n + τ/2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, n_steps: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) {
            return invalid(format!("final time must be positive, got {t_final}"));
        }
        if n_steps < 1 {
            return invalid("need at least one time step");
        }
        Ok(Self { t_final, n_steps })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    /// `N`: number of computed steps.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn tau(&self) -> f64 {
        self.t_final / (self.n_steps as f64 + 1.0)
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.tau()
    }

    /// Window `J_n`; `J_0 = [0, τ/2]`.
    pub fn window(&self, n: usize) -> (f64, f64) {
        let tau = self.tau();
        let c = self.t(n);
        ((c - 0.5 * tau).max(0.0), c + 0.5 * tau)
    }

    /// Breakpoints of `a_n` and its value at each (piecewise linear between them).
    fn knots(&self, n: usize) -> [(f64, f64); 4] {
        let tau = self.tau();
        if n == 1 {
            [(0.0, 1.0), (0.5 * tau, 1.0), (1.5 * tau, 0.0), (1.5 * tau, 0.0)]
        } else {
            let lo = self.t(n - 1) - 0.5 * tau;
            [(lo, 0.0), (lo + tau, 1.0), (lo + 2.0 * tau, 0.0), (lo + 2.0 * tau, 0.0)]
        }
    }

    /// Support `[lo, hi]` of `a_n`.
    pub fn weight_support(&self, n: usize) -> (f64, f64) {
        let k = self.knots(n);
        (k[0].0, k[2].0)
    }

    /// `a_n(t)`, `1 ≤ n ≤ N`; zero outside its support.
    pub fn weight(&self, n: usize, t: f64) -> f64 {
        assert!(n >= 1 && n <= self.n_steps, "weight index {n} out of range");
        let k = self.knots(n);
        if t < k[0].0 || t > k[2].0 {
            return 0.0;
        }
        for w in k.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 && t1 > t0 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        0.0
    }

    /// Exact `∫_{t0}^{t1} a_n(t) dt`.
    pub fn weight_integral(&self, n: usize, t0: f64, t1: f64) -> f64 {
        self.piecewise_integral(n, t0, t1, |va, vb, len| 0.5 * (va + vb) * len)
    }

    /// Exact `∫_{t0}^{t1} a_n(t)² dt`.
    pub fn weight_sq_integral(&self, n: usize, t0: f64, t1: f64) -> f64 {
        self.piecewise_integral(n, t0, t1, |va, vb, len| (va * va + va * vb + vb * vb) * len / 3.0)
    }

    fn piecewise_integral(&self, n: usize, t0: f64, t1: f64, segment: impl Fn(f64, f64, f64) -> f64) -> f64 {
        if t1 <= t0 {
            return 0.0;
        }
        let k = self.knots(n);
        let mut acc = 0.0;
        for w in k.windows(2) {
            let ((s0, v0), (s1, v1)) = (w[0], w[1]);
            if s1 <= s0 {
                continue;
            }
            let a = s0.max(t0);
            let b = s1.min(t1);
            if b <= a {
                continue;
            }
            let val = |t: f64| v0 + (v1 - v0) * (t - s0) / (s1 - s0);
            acc += segment(val(a), val(b), b - a);
        }
        acc
    }

    /// `∫ a_n a_m dt` in closed form.
    pub fn weight_inner(&self, n: usize, m: usize) -> f64 {
        let tau = self.tau();
        let (lo, hi) = (n.min(m), n.max(m));
        if hi - lo >= 2 {
            0.0
        } else if hi == lo {
            if n == 1 {
                5.0 * tau / 6.0
            } else {
                2.0 * tau / 3.0
            }
        } else {
            tau / 6.0
        }
    }
}
