use super::grid::TimeGrid;
use crate::error::{invalid, Result};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseRule {
    /// `G e_k = g_k`
    Additive,
    /// `G(u) e_k = g_k ⊙ u`
    Linear,
    /// `G(u) e_k = g_k ⊙ σ(u)`, `σ(u) = u / sqrt(1 + |u|²)`
    BoundedLipschitz,
}

impl NoiseRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "linear" => Ok(Self::Linear),
            "bounded-lipschitz" | "bounded_lipschitz" => Ok(Self::BoundedLipschitz),
            other => invalid(format!("unknown noise rule '{other}'")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Additive => "additive",
            Self::Linear => "linear",
            Self::BoundedLipschitz => "bounded-lipschitz",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Modulation {
    Constant,
    /// `sin(freq * t)`
    Sine {
        freq: f64,
    },
}

impl Modulation {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Self::Constant => 1.0,
            Self::Sine { freq } => (freq * t).sin(),
        }
    }
}

/// Stream function `64 b(x,y)² cos(kπx) cos(kπy)` with `b = x(1-x)y(1-y)`; returns its curl
/// `(∂_y ψ, -∂_x ψ)`. Vanishes with its gradient on the boundary of the unit square.
pub fn curl_bubble(k: usize, x: f64, y: f64) -> [f64; 2] {
    let w = k as f64 * PI;
    let bx = x * (1.0 - x);
    let by = y * (1.0 - y);
    let b = bx * by;
    let b_x = (1.0 - 2.0 * x) * by;
    let b_y = bx * (1.0 - 2.0 * y);
    let (cx, sx) = ((w * x).cos(), (w * x).sin());
    let (cy, sy) = ((w * y).cos(), (w * y).sin());
    let c = cx * cy;
    let big = b * b;
    let psi_x = 2.0 * b * b_x * c - big * w * sx * cy;
    let psi_y = 2.0 * b * b_y * c - big * w * cx * sy;
    [64.0 * psi_y, -64.0 * psi_x]
}

/// Noise coefficient `G(t, u)` expanded in `M` spatial modes `g_k = amplitude · curl_bubble(k)/(k+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub rule: NoiseRule,
    pub modulation: Modulation,
    pub amplitude: f64,
    pub n_modes: usize,
}

impl NoiseModel {
    pub fn new(rule: NoiseRule, modulation: Modulation, amplitude: f64, n_modes: usize) -> Result<Self> {
        if !amplitude.is_finite() {
            return invalid("noise amplitude must be finite");
        }
        if n_modes == 0 {
            return invalid("need at least one noise mode");
        }
        Ok(Self {
            rule,
            modulation,
            amplitude,
            n_modes,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0
    }

    pub fn mode(&self, k: usize, x: [f64; 2]) -> [f64; 2] {
        let g = curl_bubble(k, x[0], x[1]);
        let s = self.amplitude / (k as f64 + 1.0);
        [s * g[0], s * g[1]]
    }

    /// Spatial part of `G(u) e_k` at `x` for velocity value `u`.
    #[inline]
    pub fn apply(&self, k: usize, x: [f64; 2], u: [f64; 2]) -> [f64; 2] {
        self.apply_to_mode(self.mode(k, x), u)
    }

    /// The rule applied to a precomputed mode value `g = g_k(x)`.
    #[inline]
    pub fn apply_to_mode(&self, g: [f64; 2], u: [f64; 2]) -> [f64; 2] {
        match self.rule {
            NoiseRule::Additive => g,
            NoiseRule::Linear => [g[0] * u[0], g[1] * u[1]],
            NoiseRule::BoundedLipschitz => {
                let s = 1.0 / (1.0 + u[0] * u[0] + u[1] * u[1]).sqrt();
                [g[0] * u[0] * s, g[1] * u[1] * s]
            }
        }
    }

    /// Time factor of `G_n`: zero for `n ≤ 2`, else the mean of the modulation over `J_{n-2}`.
    pub fn step_factor(&self, grid: &TimeGrid, n: usize) -> f64 {
        if n <= 2 {
            return 0.0;
        }
        match self.modulation {
            Modulation::Constant => 1.0,
            m => {
                let (a, b) = grid.window(n - 2);
                let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
                let r = (0.6f64).sqrt();
                (5.0 * m.at(c - r * h) + 8.0 * m.at(c) + 5.0 * m.at(c + r * h)) / 18.0
            }
        }
    }

    /// Index of the velocity state `G_n` is evaluated at: `(n-2) ∨ 0`.
    pub fn lag_index(n: usize) -> usize {
        n.saturating_sub(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bubble_curl_matches_finite_differences() {
        let psi = |k: usize, x: f64, y: f64| {
            let b = x * (1.0 - x) * y * (1.0 - y);
            let w = k as f64 * PI;
            64.0 * b * b * (w * x).cos() * (w * y).cos()
        };
        let h = 1e-6;
        for k in 0..4 {
            for &(x, y) in &[(0.3, 0.6), (0.71, 0.2), (0.5, 0.5)] {
                let g = curl_bubble(k, x, y);
                let dy = (psi(k, x, y + h) - psi(k, x, y - h)) / (2.0 * h);
                let dx = (psi(k, x + h, y) - psi(k, x - h, y)) / (2.0 * h);
                assert!((g[0] - dy).abs() < 1e-8);
                assert!((g[1] + dx).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn bubble_vanishes_on_boundary() {
        for t in [0.0, 0.25, 0.8, 1.0] {
            for (x, y) in [(t, 0.0), (t, 1.0), (0.0, t), (1.0, t)] {
                let g = curl_bubble(2, x, y);
                assert!(g[0].abs() < 1e-15 && g[1].abs() < 1e-15);
            }
        }
    }

    #[test]
    fn step_factor_lags_two_windows() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let m = NoiseModel::new(NoiseRule::Additive, Modulation::Sine { freq: 1.0 }, 1.0, 1).unwrap();
        assert_eq!(m.step_factor(&g, 1), 0.0);
        assert_eq!(m.step_factor(&g, 2), 0.0);
        let (a, b) = g.window(3);
        let exact = ((a).cos() - (b).cos()) / (b - a);
        assert!((m.step_factor(&g, 5) - exact).abs() < 1e-9);
    }

    #[test]
    fn bounded_rule_is_bounded() {
        let m = NoiseModel::new(NoiseRule::BoundedLipschitz, Modulation::Constant, 1.0, 1).unwrap();
        let x = [0.3, 0.4];
        let g = m.mode(0, x);
        let big = m.apply(0, x, [1e8, -1e8]);
        assert!(big[0].abs() <= g[0].abs() + 1e-12 && big[1].abs() <= g[1].abs() + 1e-12);
    }
}
