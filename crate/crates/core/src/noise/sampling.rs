use super::grid::TimeGrid;
use crate::error::{invalid, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::cell::Cell;

/// Independent reproducible stream for sample `index` under a master seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Averaged increments `Δ_n W_k = ∫ a_n dW_k` for `n = 1..=N`, `k < M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    grid: TimeGrid,
    n_modes: usize,
    // mode-major: values[k * N + (n - 1)]
    values: Vec<f64>,
    max_read: Cell<usize>,
}

impl Increments {
    pub fn from_values(grid: TimeGrid, n_modes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_modes * grid.n_steps() {
            return Err(Error::DimensionMismatch(format!(
                "{} increments for {} modes x {} steps",
                values.len(),
                n_modes,
                grid.n_steps()
            )));
        }
        Ok(Self {
            grid,
            n_modes,
            values,
            max_read: Cell::new(0),
        })
    }

    pub fn zeros(grid: TimeGrid, n_modes: usize) -> Self {
        Self::from_values(grid, n_modes, vec![0.0; n_modes * grid.n_steps()]).unwrap()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        debug_assert!(n >= 1 && n <= self.grid.n_steps() && k < self.n_modes);
        if n > self.max_read.get() {
            self.max_read.set(n);
        }
        self.values[k * self.grid.n_steps() + n - 1]
    }

    /// All modes at step `n`.
    pub fn step(&self, n: usize) -> Vec<f64> {
        (0..self.n_modes).map(|k| self.get(n, k)).collect()
    }

    pub fn mode(&self, k: usize) -> &[f64] {
        let nn = self.grid.n_steps();
        &self.values[k * nn..(k + 1) * nn]
    }

    /// Largest step index read through [`Increments::get`] since the last reset.
    pub fn max_step_read(&self) -> usize {
        self.max_read.get()
    }

    pub fn reset_audit(&self) {
        self.max_read.set(0);
    }
}

/// Exact sampler: Cholesky factor of the tridiagonal covariance `∫ a_n a_m`.
#[derive(Clone, Debug)]
pub struct ExactSampler {
    grid: TimeGrid,
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl ExactSampler {
    pub fn new(grid: TimeGrid) -> Self {
        let nn = grid.n_steps();
        let mut diag = vec![0.0; nn];
        let mut sub = vec![0.0; nn];
        for i in 0..nn {
            let d = grid.weight_inner(i + 1, i + 1);
            if i == 0 {
                diag[0] = d.sqrt();
            } else {
                sub[i] = grid.weight_inner(i, i + 1) / diag[i - 1];
                diag[i] = (d - sub[i] * sub[i]).sqrt();
            }
        }
        Self { grid, diag, sub }
    }

    /// `L z` for the lower bidiagonal factor `L`; entry `n` depends on `z_1..z_n` only.
    pub fn correlate(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let mut v = self.diag[i] * z[i];
                if i > 0 {
                    v += self.sub[i] * z[i - 1];
                }
                v
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_modes: usize, rng: &mut R) -> Increments {
        let nn = self.grid.n_steps();
        let mut values = Vec::with_capacity(n_modes * nn);
        for _ in 0..n_modes {
            let z: Vec<f64> = (0..nn).map(|_| rng.sample(StandardNormal)).collect();
            values.extend(self.correlate(&z));
        }
        Increments::from_values(self.grid, n_modes, values).unwrap()
    }
}

pub fn sample_exact<R: Rng + ?Sized>(grid: &TimeGrid, n_modes: usize, rng: &mut R) -> Increments {
    ExactSampler::new(*grid).sample(n_modes, rng)
}

/// Brownian increments on a uniform fine grid of step `δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WienerPath {
    fine_step: f64,
    t_final: f64,
    increments: Vec<Vec<f64>>,
}

fn ratio_is_integer(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    if k >= 1.0 && (r - k).abs() <= 1e-9 * k {
        Some(k as usize)
    } else {
        None
    }
}

impl WienerPath {
    pub fn sample<R: Rng + ?Sized>(t_final: f64, fine_step: f64, n_modes: usize, rng: &mut R) -> Result<Self> {
        let n_fine = Self::cell_count(t_final, fine_step)?;
        let sd = fine_step.sqrt();
        let increments = (0..n_modes)
            .map(|_| (0..n_fine).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Ok(Self {
            fine_step,
            t_final,
            increments,
        })
    }

    pub fn from_increments(t_final: f64, fine_step: f64, increments: Vec<Vec<f64>>) -> Result<Self> {
        let n_fine = Self::cell_count(t_final, fine_step)?;
        if increments.iter().any(|m| m.len() != n_fine) {
            return Err(Error::DimensionMismatch(format!(
                "each mode needs {n_fine} fine increments"
            )));
        }
        Ok(Self {
            fine_step,
            t_final,
            increments,
        })
    }

    fn cell_count(t_final: f64, fine_step: f64) -> Result<usize> {
        if !(fine_step > 0.0 && fine_step.is_finite() && t_final > 0.0) {
            return invalid("fine step and horizon must be positive");
        }
        match ratio_is_integer(t_final, fine_step) {
            Some(k) => Ok(k),
            None => invalid(format!("fine step {fine_step} does not divide T = {t_final}")),
        }
    }

    pub fn fine_step(&self) -> f64 {
        self.fine_step
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn n_modes(&self) -> usize {
        self.increments.len()
    }

    pub fn n_cells(&self) -> usize {
        self.increments.first().map_or(0, Vec::len)
    }

    pub fn mode(&self, k: usize) -> &[f64] {
        &self.increments[k]
    }

    /// `∫_{t0}^{t1} f dW_k` for the piecewise linear interpolant of `W_k`, where
    /// `cell_integral(a, b)` returns `∫_a^b f`.
    pub fn integrate(&self, k: usize, t0: f64, t1: f64, cell_integral: impl Fn(f64, f64) -> f64) -> f64 {
        if t1 <= t0 {
            return 0.0;
        }
        let d = self.fine_step;
        let (j0, j1) = self.cell_range(t0, t1);
        let inc = &self.increments[k];
        (j0..j1)
            .map(|j| {
                let a = (j as f64 * d).max(t0);
                let b = ((j + 1) as f64 * d).min(t1);
                if b > a {
                    inc[j] * cell_integral(a, b) / d
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Fine cells overlapping `[t0, t1]`.
    pub fn cell_range(&self, t0: f64, t1: f64) -> (usize, usize) {
        let d = self.fine_step;
        let j0 = ((t0 / d).floor().max(0.0) as usize).min(self.n_cells());
        let j1 = ((t1 / d - 1e-9).ceil().max(0.0) as usize).min(self.n_cells());
        (j0, j1.max(j0))
    }
}

/// Fine cells read when forming `Δ_n W` from a path.
pub fn coupled_access_range(grid: &TimeGrid, path: &WienerPath, n: usize) -> (usize, usize) {
    let (lo, hi) = grid.weight_support(n);
    path.cell_range(lo, hi)
}

/// `Δ_n W = Σ_j (δ^{-1}∫_{cell j} a_n) ΔW_j`; requires `δ | τ` and matching horizon.
pub fn sample_coupled(grid: &TimeGrid, path: &WienerPath) -> Result<Increments> {
    if ratio_is_integer(grid.tau(), path.fine_step()).is_none() {
        return invalid(format!(
            "fine step {} does not divide tau = {}",
            path.fine_step(),
            grid.tau()
        ));
    }
    if (grid.t_final() - path.t_final()).abs() > 1e-12 * grid.t_final() {
        return invalid("path horizon differs from grid horizon");
    }
    let nn = grid.n_steps();
    let mut values = Vec::with_capacity(path.n_modes() * nn);
    for k in 0..path.n_modes() {
        for n in 1..=nn {
            let (lo, hi) = grid.weight_support(n);
            values.push(path.integrate(k, lo, hi, |a, b| grid.weight_integral(n, a, b)));
        }
    }
    Increments::from_values(*grid, path.n_modes(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reproduces_covariance() {
        let g = TimeGrid::new(1.0, 12).unwrap();
        let s = ExactSampler::new(g);
        for n in 0..12 {
            for m in 0..12 {
                let mut c = 0.0;
                for k in 0..12 {
                    let lnk = if k == n {
                        s.diag[n]
                    } else if k + 1 == n {
                        s.sub[n]
                    } else {
                        0.0
                    };
                    let lmk = if k == m {
                        s.diag[m]
                    } else if k + 1 == m {
                        s.sub[m]
                    } else {
                        0.0
                    };
                    c += lnk * lmk;
                }
                assert!((c - g.weight_inner(n + 1, m + 1)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_sampling_is_causal() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let s = ExactSampler::new(g);
        let z: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let base = s.correlate(&z);
        let mut z2 = z.clone();
        z2[6] += 1.0;
        let moved = s.correlate(&z2);
        for n in 0..6 {
            assert_eq!(base[n], moved[n]);
        }
    }

    #[test]
    fn coupled_rejects_nondividing_step() {
        let g = TimeGrid::new(1.0, 9).unwrap();
        let mut rng = sample_rng(1, 0);
        let path = WienerPath::sample(1.0, 1.0 / 75.0, 1, &mut rng).unwrap();
        assert!(sample_coupled(&g, &path).is_err());
        assert!(WienerPath::sample(1.0, 0.3, 1, &mut rng).is_err());
    }

    #[test]
    fn coupled_reads_only_past_cells() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let mut rng = sample_rng(3, 0);
        let path = WienerPath::sample(1.0, g.tau() / 8.0, 2, &mut rng).unwrap();
        let base = sample_coupled(&g, &path).unwrap();
        for n in 1..=7 {
            let (_, hi) = coupled_access_range(&g, &path, n);
            let limit = ((g.t(n) + 0.5 * g.tau()) / path.fine_step()).round() as usize;
            assert!(hi <= limit);
            // perturbing any later cell leaves Δ_n W unchanged
            let mut inc: Vec<Vec<f64>> = (0..2).map(|k| path.mode(k).to_vec()).collect();
            for v in inc.iter_mut() {
                for x in v[hi..].iter_mut() {
                    *x += 1.0;
                }
            }
            let p2 = WienerPath::from_increments(1.0, path.fine_step(), inc).unwrap();
            let moved = sample_coupled(&g, &p2).unwrap();
            assert_eq!(base.get(n, 0), moved.get(n, 0));
            assert_eq!(base.get(n, 1), moved.get(n, 1));
        }
    }
}
