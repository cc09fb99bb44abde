//! Pressure reconstruction on `V⊥_{h,div}` and the two pressure norms.
//!
//! Velocity increments tested against `V⊥` use the divergence-free initial state, so
//! `(d_1 u, ξ) = (u_1 - Π_div u_0^h, ξ) = 0` there and the non-solenoidal part of `u_0^h` is carried
//! by `π^init` alone.

use crate::error::{Error, Result};
use crate::fem::Discretization;
use crate::sparse::dot;
use crate::stepper::{Stepper, Trajectory};

/// `π_0` with `(π_0, div ξ) = (u_0^h, ξ)` on `V⊥`, for `u_0^h` given on free velocity dofs.
pub fn initial_pressure(disc: &Discretization, u0h: &[f64]) -> Result<Vec<f64>> {
    if u0h.len() != disc.sp.n_velocity() {
        return Err(Error::DimensionMismatch(format!(
            "initial velocity has {} coefficients, expected {}",
            u0h.len(),
            disc.sp.n_velocity()
        )));
    }
    Ok(disc.pressure_from_dual(&disc.mass.matvec(u0h)))
}

/// `‖Π⊥_div v‖_{L²}` for a velocity on free dofs.
pub fn perp_norm(disc: &Discretization, v: &[f64]) -> f64 {
    let r = disc.perp_dual(&disc.mass.matvec(v));
    dot(&r, &disc.mass_solve(&r)).max(0.0).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PressureTrajectory {
    pub init: Vec<f64>,
    /// `π^det_n` for `n = 1..=N` (index `n - 1`).
    pub det: Vec<Vec<f64>>,
    /// `π^sto_n` for `n = 1..=N` (index `n - 1`).
    pub sto: Vec<Vec<f64>>,
    /// `π_0 .. π_N`, accumulated from per-step reconstructions.
    pub pi: Vec<Vec<f64>>,
}

impl PressureTrajectory {
    pub fn n_steps(&self) -> usize {
        self.det.len()
    }

    /// `π^init + π^det_n + π^sto_n` (just `π^init` at `n = 0`).
    pub fn component_sum(&self, n: usize) -> Vec<f64> {
        let mut s = self.init.clone();
        if n > 0 {
            for (i, v) in s.iter_mut().enumerate() {
                *v += self.det[n - 1][i] + self.sto[n - 1][i];
            }
        }
        s
    }

    pub fn increment(&self, n: usize) -> Vec<f64> {
        self.pi[n].iter().zip(&self.pi[n - 1]).map(|(a, b)| a - b).collect()
    }

    /// `d_n π^det`, with `π^det_0 = 0`.
    pub fn det_increment(&self, n: usize) -> Vec<f64> {
        match n {
            1 => self.det[0].clone(),
            _ => self.det[n - 1]
                .iter()
                .zip(&self.det[n - 2])
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `max_n ‖π_n - (π^init + π^det_n + π^sto_n)‖_{Q_sto}`.
    pub fn decomposition_residual(&self, disc: &Discretization) -> f64 {
        (0..=self.n_steps())
            .map(|n| {
                let d: Vec<f64> = self.pi[n]
                    .iter()
                    .zip(self.component_sum(n))
                    .map(|(a, b)| a - b)
                    .collect();
                disc.q_sto_norm(&d)
            })
            .fold(0.0, f64::max)
    }
}

/// Right-hand side of the per-step reconstruction, `M d_n u + τ (S(ε u_n), ∇·) - g_n`.
fn step_load(stepper: &Stepper, traj: &Trajectory, loads: &[Vec<f64>], n: usize) -> Vec<f64> {
    let disc = stepper.disc;
    let du: Vec<f64> = traj.states[n]
        .iter()
        .zip(&traj.states[n - 1])
        .map(|(a, b)| a - b)
        .collect();
    let mut ell = disc.mass.matvec(&disc.expand(&du));
    let s = stepper.stress_dual(&traj.states[n]);
    let tau = stepper.tau();
    for i in 0..ell.len() {
        ell[i] += tau * s[i] - loads[n - 1][i];
    }
    ell
}

fn recorded_loads(traj: &Trajectory) -> Result<&[Vec<f64>]> {
    traj.noise_loads
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("pressure reconstruction needs recorded noise loads".into()))
}

/// Reconstruct `π^init`, `π^det`, `π^sto` and `π_n` step by step; `π_n` only sees data with index `≤ n`.
pub fn reconstruct(stepper: &Stepper, traj: &Trajectory, u0h: &[f64]) -> Result<PressureTrajectory> {
    let disc = stepper.disc;
    let loads = recorded_loads(traj)?;
    let nn = traj.n_steps();
    let init = initial_pressure(disc, u0h)?;
    let nv = disc.sp.n_velocity();
    let tau = stepper.tau();
    let (mut det_load, mut sto_load) = (vec![0.0; nv], vec![0.0; nv]);
    let mut det = Vec::with_capacity(nn);
    let mut sto = Vec::with_capacity(nn);
    let mut pi = Vec::with_capacity(nn + 1);
    pi.push(init.clone());
    for n in 1..=nn {
        let s = stepper.stress_dual(&traj.states[n]);
        for i in 0..nv {
            det_load[i] += tau * s[i];
            sto_load[i] -= loads[n - 1][i];
        }
        det.push(disc.pressure_from_dual(&det_load));
        sto.push(disc.pressure_from_dual(&sto_load));
        let dpi = disc.pressure_from_dual(&step_load(stepper, traj, loads, n));
        let next = pi[n - 1].iter().zip(&dpi).map(|(a, b)| a + b).collect();
        pi.push(next);
    }
    Ok(PressureTrajectory { init, det, sto, pi })
}

/// Largest dual norm over `V⊥` of the per-step reconstruction residual of `π^init + π^det_n + π^sto_n`.
pub fn reconstruction_residual(stepper: &Stepper, traj: &Trajectory, pt: &PressureTrajectory) -> Result<f64> {
    let disc = stepper.disc;
    let loads = recorded_loads(traj)?;
    let mut worst: f64 = 0.0;
    let mut prev = pt.component_sum(0);
    for n in 1..=traj.n_steps() {
        let cur = pt.component_sum(n);
        let d: Vec<f64> = cur.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let ell = step_load(stepper, traj, loads, n);
        let r: Vec<f64> = disc.div_adjoint(&d).iter().zip(&ell).map(|(a, b)| a - b).collect();
        let r = disc.perp_dual(&r);
        worst = worst.max(dot(&r, &disc.mass_solve(&r)).max(0.0).sqrt());
        prev = cur;
    }
    Ok(worst)
}

/// `‖q‖_{L^r}` by quadrature.
pub fn pressure_lp_norm(disc: &Discretization, q: &[f64], r: f64) -> f64 {
    let vals = disc.pressure_at_quadrature(q);
    let s: f64 = vals
        .iter()
        .enumerate()
        .map(|(k, v)| disc.quad_weight(k) * v.abs().powf(r))
        .sum();
    s.powf(1.0 / r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QDetBracket {
    pub lower: f64,
    pub upper: f64,
    /// Ratio after each accepted candidate, starting at the `Q_sto` maximizer.
    pub ascent: Vec<f64>,
}

pub const QDET_CANDIDATES: usize = 32;

fn grad_lp(disc: &Discretization, v: &[f64], p: f64) -> (f64, Vec<[[f64; 2]; 2]>) {
    let g = disc.gradients_at_quadrature(v);
    let s: f64 = g
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let n2 = m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1];
            disc.quad_weight(k) * n2.powf(0.5 * p)
        })
        .sum();
    (s.powf(1.0 / p), g)
}

/// Bracket for `sup_{v ∈ V⊥} (q, div v) / ‖∇v‖_{L^p}`.
///
/// The lower value is the best ratio among ascent iterates in `V⊥` started from `-∇^h q`; the upper
/// value is `√2 ‖q‖_{L^{p'}}`, from `|div v| ≤ √2 |∇v|` and Hölder's inequality.
pub fn q_det_bracket(disc: &Discretization, q: &[f64], p: f64) -> Result<QDetBracket> {
    if p <= 1.0 {
        return Err(Error::InvalidParameter(format!("exponent {p} must exceed 1")));
    }
    let pd = p / (p - 1.0);
    let upper = std::f64::consts::SQRT_2 * pressure_lp_norm(disc, q, pd);
    let bt = disc.div_adjoint(q);
    let mut v = disc.mass_solve(&bt);
    if dot(&bt, &v) <= 0.0 {
        return Ok(QDetBracket {
            lower: 0.0,
            upper,
            ascent: vec![0.0],
        });
    }
    let ratio = |v: &[f64]| {
        let (d, g) = grad_lp(disc, v, p);
        (dot(&bt, v) / d, d, g)
    };
    let (mut r, mut d, mut g) = ratio(&v);
    let mut ascent = vec![r];
    let mut step = 0.5;
    while ascent.len() < QDET_CANDIDATES {
        let weighted: Vec<[[f64; 2]; 2]> = g
            .iter()
            .map(|m| {
                let n2 = m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1];
                let w = if n2 > 0.0 { n2.powf(0.5 * (p - 2.0)) } else { 0.0 };
                [[w * m[0][0], w * m[0][1]], [w * m[1][0], w * m[1][1]]]
            })
            .collect();
        let gd = disc.matrix_dual(&weighted);
        let scale = r * d.powf(1.0 - p);
        let grad: Vec<f64> = bt.iter().zip(&gd).map(|(b, x)| (b - scale * x) / d).collect();
        let dir = disc.mass_solve(&disc.perp_dual(&grad));
        let (nv, nd) = (disc.mass_norm_sq(&v).sqrt(), disc.mass_norm_sq(&dir).sqrt());
        if nd == 0.0 || !nd.is_finite() {
            break;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let t = step * nv / nd;
            let trial: Vec<f64> = v.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            let (r2, d2, g2) = ratio(&trial);
            if r2 > r {
                v = trial;
                r = r2;
                d = d2;
                g = g2;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        ascent.push(r);
    }
    Ok(QDetBracket {
        lower: r,
        upper,
        ascent,
    })
}
