//! One step of the averaged scheme: find `u_n ∈ V_{h,div}` with
//! `(u_n - u_{n-1}, ξ) + τ (S(ε u_n), ε ξ) = (G_n(u_{(n-2)∨0}) Δ_n W, ξ)` for all `ξ ∈ V_{h,div}`,
//! solved by damped Newton in the explicit divergence-free basis.

use crate::error::{Error, Result};
use crate::fem::element::NQ;
use crate::fem::{Discretization, DivFreeBasis, NONE};
use crate::noise::{Increments, NoiseModel, TimeGrid};
use crate::sparse::{dot, Csr, Skyline};
use crate::tensor::{Mat2, PowerLaw};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianStrategy {
    /// Assemble and factor the Jacobian at every Newton iterate.
    Exact,
    /// Keep a factorization as preconditioner for conjugate gradients; refactor when more than
    /// `max_pcg` iterations are needed.
    Stale { max_pcg: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub abs_tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub min_step: f64,
    pub picard_iter: usize,
    /// Lower clamp of `|ε u|` inside the Jacobian only.
    pub reg: f64,
    pub strategy: JacobianStrategy,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            max_iter: 50,
            armijo: 0.5,
            min_step: 2f64.powi(-20),
            picard_iter: 20,
            reg: 1e-8,
            strategy: JacobianStrategy::Exact,
        }
    }
}

/// Spatial noise modes tabulated at quadrature points.
#[derive(Clone, Debug)]
pub struct NoiseAssembler {
    pub model: NoiseModel,
    modes: Vec<Vec<[f64; 2]>>,
    points: Vec<[f64; 2]>,
}

impl NoiseAssembler {
    pub fn new(disc: &Discretization, model: NoiseModel) -> Self {
        let points: Vec<[f64; 2]> = (0..disc.n_quad()).map(|k| disc.quad_point(k)).collect();
        let modes = (0..model.n_modes)
            .map(|k| points.iter().map(|&x| model.mode(k, x)).collect())
            .collect();
        Self { model, modes, points }
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    #[inline]
    fn apply(&self, k: usize, q: usize, u: [f64; 2]) -> [f64; 2] {
        self.model.apply_to_mode(self.modes[k][q], u)
    }

    /// `factor · G(v) e_k` at every quadrature point.
    pub fn mode_values(&self, k: usize, factor: f64, vel: &[[f64; 2]]) -> Vec<[f64; 2]> {
        (0..self.points.len())
            .map(|q| {
                let g = self.apply(k, q, vel[q]);
                [factor * g[0], factor * g[1]]
            })
            .collect()
    }

    /// `factor · Σ_k w_k G(v) e_k` at every quadrature point.
    pub fn combined(&self, factor: f64, weights: &[f64], vel: &[[f64; 2]]) -> Vec<[f64; 2]> {
        (0..self.points.len())
            .map(|q| {
                let mut f = [0.0; 2];
                for (k, &w) in weights.iter().enumerate() {
                    let g = self.apply(k, q, vel[q]);
                    f[0] += w * g[0];
                    f[1] += w * g[1];
                }
                [factor * f[0], factor * f[1]]
            })
            .collect()
    }

    /// `‖factor · G(v)‖²_{HS} = Σ_k ‖factor · G(v) e_k‖²_{L²}`.
    pub fn hs_norm_sq(&self, disc: &Discretization, factor: f64, vel: &[[f64; 2]]) -> f64 {
        let mut s = 0.0;
        for q in 0..self.points.len() {
            let w = disc.quad_weight(q);
            for k in 0..self.modes.len() {
                let g = self.apply(k, q, vel[q]);
                s += w * (g[0] * g[0] + g[1] * g[1]);
            }
        }
        factor * factor * s
    }

    /// Gram matrix `(fa G(va) e_k, fb G(vb) e_l)` row-major.
    pub fn gram(&self, disc: &Discretization, fa: f64, va: &[[f64; 2]], fb: f64, vb: &[[f64; 2]]) -> Vec<f64> {
        let m = self.modes.len();
        let mut out = vec![0.0; m * m];
        let mut ga = vec![[0.0; 2]; m];
        let mut gb = vec![[0.0; 2]; m];
        for q in 0..self.points.len() {
            let w = disc.quad_weight(q);
            for k in 0..m {
                ga[k] = self.apply(k, q, va[q]);
                gb[k] = self.apply(k, q, vb[q]);
            }
            for k in 0..m {
                for l in 0..m {
                    out[k * m + l] += w * (ga[k][0] * gb[l][0] + ga[k][1] * gb[l][1]);
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= fa * fb);
        out
    }
}

/// `Σ_q w_q F(x_q)·z_d(x_q)` for each reduced basis function.
pub fn reduced_vector_dual(disc: &Discretization, values: &[[f64; 2]]) -> Vec<f64> {
    let b = &disc.basis;
    let mut out = vec![0.0; b.dim];
    for (t, dofs) in b.macro_dofs.iter().enumerate() {
        for j in 0..3 {
            let child = 3 * t + j;
            for q in 0..NQ {
                let k = child * NQ + q;
                let w = disc.quad_weight(k);
                let f = values[k];
                let base = DivFreeBasis::at(child, q, 0);
                for d in 0..12 {
                    if dofs[d] != NONE {
                        let v = b.vel[base + d];
                        out[dofs[d]] += w * (f[0] * v[0] + f[1] * v[1]);
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn strain_norm(e: [f64; 2]) -> f64 {
    (2.0 * (e[0] * e[0] + e[1] * e[1])).sqrt()
}

struct Eval {
    c: Vec<f64>,
    res: Vec<f64>,
    eps: Vec<[f64; 2]>,
    energy: f64,
    norm: f64,
}

/// Per-quadrature-point Jacobian data `(alpha, beta, â0, â1)`.
type Lin = [f64; 4];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub newton_iterations: usize,
    pub residual: f64,
    pub pcg_iterations: usize,
    pub factorizations: usize,
    pub picard_used: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub report: StepReport,
    /// `G_n(u_{(n-2)∨0}) Δ_n W` as a functional on free velocity dofs, when recorded.
    pub noise_load: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Recording {
    pub noise_loads: bool,
    pub multipliers: bool,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub cells: usize,
    pub grid: TimeGrid,
    /// Reduced coefficients of `u_0 .. u_N`.
    pub states: Vec<Vec<f64>>,
    /// Noise functionals for `n = 1..=N` (index `n - 1`).
    pub noise_loads: Option<Vec<Vec<f64>>>,
    /// `λ_n` for `n = 1..=N` (index `n - 1`).
    pub multipliers: Option<Vec<Vec<f64>>>,
    pub reports: Vec<StepReport>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }
}

pub struct Stepper<'a> {
    pub disc: &'a Discretization,
    pub grid: TimeGrid,
    pub law: PowerLaw,
    pub noise: NoiseAssembler,
    pub opts: NewtonOptions,
    pub recording: Recording,
    sky: Skyline,
    template: Vec<f64>,
    slots: Vec<[usize; 144]>,
    factored: bool,
    lin: Vec<Lin>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        disc: &'a Discretization,
        grid: TimeGrid,
        law: PowerLaw,
        noise: NoiseModel,
        opts: NewtonOptions,
    ) -> Self {
        let b = &disc.basis;
        let rm = &disc.reduced_mass;
        let mut trip: Vec<(usize, usize, f64)> = (0..rm.nrows)
            .flat_map(|r| rm.row(r).map(move |(c, _)| (r, c, 0.0)))
            .collect();
        for dofs in &b.macro_dofs {
            for &a in dofs.iter().filter(|&&a| a != NONE) {
                for &c in dofs.iter().filter(|&&c| c != NONE) {
                    trip.push((a, c, 0.0));
                }
            }
        }
        let pattern = Csr::from_triplets(b.dim, b.dim, &trip);
        let mut sky = Skyline::analyze(&pattern);
        sky.load(&disc.reduced_mass);
        let template = sky.values().to_vec();
        let slots = b
            .macro_dofs
            .iter()
            .map(|dofs| {
                let mut s = [NONE; 144];
                for d in 0..12 {
                    for e in d..12 {
                        if dofs[d] != NONE && dofs[e] != NONE {
                            s[d * 12 + e] = sky.slot(dofs[d], dofs[e]).expect("pattern");
                        }
                    }
                }
                s
            })
            .collect();
        Self {
            disc,
            grid,
            law,
            noise: NoiseAssembler::new(disc, noise),
            opts,
            recording: Recording::default(),
            sky,
            template,
            slots,
            factored: false,
            lin: vec![[0.0; 4]; disc.n_quad()],
        }
    }

    pub fn tau(&self) -> f64 {
        self.grid.tau()
    }

    fn is_linear(&self) -> bool {
        self.law.p() == 2.0
    }

    /// `Σ_q w S(ε u):ε z_d` in reduced coordinates.
    pub fn stress_reduced(&self, eps: &[[f64; 2]]) -> Vec<f64> {
        let b = &self.disc.basis;
        let mut out = vec![0.0; b.dim];
        let (p, kappa) = (self.law.p(), self.law.kappa());
        for (t, dofs) in b.macro_dofs.iter().enumerate() {
            for j in 0..3 {
                let child = 3 * t + j;
                for q in 0..NQ {
                    let k = child * NQ + q;
                    let e = eps[k];
                    let nrm = strain_norm(e);
                    let phi = if p == 2.0 {
                        1.0
                    } else if kappa + nrm == 0.0 {
                        0.0
                    } else {
                        (kappa + nrm).powf(p - 2.0)
                    };
                    let w = 2.0 * self.disc.quad_weight(k) * phi;
                    let base = DivFreeBasis::at(child, q, 0);
                    for d in 0..12 {
                        if dofs[d] != NONE {
                            let z = b.eps[base + d];
                            out[dofs[d]] += w * (e[0] * z[0] + e[1] * z[1]);
                        }
                    }
                }
            }
        }
        out
    }

    fn evaluate(&self, c: Vec<f64>, rhs: &[f64]) -> Eval {
        let (_, eps) = self.disc.reduced_at_quadrature(&c);
        let a = self.stress_reduced(&eps);
        let m = self.disc.reduced_mass.matvec(&c);
        let tau = self.tau();
        let res: Vec<f64> = (0..c.len()).map(|i| m[i] + tau * a[i] - rhs[i]).collect();
        let dissipation: f64 = eps
            .iter()
            .enumerate()
            .map(|(k, e)| self.disc.quad_weight(k) * self.law.phi(strain_norm(*e)))
            .sum();
        let energy = 0.5 * dot(&c, &m) + tau * dissipation - dot(&c, rhs);
        let norm = dot(&res, &res).sqrt();
        Eval {
            c,
            res,
            eps,
            energy,
            norm,
        }
    }

    fn linearize(&mut self, eps: &[[f64; 2]], picard: Option<f64>) {
        for (k, e) in eps.iter().enumerate() {
            let a = Mat2::new(e[0], e[1], e[1], -e[0]);
            if let Some(reg) = picard {
                self.lin[k] = [self.law.viscosity(&a, reg), 0.0, 0.0, 0.0];
            } else {
                let j = self.law.jacobian(&a, self.opts.reg);
                self.lin[k] = [j.alpha, j.beta, j.dir[(0, 0)], j.dir[(0, 1)]];
            }
        }
    }

    fn assemble_and_factor(&mut self) -> Result<()> {
        let tau = self.tau();
        let b = &self.disc.basis;
        let vals = self.sky.values_mut();
        vals.copy_from_slice(&self.template);
        for (t, slots) in self.slots.iter().enumerate() {
            let mut local = [0.0; 144];
            for j in 0..3 {
                let child = 3 * t + j;
                for q in 0..NQ {
                    let k = child * NQ + q;
                    let [alpha, beta, a0, a1] = self.lin[k];
                    let w = tau * self.disc.quad_weight(k);
                    let base = DivFreeBasis::at(child, q, 0);
                    let z = &b.eps[base..base + 12];
                    let mut proj = [0.0; 12];
                    for d in 0..12 {
                        proj[d] = 2.0 * (a0 * z[d][0] + a1 * z[d][1]);
                    }
                    for d in 0..12 {
                        for e in d..12 {
                            local[d * 12 + e] +=
                                w * (2.0 * alpha * (z[d][0] * z[e][0] + z[d][1] * z[e][1]) + beta * proj[d] * proj[e]);
                        }
                    }
                }
            }
            for (s, v) in slots.iter().zip(local.iter()) {
                if *s != NONE {
                    vals[*s] += v;
                }
            }
        }
        self.sky.factor()?;
        self.factored = true;
        Ok(())
    }

    /// Matrix-free Jacobian action at the last linearization point.
    fn jacobian_apply(&self, v: &[f64]) -> Vec<f64> {
        let tau = self.tau();
        let b = &self.disc.basis;
        let mut out = self.disc.reduced_mass.matvec(v);
        for (t, dofs) in b.macro_dofs.iter().enumerate() {
            let mut local = [0.0; 12];
            for d in 0..12 {
                if dofs[d] != NONE {
                    local[d] = v[dofs[d]];
                }
            }
            let mut acc = [0.0; 12];
            for j in 0..3 {
                let child = 3 * t + j;
                for q in 0..NQ {
                    let k = child * NQ + q;
                    let base = DivFreeBasis::at(child, q, 0);
                    let z = &b.eps[base..base + 12];
                    let mut bv = [0.0; 2];
                    for d in 0..12 {
                        bv[0] += local[d] * z[d][0];
                        bv[1] += local[d] * z[d][1];
                    }
                    let [alpha, beta, a0, a1] = self.lin[k];
                    let ab = 2.0 * (a0 * bv[0] + a1 * bv[1]);
                    let w = tau * self.disc.quad_weight(k);
                    for d in 0..12 {
                        acc[d] += w
                            * (2.0 * alpha * (bv[0] * z[d][0] + bv[1] * z[d][1])
                                + beta * ab * 2.0 * (a0 * z[d][0] + a1 * z[d][1]));
                    }
                }
            }
            for d in 0..12 {
                if dofs[d] != NONE {
                    out[dofs[d]] += acc[d];
                }
            }
        }
        out
    }

    fn pcg_solve(&self, rhs: &[f64], x: &mut [f64], rtol: f64, atol: f64, max_iter: usize) -> (usize, f64) {
        let mut r: Vec<f64> = rhs.to_vec();
        let ax = self.jacobian_apply(x);
        r.iter_mut().zip(&ax).for_each(|(ri, a)| *ri -= a);
        let mut z = self.sky.solve(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let tol = atol.max(rtol * dot(rhs, rhs).sqrt());
        let mut rn = dot(&r, &r).sqrt();
        let mut it = 0;
        while rn > tol && it < max_iter {
            let ap = self.jacobian_apply(&p);
            let alpha = rz / dot(&p, &ap);
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            self.sky.solve_into(&r, &mut z);
            let rz2 = dot(&r, &z);
            let beta = rz2 / rz;
            rz = rz2;
            for i in 0..x.len() {
                p[i] = z[i] + beta * p[i];
            }
            rn = dot(&r, &r).sqrt();
            it += 1;
        }
        (it, rn)
    }

    /// Newton direction `-J⁻¹ R` by the configured strategy.
    fn direction(&mut self, res: &[f64], report: &mut StepReport) -> Result<Vec<f64>> {
        let neg: Vec<f64> = res.iter().map(|v| -v).collect();
        let linear = self.is_linear();
        match self.opts.strategy {
            _ if linear => {
                if !self.factored {
                    self.assemble_and_factor()?;
                    report.factorizations += 1;
                }
                Ok(self.sky.solve(&neg))
            }
            JacobianStrategy::Exact => {
                self.assemble_and_factor()?;
                report.factorizations += 1;
                Ok(self.sky.solve(&neg))
            }
            JacobianStrategy::Stale { max_pcg } => {
                if !self.factored {
                    self.assemble_and_factor()?;
                    report.factorizations += 1;
                }
                let rn = dot(res, res).sqrt();
                let rtol = (0.1 * rn).clamp(1e-12, 1e-3);
                let atol = 0.05 * self.opts.abs_tol;
                let mut x = vec![0.0; res.len()];
                let (it, _) = self.pcg_solve(&neg, &mut x, rtol, atol, max_pcg);
                report.pcg_iterations += it;
                if it >= max_pcg {
                    self.assemble_and_factor()?;
                    report.factorizations += 1;
                    x.iter_mut().for_each(|v| *v = 0.0);
                    let (it2, _) = self.pcg_solve(&neg, &mut x, rtol, atol, 4 * max_pcg);
                    report.pcg_iterations += it2;
                }
                Ok(x)
            }
        }
    }

    /// Solve the nonlinear system `Mz c + τ A(c) = rhs` starting from `guess`.
    ///
    /// The system is the gradient of the convex functional
    /// `½ cᵀ Mz c + τ ∫ φ(|ε c|) - rhsᵀ c`; a trial step is accepted when it gives sufficient
    /// decrease either of that functional or of the squared residual.
    pub fn solve_reduced(&mut self, step: usize, guess: &[f64], rhs: &[f64]) -> Result<(Vec<f64>, StepReport)> {
        let mut report = StepReport::default();
        let tol = self.opts.abs_tol;
        let mut cur = self.evaluate(guess.to_vec(), rhs);
        let mut picard_done = false;
        let mut stalled = 0;
        while cur.norm > tol {
            if report.newton_iterations >= self.opts.max_iter {
                return Err(Error::NonConvergence {
                    step,
                    residual: cur.norm,
                    iterations: report.newton_iterations,
                });
            }
            report.newton_iterations += 1;
            if !self.is_linear() || !self.factored {
                self.linearize(&cur.eps, None);
            }
            let dir = self.direction(&cur.res, &mut report)?;
            let slope = dot(&cur.res, &dir);
            let mut alpha = 1.0;
            let mut next = None;
            while alpha >= self.opts.min_step {
                let trial: Vec<f64> = cur.c.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
                let ev = self.evaluate(trial, rhs);
                let merit = ev.norm * ev.norm <= (1.0 - 2e-4 * alpha) * cur.norm * cur.norm;
                let energy = slope < 0.0 && ev.energy - cur.energy <= 1e-4 * alpha * slope;
                if merit || energy || ev.norm <= tol {
                    next = Some((ev, alpha));
                    break;
                }
                alpha *= self.opts.armijo;
            }
            match next {
                Some((ev, _)) => {
                    stalled = if ev.norm > 0.5 * cur.norm { stalled + 1 } else { 0 };
                    cur = ev;
                }
                None => stalled = usize::MAX,
            }
            if (stalled >= 3 || report.newton_iterations == self.opts.max_iter / 2) && cur.norm > tol {
                if picard_done {
                    if stalled == usize::MAX {
                        return Err(Error::NonConvergence {
                            step,
                            residual: cur.norm,
                            iterations: report.newton_iterations,
                        });
                    }
                    continue;
                }
                picard_done = true;
                stalled = 0;
                report.picard_used = true;
                for _ in 0..self.opts.picard_iter {
                    // the clamp follows the iterate down so that states dying out below `reg` still converge
                    let scale = cur
                        .eps
                        .iter()
                        .map(|e| (2.0 * (e[0] * e[0] + e[1] * e[1])).sqrt())
                        .fold(0.0, f64::max);
                    let clamp = if scale > 0.0 {
                        1e-6 * self.opts.reg.min(scale)
                    } else {
                        1e-6 * self.opts.reg
                    };
                    self.linearize(&cur.eps, Some(clamp));
                    self.assemble_and_factor()?;
                    report.factorizations += 1;
                    let c = self.sky.solve(rhs);
                    cur = self.evaluate(c, rhs);
                    if cur.norm <= tol {
                        break;
                    }
                }
                // the factor now holds a Picard matrix
                self.factored = false;
            }
        }
        report.residual = cur.norm;
        Ok((cur.c, report))
    }

    /// `u_n` from `history = [u_0, .., u_{n-1}]` and increments up to step `n`.
    pub fn velocity_step(&mut self, n: usize, history: &[Vec<f64>], inc: &Increments) -> Result<StepOutcome> {
        if n == 0 || n > self.grid.n_steps() {
            return Err(Error::InvalidParameter(format!(
                "step {n} outside 1..={}",
                self.grid.n_steps()
            )));
        }
        if history.len() < n {
            return Err(Error::DimensionMismatch(format!(
                "history has {} states, step {n} needs {n}",
                history.len()
            )));
        }
        inc.reset_audit();
        let prev = &history[n - 1];
        let factor = self.noise.model.step_factor(&self.grid, n);
        let weights = inc.step(n);
        let mut rhs = self.disc.reduced_mass.matvec(prev);
        let mut noise_load = None;
        if factor != 0.0 && !self.noise.model.is_zero() {
            let (vel, _) = self.disc.reduced_at_quadrature(&history[NoiseModel::lag_index(n)]);
            let values = self.noise.combined(factor, &weights, &vel);
            let reduced = reduced_vector_dual(self.disc, &values);
            rhs.iter_mut().zip(&reduced).for_each(|(r, g)| *r += g);
            if self.recording.noise_loads || self.recording.multipliers {
                noise_load = Some(self.disc.vector_dual(&values));
            }
        } else if self.recording.noise_loads || self.recording.multipliers {
            noise_load = Some(vec![0.0; self.disc.sp.n_velocity()]);
        }
        if inc.max_step_read() > n {
            return Err(Error::Causality {
                step: n,
                what: "increment",
                index: inc.max_step_read(),
            });
        }
        let (state, report) = self.solve_reduced(n, prev, &rhs)?;
        Ok(StepOutcome {
            state,
            report,
            noise_load,
        })
    }

    /// `(S(ε u), ε φ_i)` on free velocity dofs for reduced coefficients `c`.
    pub fn stress_dual(&self, c: &[f64]) -> Vec<f64> {
        let (_, eps) = self.disc.reduced_at_quadrature(c);
        let stress: Vec<[f64; 2]> = eps
            .iter()
            .map(|e| {
                let s = self.law.s(&Mat2::new(e[0], e[1], e[1], -e[0]));
                [s[(0, 0)], s[(0, 1)]]
            })
            .collect();
        self.disc.stress_dual(&stress)
    }

    /// KKT multiplier `λ_n`: least-squares solution of `Bᵀ λ = M d_n u + τ S_n - g_n` over all of
    /// `V_h`. It differs from the reconstructed pressure increment only through the Newton residual.
    pub fn multiplier(&self, prev: &[f64], cur: &[f64], noise_load: &[f64]) -> Vec<f64> {
        let du: Vec<f64> = cur.iter().zip(prev).map(|(a, b)| a - b).collect();
        let m_du = self.disc.mass.matvec(&self.disc.expand(&du));
        let s = self.stress_dual(cur);
        let tau = self.tau();
        let ell: Vec<f64> = (0..m_du.len()).map(|i| m_du[i] + tau * s[i] - noise_load[i]).collect();
        self.disc.multiplier_from_dual(&ell)
    }

    pub fn run(&mut self, u0: Vec<f64>, inc: &Increments) -> Result<Trajectory> {
        if inc.grid() != &self.grid {
            return Err(Error::DimensionMismatch(
                "increments live on a different time grid".into(),
            ));
        }
        if inc.n_modes() != self.noise.n_modes() {
            return Err(Error::DimensionMismatch(format!(
                "{} increment modes for {} noise modes",
                inc.n_modes(),
                self.noise.n_modes()
            )));
        }
        let nn = self.grid.n_steps();
        let mut states = Vec::with_capacity(nn + 1);
        states.push(u0);
        let mut loads = self.recording.noise_loads.then(Vec::new);
        let mut mults = self.recording.multipliers.then(Vec::new);
        let mut reports = Vec::with_capacity(nn);
        for n in 1..=nn {
            let out = self.velocity_step(n, &states, inc)?;
            if let Some(m) = mults.as_mut() {
                m.push(self.multiplier(&states[n - 1], &out.state, out.noise_load.as_ref().unwrap()));
            }
            if let Some(l) = loads.as_mut() {
                l.push(out.noise_load.clone().unwrap());
            }
            reports.push(out.report);
            states.push(out.state);
        }
        Ok(Trajectory {
            cells: self.disc.cells(),
            grid: self.grid,
            states,
            noise_loads: loads,
            multipliers: mults,
            reports,
        })
    }

    /// `|½‖u_n‖² − ½‖u_{n−1}‖² + ½‖u_n − u_{n−1}‖² + τ(S(εu_n), εu_n) − ⟨g_n, u_n⟩|` per step;
    /// needs recorded noise loads.
    pub fn energy_identity_residuals(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let loads = traj
            .noise_loads
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("energy identity needs recorded noise loads".into()))?;
        let tau = self.tau();
        let mut out = Vec::with_capacity(traj.n_steps());
        for n in 1..=traj.n_steps() {
            let (cur, prev) = (&traj.states[n], &traj.states[n - 1]);
            let du: Vec<f64> = cur.iter().zip(prev).map(|(a, b)| a - b).collect();
            let (_, eps) = self.disc.reduced_at_quadrature(cur);
            let diss: f64 = eps
                .iter()
                .enumerate()
                .map(|(k, e)| {
                    let a = Mat2::new(e[0], e[1], e[1], -e[0]);
                    self.disc.quad_weight(k) * crate::tensor::ddot(&self.law.s(&a), &a)
                })
                .sum();
            let lhs = 0.5
                * (self.disc.reduced_norm_sq(cur) - self.disc.reduced_norm_sq(prev) + self.disc.reduced_norm_sq(&du))
                + tau * diss;
            let rhs = dot(&loads[n - 1], &self.disc.expand(cur));
            out.push((lhs - rhs).abs());
        }
        Ok(out)
    }
}
