use super::divfree::DivFreeBasis;
use super::element::NQ;
use super::space::Spaces;
use crate::error::{Error, Result};
use crate::sparse::{dot, Csr, Skyline};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    /// Quadratic velocities, full coefficient vector `2 * node + component`.
    Velocity,
    /// Discontinuous linear pressures, coefficient `3 * triangle + vertex`.
    Pressure,
}

/// Coefficients of a finite element function on a given mesh level.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub kind: SpaceKind,
    pub cells: usize,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    L2,
    /// `‖ε v‖_{L^p}`.
    LpSymGrad(f64),
    /// `‖q‖_{L^p}` for pressures.
    Lp(f64),
    LinfDiv,
}

/// All operators of one mesh level.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub sp: Spaces,
    pub basis: DivFreeBasis,
    /// Velocity mass on free dofs.
    pub mass: Csr,
    /// `(q, div v)` on pressure x free velocity dofs.
    pub div: Csr,
    div_t: Csr,
    /// `Zᵀ M Z`.
    pub reduced_mass: Csr,
    reduced_mass_chol: Skyline,
    mass_chol: Skyline,
    normal_chol: Skyline,
    pub pressure_moments: Vec<f64>,
}

impl Discretization {
    pub fn new(cells: usize) -> Result<Self> {
        let sp = Spaces::new(cells)?;
        let basis = DivFreeBasis::new(&sp)?;
        let mass = sp.mass_full().select(&sp.free, &sp.free);
        let np = sp.n_pressure();
        let div = sp.div_full().select(&(0..np).collect::<Vec<_>>(), &sp.free);
        let div_t = div.transpose();
        let zt = basis.z.transpose();
        let reduced_mass = zt.matmul(&mass.matmul(&basis.z));
        let reduced_mass_chol = Skyline::factorize(&reduced_mass)?;
        let mass_chol = Skyline::factorize(&mass)?;
        // B Bᵀ is singular on constants; pinning the first dof makes it SPD
        let mut normal = div.matmul(&div_t);
        let pin = normal.indptr[0]..normal.indptr[1];
        let scale = normal.data[pin.clone()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for k in pin {
            if normal.indices[k] == 0 {
                normal.data[k] += scale;
            }
        }
        let normal_chol = Skyline::factorize(&normal)?;
        let pressure_moments = sp.pressure_moments();
        Ok(Self {
            sp,
            basis,
            mass,
            div,
            div_t,
            reduced_mass,
            reduced_mass_chol,
            mass_chol,
            normal_chol,
            pressure_moments,
        })
    }

    pub fn cells(&self) -> usize {
        self.sp.cells()
    }

    pub fn dim_div_free(&self) -> usize {
        self.basis.dim
    }

    pub fn n_quad(&self) -> usize {
        self.sp.n_triangles() * NQ
    }

    pub fn velocity_field(&self, full: Vec<f64>) -> Field {
        Field {
            kind: SpaceKind::Velocity,
            cells: self.cells(),
            coeffs: full,
        }
    }

    pub fn pressure_field(&self, q: Vec<f64>) -> Field {
        Field {
            kind: SpaceKind::Pressure,
            cells: self.cells(),
            coeffs: q,
        }
    }

    /// Free velocity coefficients of `Z c`.
    pub fn expand(&self, c: &[f64]) -> Vec<f64> {
        self.basis.z.matvec(c)
    }

    /// Full velocity field of reduced coefficients `c`.
    pub fn velocity_of(&self, c: &[f64]) -> Field {
        self.velocity_field(self.sp.extend(&self.expand(c)))
    }

    pub fn reduced_mass_solve(&self, b: &[f64]) -> Vec<f64> {
        self.reduced_mass_chol.solve(b)
    }

    pub fn mass_solve(&self, b: &[f64]) -> Vec<f64> {
        self.mass_chol.solve(b)
    }

    /// Reduced coefficients of the `L²` projection onto `V_{h,div}` of a functional on free dofs.
    pub fn project_dual(&self, ell: &[f64]) -> Vec<f64> {
        self.reduced_mass_solve(&self.basis.z.tmatvec(ell))
    }

    /// `Π_div v` for a velocity field (boundary values ignored), as reduced coefficients.
    pub fn project_div(&self, v: &Field) -> Result<Vec<f64>> {
        self.check(v, SpaceKind::Velocity)?;
        let free = self.sp.restrict(&v.coeffs);
        Ok(self.project_dual(&self.mass.matvec(&free)))
    }

    /// Nodal interpolant of `u0` (boundary masked) projected onto `V_{h,div}`.
    pub fn initial_velocity(&self, u0: impl Fn([f64; 2]) -> [f64; 2]) -> Vec<f64> {
        let v = self.velocity_field(self.sp.interpolate(u0, true));
        self.project_div(&v).expect("own field")
    }

    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> [f64; 2], masked: bool) -> Field {
        self.velocity_field(self.sp.interpolate(f, masked))
    }

    fn check(&self, f: &Field, kind: SpaceKind) -> Result<()> {
        let len = match kind {
            SpaceKind::Velocity => self.sp.n_velocity_full(),
            SpaceKind::Pressure => self.sp.n_pressure(),
        };
        if f.kind != kind || f.cells != self.cells() || f.coeffs.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "expected {kind:?} field on {} cells, got {:?} on {} cells with {} coefficients",
                self.cells(),
                f.kind,
                f.cells,
                f.coeffs.len()
            )));
        }
        Ok(())
    }

    /// Part of a functional on free velocity dofs that acts on `V⊥`: `ℓ - M Z (ZᵀMZ)⁻¹ Zᵀ ℓ`.
    pub fn perp_dual(&self, ell: &[f64]) -> Vec<f64> {
        let c = self.project_dual(ell);
        let mzc = self.mass.matvec(&self.expand(&c));
        ell.iter().zip(&mzc).map(|(a, b)| a - b).collect()
    }

    /// Mean-free `q` with `(q, div ξ) = ℓ(ξ)` for all `ξ ∈ V⊥`.
    pub fn pressure_from_dual(&self, ell: &[f64]) -> Vec<f64> {
        let r = self.perp_dual(ell);
        let rhs = self.div.matvec(&r);
        let mut q = self.normal_chol.solve(&rhs);
        self.remove_mean(&mut q);
        q
    }

    /// Mean-free least-squares solution of `Bᵀ q = ℓ` over all of `V_h`, with no projection of `ℓ`.
    pub fn multiplier_from_dual(&self, ell: &[f64]) -> Vec<f64> {
        let mut q = self.normal_chol.solve(&self.div.matvec(ell));
        self.remove_mean(&mut q);
        q
    }

    pub fn remove_mean(&self, q: &mut [f64]) {
        let area: f64 = self.pressure_moments.iter().sum();
        let mean = dot(&self.pressure_moments, q) / area;
        q.iter_mut().for_each(|v| *v -= mean);
    }

    /// `Bᵀ q`: the functional `v ↦ (q, div v)` on free dofs.
    pub fn div_adjoint(&self, q: &[f64]) -> Vec<f64> {
        self.div_t.matvec(q)
    }

    /// Discrete gradient `∇^h q = -M⁻¹ Bᵀ q` (free dofs); it lies in `V⊥`.
    pub fn discrete_gradient(&self, q: &[f64]) -> Vec<f64> {
        let mut g = self.mass_solve(&self.div_adjoint(q));
        g.iter_mut().for_each(|v| *v = -*v);
        g
    }

    /// `‖∇^h q‖_{L²}`.
    pub fn q_sto_norm(&self, q: &[f64]) -> f64 {
        let bt = self.div_adjoint(q);
        dot(&bt, &self.mass_solve(&bt)).max(0.0).sqrt()
    }

    pub fn mass_norm_sq(&self, free: &[f64]) -> f64 {
        dot(free, &self.mass.matvec(free))
    }

    pub fn reduced_norm_sq(&self, c: &[f64]) -> f64 {
        dot(c, &self.reduced_mass.matvec(c))
    }

    /// `ℓ_i = Σ_q w_q F(x_q)·φ_i(x_q)` on free dofs, for values given at all quadrature points.
    pub fn vector_dual(&self, values: &[[f64; 2]]) -> Vec<f64> {
        let sp = &self.sp;
        let mut out = vec![0.0; sp.n_velocity()];
        for (t, qs) in sp.quad.iter().enumerate() {
            let nodes = &sp.tri_nodes[t];
            for (qi, q) in qs.iter().enumerate() {
                let f = values[t * NQ + qi];
                for a in 0..6 {
                    for c in 0..2 {
                        let i = sp.free_of[2 * nodes[a] + c];
                        if i != super::NONE {
                            out[i] += q.w * f[c] * q.phi[a];
                        }
                    }
                }
            }
        }
        out
    }

    /// `ℓ_i = Σ_q w_q T(x_q) : ∇φ_i(x_q)` for symmetric trace-free `T = [[t0, t1], [t1, -t0]]`.
    pub fn stress_dual(&self, stress: &[[f64; 2]]) -> Vec<f64> {
        let sp = &self.sp;
        let mut out = vec![0.0; sp.n_velocity()];
        for (t, qs) in sp.quad.iter().enumerate() {
            let nodes = &sp.tri_nodes[t];
            for (qi, q) in qs.iter().enumerate() {
                let [s0, s1] = stress[t * NQ + qi];
                let rows = [[s0, s1], [s1, -s0]];
                for a in 0..6 {
                    let g = q.dphi[a];
                    for c in 0..2 {
                        let i = sp.free_of[2 * nodes[a] + c];
                        if i != super::NONE {
                            out[i] += q.w * (rows[c][0] * g[0] + rows[c][1] * g[1]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Velocity values and strain components at all quadrature points of reduced coefficients.
    pub fn reduced_at_quadrature(&self, c: &[f64]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let n = self.n_quad();
        let (mut vel, mut eps) = (vec![[0.0; 2]; n], vec![[0.0; 2]; n]);
        self.basis.eval_at_quadrature(c, &mut vel, &mut eps);
        (vel, eps)
    }

    /// Full velocity gradients `g[i][j] = ∂_j v_i` at all quadrature points of free coefficients.
    pub fn gradients_at_quadrature(&self, free: &[f64]) -> Vec<[[f64; 2]; 2]> {
        let sp = &self.sp;
        let full = sp.extend(free);
        let mut out = Vec::with_capacity(self.n_quad());
        for (t, qs) in sp.quad.iter().enumerate() {
            let nodes = &sp.tri_nodes[t];
            for q in qs {
                let mut g = [[0.0; 2]; 2];
                for a in 0..6 {
                    for c in 0..2 {
                        let v = full[2 * nodes[a] + c];
                        g[c][0] += v * q.dphi[a][0];
                        g[c][1] += v * q.dphi[a][1];
                    }
                }
                out.push(g);
            }
        }
        out
    }

    /// `ℓ_i = Σ_q w_q T(x_q) : ∇φ_i(x_q)` for a general matrix field `T`.
    pub fn matrix_dual(&self, values: &[[[f64; 2]; 2]]) -> Vec<f64> {
        let sp = &self.sp;
        let mut out = vec![0.0; sp.n_velocity()];
        for (t, qs) in sp.quad.iter().enumerate() {
            let nodes = &sp.tri_nodes[t];
            for (qi, q) in qs.iter().enumerate() {
                let m = values[t * NQ + qi];
                for a in 0..6 {
                    let g = q.dphi[a];
                    for c in 0..2 {
                        let i = sp.free_of[2 * nodes[a] + c];
                        if i != super::NONE {
                            out[i] += q.w * (m[c][0] * g[0] + m[c][1] * g[1]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Pressure values at all quadrature points.
    pub fn pressure_at_quadrature(&self, q: &[f64]) -> Vec<f64> {
        let sp = &self.sp;
        let mut out = Vec::with_capacity(self.n_quad());
        for (t, qs) in sp.quad.iter().enumerate() {
            for p in qs {
                out.push((0..3).map(|i| q[3 * t + i] * p.bary[i]).sum());
            }
        }
        out
    }

    pub fn quad_weight(&self, k: usize) -> f64 {
        self.sp.quad[k / NQ][k % NQ].w
    }

    pub fn quad_point(&self, k: usize) -> [f64; 2] {
        self.sp.quad[k / NQ][k % NQ].x
    }

    pub fn norm(&self, f: &Field, kind: NormKind) -> Result<f64> {
        let sp = &self.sp;
        match (f.kind, kind) {
            (SpaceKind::Velocity, NormKind::L2) => {
                self.check(f, SpaceKind::Velocity)?;
                Ok(self
                    .integrate_velocity(&f.coeffs, |u, _| u[0] * u[0] + u[1] * u[1])
                    .sqrt())
            }
            (SpaceKind::Velocity, NormKind::LpSymGrad(p)) => {
                self.check(f, SpaceKind::Velocity)?;
                let s = self.integrate_velocity(&f.coeffs, |_, g| {
                    let off = 0.5 * (g[0][1] + g[1][0]);
                    (g[0][0] * g[0][0] + g[1][1] * g[1][1] + 2.0 * off * off).sqrt().powf(p)
                });
                Ok(s.powf(1.0 / p))
            }
            (SpaceKind::Velocity, NormKind::LinfDiv) => {
                self.check(f, SpaceKind::Velocity)?;
                Ok(sp.divergence_pointwise_max(&f.coeffs))
            }
            (SpaceKind::Pressure, NormKind::L2) => self.norm(f, NormKind::Lp(2.0)),
            (SpaceKind::Pressure, NormKind::Lp(p)) => {
                self.check(f, SpaceKind::Pressure)?;
                let mut s = 0.0;
                for (t, qs) in sp.quad.iter().enumerate() {
                    for q in qs {
                        s += q.w * sp.eval_pressure(&f.coeffs, t, q.bary).abs().powf(p);
                    }
                }
                Ok(s.powf(1.0 / p))
            }
            (k, n) => Err(Error::InvalidParameter(format!("norm {n:?} not defined for {k:?}"))),
        }
    }

    fn integrate_velocity(&self, full: &[f64], f: impl Fn([f64; 2], [[f64; 2]; 2]) -> f64) -> f64 {
        let sp = &self.sp;
        let mut s = 0.0;
        for (t, qs) in sp.quad.iter().enumerate() {
            for q in qs {
                let (u, g) = sp.eval_velocity(full, t, q.bary);
                s += q.w * f(u, g);
            }
        }
        s
    }
}
