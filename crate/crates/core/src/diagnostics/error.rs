use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use super::{lag_sums, pairwise_from_gram, Estimate};
use crate::error::{invalid, Error, Result};
use crate::fem::element::{p2_gradients, p2_values, Geometry, NQ, QUAD_POINTS, QUAD_WEIGHTS};
use crate::fem::{Discretization, NONE};
use crate::noise::{NoiseModel, TimeGrid};
use crate::sparse::Csr;
use crate::stepper::Trajectory;
use crate::tensor::PowerLaw;

/// Evaluation of a coarse divergence-free space at the quadrature points of a nested fine one,
/// with the mixed mass matrices needed to measure fine-minus-coarse differences.
#[derive(Clone, Debug)]
pub struct Transfer {
    pub coarse_cells: usize,
    pub fine_cells: usize,
    /// Rows `2k + c`: velocity component `c` at fine quadrature point `k`.
    vel: Csr,
    /// Rows `2k`, `2k + 1`: strain components `(e0, e1)`.
    eps: Csr,
    mass_fc: Csr,
    mass_cc: Csr,
}

fn sampling_matrices(disc: &Discretization, points: &[[f64; 2]]) -> (Csr, Csr) {
    let sp = &disc.sp;
    let mut tv = Vec::new();
    let mut te = Vec::new();
    for (k, &x) in points.iter().enumerate() {
        let (t, l) = sp.mesh.locate(x);
        let phi = p2_values(l);
        let dphi = p2_gradients(l, &sp.geo[t].grad_bary);
        for (a, &node) in sp.tri_nodes[t].iter().enumerate() {
            let d = dphi[a];
            for c in 0..2 {
                let i = sp.free_of[2 * node + c];
                if i == NONE {
                    continue;
                }
                tv.push((2 * k + c, i, phi[a]));
                if c == 0 {
                    te.push((2 * k, i, 0.5 * d[0]));
                    te.push((2 * k + 1, i, 0.5 * d[1]));
                } else {
                    te.push((2 * k, i, -0.5 * d[1]));
                    te.push((2 * k + 1, i, 0.5 * d[0]));
                }
            }
        }
    }
    let rows = 2 * points.len();
    let n = sp.n_velocity();
    let z = &disc.basis.z;
    (
        Csr::from_triplets(rows, n, &tv).matmul(z),
        Csr::from_triplets(rows, n, &te).matmul(z),
    )
}

/// Coarse fields have gradient kinks inside fine triangles, so mixed mass matrices use the
/// six-point rule on `4^levels` congruent pieces of every fine triangle.
const MASS_SUBDIVISION: usize = 2;

fn subdivided_rule(fine: &Discretization, levels: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut tris: Vec<[[f64; 2]; 3]> = (0..fine.sp.n_triangles()).map(|t| fine.sp.geo[t].corners).collect();
    for _ in 0..levels {
        let mid = |a: [f64; 2], b: [f64; 2]| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        tris = tris
            .into_iter()
            .flat_map(|[a, b, c]| {
                let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
                [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
            })
            .collect();
    }
    let mut xs = Vec::with_capacity(tris.len() * NQ);
    let mut ws = Vec::with_capacity(tris.len() * NQ);
    for corners in tris {
        let g = Geometry::new(corners);
        for q in 0..NQ {
            xs.push(g.point(QUAD_POINTS[q]));
            ws.push(QUAD_WEIGHTS[q] * g.area.abs());
        }
    }
    (xs, ws)
}

fn scale_rows(a: &Csr, w: &[f64]) -> Csr {
    let mut out = a.clone();
    for r in 0..out.nrows {
        for idx in out.indptr[r]..out.indptr[r + 1] {
            out.data[idx] *= w[r / 2];
        }
    }
    out
}

impl Transfer {
    pub fn new(coarse: &Discretization, fine: &Discretization) -> Result<Self> {
        let (mc, mf) = (coarse.cells(), fine.cells());
        if mc == 0 || mf % mc != 0 {
            return invalid(format!("mesh with {mf} cells does not refine mesh with {mc} cells"));
        }
        let nq = fine.n_quad();
        let points: Vec<[f64; 2]> = (0..nq).map(|k| fine.quad_point(k)).collect();
        let (vel, eps) = sampling_matrices(coarse, &points);
        let (xs, w) = subdivided_rule(fine, MASS_SUBDIVISION);
        let (cvel, _) = sampling_matrices(coarse, &xs);
        let (fvel, _) = sampling_matrices(fine, &xs);
        let wvel = scale_rows(&cvel, &w);
        let mass_fc = fvel.transpose().matmul(&wvel);
        let mass_cc = cvel.transpose().matmul(&wvel);
        Ok(Self {
            coarse_cells: mc,
            fine_cells: mf,
            vel,
            eps,
            mass_fc,
            mass_cc,
        })
    }

    pub fn coarse_velocity(&self, c: &[f64]) -> Vec<f64> {
        self.vel.matvec(c)
    }

    pub fn coarse_strain(&self, c: &[f64]) -> Vec<f64> {
        self.eps.matvec(c)
    }

    /// `‖a − c‖²` for fine reduced coefficients `a` and coarse reduced coefficients `c`.
    pub fn distance_sq(&self, fine: &Discretization, a: &[f64], c: &[f64]) -> f64 {
        let dot = crate::sparse::dot;
        (dot(a, &fine.reduced_mass.matvec(a)) - 2.0 * dot(a, &self.mass_fc.matvec(c)) + dot(c, &self.mass_cc.matvec(c)))
            .max(0.0)
    }

    /// Reduced coarse coefficients of the `L²` projection onto the coarse `V_{h,div}`.
    pub fn project(&self, coarse: &Discretization, a: &[f64]) -> Vec<f64> {
        coarse.reduced_mass_solve(&self.mass_fc.tmatvec(a))
    }
}

/// Shared reference data for comparing a family of coarse levels with one reference trajectory.
pub struct ErrorContext<'a> {
    pub fine: &'a Discretization,
    pub ref_grid: TimeGrid,
    pub law: PowerLaw,
    pub noise: NoiseModel,
    weights: Vec<f64>,
    modes: Vec<Vec<[f64; 2]>>,
}

impl<'a> ErrorContext<'a> {
    pub fn new(fine: &'a Discretization, ref_grid: TimeGrid, law: PowerLaw, noise: NoiseModel) -> Self {
        let nq = fine.n_quad();
        let weights = (0..nq).map(|k| fine.quad_weight(k)).collect();
        let modes = (0..noise.n_modes)
            .map(|k| (0..nq).map(|q| noise.mode(k, fine.quad_point(q))).collect())
            .collect();
        Self {
            fine,
            ref_grid,
            law,
            noise,
            weights,
            modes,
        }
    }

    fn v_field(&self, eps: impl Iterator<Item = [f64; 2]>) -> Vec<f64> {
        let (p, kappa) = (self.law.p(), self.law.kappa());
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for e in eps {
            let r = (2.0 * (e[0] * e[0] + e[1] * e[1])).sqrt();
            let s = if r == 0.0 {
                0.0
            } else {
                (kappa + r).powf(0.5 * (p - 2.0))
            };
            out.push(s * e[0]);
            out.push(s * e[1]);
        }
        out
    }

    fn v_of_flat(&self, eps: &[f64]) -> Vec<f64> {
        self.v_field(eps.chunks_exact(2).map(|e| [e[0], e[1]]))
    }

    /// `‖A − B‖²_{L²}` of trace-free symmetric fields stored as `(e0, e1)` pairs.
    fn strain_dist_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let d0 = a[2 * k] - b[2 * k];
                let d1 = a[2 * k + 1] - b[2 * k + 1];
                2.0 * w * (d0 * d0 + d1 * d1)
            })
            .sum()
    }

    fn strain_norm_sq(&self, a: &[f64]) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| 2.0 * w * (a[2 * k] * a[2 * k] + a[2 * k + 1] * a[2 * k + 1]))
            .sum()
    }

    /// `Σ_k ‖fa G(ua) e_k − fb G(ub) e_k‖²` with velocities given at the quadrature points.
    fn noise_dist_sq(&self, fa: f64, ua: &[f64], fb: f64, ub: &[f64]) -> f64 {
        let mut acc = 0.0;
        for g in &self.modes {
            for (k, w) in self.weights.iter().enumerate() {
                let a = self.noise.apply_to_mode(g[k], [ua[2 * k], ua[2 * k + 1]]);
                let b = self.noise.apply_to_mode(g[k], [ub[2 * k], ub[2 * k + 1]]);
                let d0 = fa * a[0] - fb * b[0];
                let d1 = fa * a[1] - fb * b[1];
                acc += w * (d0 * d0 + d1 * d1);
            }
        }
        acc
    }

    fn reference_cell(&self, j: usize) -> (f64, f64) {
        let tr = self.ref_grid.tau();
        let t = self.ref_grid.t_final();
        (((j as f64 - 0.5) * tr).max(0.0), ((j as f64 + 0.5) * tr).min(t))
    }

    /// Odd ratio `τ / τ_ref`.
    fn ratio(&self, grid: &TimeGrid) -> Result<usize> {
        let (nr, n) = (self.ref_grid.n_steps() + 1, grid.n_steps() + 1);
        if (grid.t_final() - self.ref_grid.t_final()).abs() > 1e-12 * grid.t_final() {
            return invalid("reference and coarse grids have different horizons");
        }
        if nr % n != 0 || (nr / n) % 2 == 0 {
            return invalid(format!(
                "reference grid with {} steps does not tile a grid with {} steps (need an odd step ratio)",
                nr - 1,
                n - 1
            ));
        }
        Ok(nr / n)
    }

    /// Reference steps covering `J_n` with their overlap lengths.
    fn tiling(&self, grid: &TimeGrid, r: usize, n: usize) -> Vec<(usize, f64)> {
        let (lo, hi) = grid.window(n);
        let h = (r - 1) / 2;
        let j0 = (n * r).saturating_sub(h);
        (j0..=n * r + h)
            .map(|j| {
                let (a, b) = self.reference_cell(j);
                (j, (b.min(hi) - a.max(lo)).max(0.0))
            })
            .filter(|&(_, len)| len > 0.0)
            .collect()
    }

    fn averages(&self, reference: &Trajectory, grid: &TimeGrid, r: usize) -> Vec<Vec<f64>> {
        (0..=grid.n_steps())
            .map(|n| {
                let cells = self.tiling(grid, r, n);
                let total: f64 = cells.iter().map(|c| c.1).sum();
                let mut avg = vec![0.0; reference.states[0].len()];
                for (j, len) in cells {
                    for (a, v) in avg.iter_mut().zip(&reference.states[j]) {
                        *a += len / total * v;
                    }
                }
                avg
            })
            .collect()
    }
}

/// One coarse level to be compared with the reference.
pub struct ErrorLevel<'a> {
    pub disc: &'a Discretization,
    pub transfer: &'a Transfer,
    pub grid: TimeGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleError {
    pub natural: f64,
    pub vgrad: f64,
    #[serde(skip)]
    pub lag_sums: Vec<f64>,
    pub c_init: f64,
    pub c_linf: f64,
    pub c_best: f64,
    pub c_g: f64,
    pub c_v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorStats {
    pub samples: usize,
    pub n_steps: usize,
    pub natural_err: Estimate,
    pub vgrad_err: Estimate,
    pub besov_err: f64,
    pub c_init: Estimate,
    pub c_linf: Estimate,
    pub c_best: Estimate,
    pub c_g: Estimate,
    pub c_v: Estimate,
}

/// Cache of per-step fields keyed by step index, dropping entries behind a moving window.
struct StepCache(BTreeMap<usize, Vec<f64>>);

impl StepCache {
    fn get(&mut self, n: usize, make: impl FnOnce() -> Vec<f64>) -> &Vec<f64> {
        self.0.entry(n).or_insert_with(make)
    }

    fn retain_from(&mut self, n: usize) {
        self.0 = self.0.split_off(&n);
    }
}

struct OscAcc {
    weight: f64,
    energy: f64,
    sum: Vec<f64>,
}

impl OscAcc {
    fn new(len: usize) -> Self {
        Self {
            weight: 0.0,
            energy: 0.0,
            sum: vec![0.0; len],
        }
    }

    fn add(&mut self, ctx: &ErrorContext, w: f64, v: &[f64]) {
        self.weight += w;
        self.energy += w * ctx.strain_norm_sq(v);
        self.sum.iter_mut().zip(v).for_each(|(s, x)| *s += w * x);
    }

    fn value(&self, ctx: &ErrorContext) -> f64 {
        (2.0 * self.weight * self.energy - 2.0 * ctx.strain_norm_sq(&self.sum)).max(0.0)
    }
}

struct LevelState<'b> {
    level: &'b ErrorLevel<'b>,
    traj: &'b Trajectory,
    r: usize,
    eta: Vec<Vec<f64>>,
    v_coarse: StepCache,
    v_eta: StepCache,
    vel_coarse: StepCache,
    osc: BTreeMap<usize, OscAcc>,
    vgrad: f64,
    best: f64,
    c_g: f64,
    c_v: f64,
}

impl<'b> LevelState<'b> {
    fn steps_touching(&self, j: usize) -> impl Iterator<Item = usize> {
        let n0 = (j + (self.r - 1) / 2) / self.r;
        let big_n = self.level.grid.n_steps();
        (n0..=n0 + 1).filter(move |&n| n >= 1 && n <= big_n)
    }

    fn finish_osc_before(&mut self, ctx: &ErrorContext, n: usize) {
        let tau = self.level.grid.tau();
        let keep = self.osc.split_off(&n);
        for acc in std::mem::replace(&mut self.osc, keep).values() {
            self.c_v += acc.value(ctx) / tau;
        }
    }
}

fn check_reference(ctx: &ErrorContext, reference: &Trajectory) -> Result<()> {
    if reference.cells != ctx.fine.cells() || reference.grid != ctx.ref_grid {
        return Err(Error::DimensionMismatch(
            "reference trajectory does not match the context".into(),
        ));
    }
    Ok(())
}

/// Error functionals of several coarse trajectories against one reference, streaming the
/// reference once.
pub fn sample_errors(
    ctx: &ErrorContext,
    levels: &[ErrorLevel],
    reference: &Trajectory,
    coarse: &[&Trajectory],
) -> Result<Vec<SampleError>> {
    check_reference(ctx, reference)?;
    if levels.len() != coarse.len() {
        return Err(Error::DimensionMismatch("one trajectory per level required".into()));
    }
    let fine = ctx.fine;
    let mut states = Vec::with_capacity(levels.len());
    let mut out = Vec::with_capacity(levels.len());
    for (level, traj) in levels.iter().zip(coarse) {
        if traj.grid != level.grid || traj.cells != level.disc.cells() || level.transfer.coarse_cells != traj.cells {
            return Err(Error::DimensionMismatch(
                "coarse trajectory does not match its level".into(),
            ));
        }
        if level.transfer.fine_cells != fine.cells() {
            return Err(Error::DimensionMismatch(
                "transfer built for a different fine mesh".into(),
            ));
        }
        let r = ctx.ratio(&level.grid)?;
        let avg = ctx.averages(reference, &level.grid, r);
        let big_n = level.grid.n_steps();
        let tr = level.transfer;

        let gram = mixed_error_gram(fine, tr, &avg, &traj.states);
        let natural = (1..=big_n).map(|n| gram[(n, n)]).fold(0.0, f64::max);
        let lag = lag_sums(&pairwise_from_gram(&gram));
        let c_init = tr.distance_sq(fine, &reference.states[0], &traj.states[0]);
        let c_linf = (1..=big_n)
            .map(|n| tr.distance_sq(fine, &avg[n], &tr.project(level.disc, &avg[n])))
            .fold(0.0, f64::max);
        let eta: Vec<Vec<f64>> = (0..=big_n)
            .map(|n| {
                if n == 0 {
                    Vec::new()
                } else {
                    interpolate_projected(fine, level.disc, &avg[n])
                }
            })
            .collect();
        let best: f64 = (1..=big_n).map(|n| tr.distance_sq(fine, &avg[n], &eta[n])).sum();
        out.push(SampleError {
            natural,
            vgrad: 0.0,
            lag_sums: lag,
            c_init,
            c_linf,
            c_best: best,
            c_g: 0.0,
            c_v: 0.0,
        });
        states.push(LevelState {
            level,
            traj,
            r,
            eta,
            v_coarse: StepCache(BTreeMap::new()),
            v_eta: StepCache(BTreeMap::new()),
            vel_coarse: StepCache(BTreeMap::new()),
            osc: BTreeMap::new(),
            vgrad: 0.0,
            best: 0.0,
            c_g: 0.0,
            c_v: 0.0,
        });
    }

    let need_noise = !ctx.noise.is_zero();
    for (j, a) in reference.states.iter().enumerate() {
        let (vel_ref, eps_ref) = fine.reduced_at_quadrature(a);
        let v_ref = ctx.v_field(eps_ref.into_iter());
        let vel_ref: Vec<f64> = vel_ref.into_iter().flatten().collect();
        let (lo, hi) = ctx.reference_cell(j);
        let mod_ref = ctx.noise.modulation.at(ctx.ref_grid.t(j));
        for st in states.iter_mut() {
            let steps: Vec<usize> = st.steps_touching(j).collect();
            if let Some(&first) = steps.first() {
                st.finish_osc_before(ctx, first);
                st.v_coarse.retain_from(first);
                st.v_eta.retain_from(first);
                st.vel_coarse.retain_from(first.saturating_sub(2));
            }
            for n in steps {
                let grid = st.level.grid;
                let w = grid.weight_integral(n, lo, hi);
                if w <= 0.0 {
                    continue;
                }
                let (tr, traj) = (st.level.transfer, st.traj);
                let vc = st.v_coarse.get(n, || ctx.v_of_flat(&tr.coarse_strain(&traj.states[n])));
                st.vgrad += w * ctx.strain_dist_sq(&v_ref, vc);
                let eta = &st.eta[n];
                let ve = st.v_eta.get(n, || ctx.v_of_flat(&tr.coarse_strain(eta)));
                st.best += w * ctx.strain_dist_sq(&v_ref, ve);
                st.osc
                    .entry(n)
                    .or_insert_with(|| OscAcc::new(v_ref.len()))
                    .add(ctx, w, &v_ref);
                if need_noise {
                    let w2 = grid.weight_sq_integral(n, lo, hi);
                    let lagn = NoiseModel::lag_index(n);
                    let f = ctx.noise.step_factor(&grid, n);
                    let uc = st.vel_coarse.get(lagn, || tr.coarse_velocity(&traj.states[lagn]));
                    st.c_g += w2 * ctx.noise_dist_sq(mod_ref, &vel_ref, f, uc);
                }
            }
        }
    }
    for (st, rec) in states.iter_mut().zip(out.iter_mut()) {
        st.finish_osc_before(ctx, usize::MAX);
        rec.vgrad = st.vgrad;
        rec.c_best += st.best;
        rec.c_g = st.c_g;
        rec.c_v = st.c_v;
    }
    Ok(out)
}

pub fn sample_error(
    ctx: &ErrorContext,
    level: &ErrorLevel,
    reference: &Trajectory,
    coarse: &Trajectory,
) -> Result<SampleError> {
    Ok(sample_errors(ctx, std::slice::from_ref(level), reference, &[coarse])?.remove(0))
}

/// Temporal oscillation of `V(εu_ref)` measured against the weights of a coarser grid:
/// `(1/τ) Σ_n ∬ a_n(s) a_n(t) ‖V(εu(s)) − V(εu(t))‖² ds dt`.
pub fn temporal_oscillation(ctx: &ErrorContext, reference: &Trajectory, grid: &TimeGrid) -> Result<f64> {
    check_reference(ctx, reference)?;
    let r = ctx.ratio(grid)?;
    let big_n = grid.n_steps();
    let mut osc: BTreeMap<usize, OscAcc> = BTreeMap::new();
    let mut total = 0.0;
    for (j, a) in reference.states.iter().enumerate() {
        let n0 = (j + (r - 1) / 2) / r;
        let done = osc.split_off(&n0);
        for acc in std::mem::replace(&mut osc, done).values() {
            total += acc.value(ctx) / grid.tau();
        }
        if n0 > big_n {
            continue;
        }
        let (lo, hi) = ctx.reference_cell(j);
        let (_, eps) = ctx.fine.reduced_at_quadrature(a);
        let v = ctx.v_field(eps.into_iter());
        for n in (n0..=n0 + 1).filter(|&n| n >= 1 && n <= big_n) {
            let w = grid.weight_integral(n, lo, hi);
            if w > 0.0 {
                osc.entry(n).or_insert_with(|| OscAcc::new(v.len())).add(ctx, w, &v);
            }
        }
    }
    total += osc.values().map(|acc| acc.value(ctx) / grid.tau()).sum::<f64>();
    Ok(total)
}

/// Gram matrix `(e_n, e_m)` of `e_n = a_n − c_n` with `a_n` fine and `c_n` coarse.
fn mixed_error_gram(fine: &Discretization, tr: &Transfer, a: &[Vec<f64>], c: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = a.len();
    let to_mat = |v: &[Vec<f64>]| DMatrix::from_fn(v[0].len(), cols, |i, j| v[j][i]);
    let am = to_mat(a);
    let cm = to_mat(c);
    let mff_a: Vec<Vec<f64>> = a.iter().map(|x| fine.reduced_mass.matvec(x)).collect();
    let mfc_c: Vec<Vec<f64>> = c.iter().map(|x| tr.mass_fc.matvec(x)).collect();
    let mcf_a: Vec<Vec<f64>> = a.iter().map(|x| tr.mass_fc.tmatvec(x)).collect();
    let mcc_c: Vec<Vec<f64>> = c.iter().map(|x| tr.mass_cc.matvec(x)).collect();
    let left = to_mat(&mff_a) - to_mat(&mfc_c);
    let right = to_mat(&mcf_a) - to_mat(&mcc_c);
    let g = am.transpose() * left - cm.transpose() * right;
    (&g + g.transpose()) * 0.5
}

/// Coarse `Π_div` of the coarse nodal interpolant of a fine reduced field.
fn interpolate_projected(fine: &Discretization, coarse: &Discretization, a: &[f64]) -> Vec<f64> {
    let full = fine.sp.extend(&fine.expand(a));
    let field = coarse.interpolate(
        |x| {
            let (t, l) = fine.sp.mesh.locate(x);
            fine.sp.eval_velocity(&full, t, l).0
        },
        true,
    );
    coarse.project_div(&field).expect("own field")
}

pub fn error_stats(samples: &[SampleError], n_steps: usize) -> Result<ErrorStats> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let len = samples[0].lag_sums.len();
    if samples.iter().any(|s| s.lag_sums.len() != len) {
        return invalid("samples on mixed time grids");
    }
    let est = |f: fn(&SampleError) -> f64| Estimate::of(&samples.iter().map(f).collect::<Vec<_>>());
    let tables: Vec<Vec<f64>> = samples.iter().map(|s| s.lag_sums.clone()).collect();
    Ok(ErrorStats {
        samples: samples.len(),
        n_steps,
        natural_err: est(|s| s.natural),
        vgrad_err: est(|s| s.vgrad),
        besov_err: super::besov_halves(&tables, super::BesovMode::MaxOfMean),
        c_init: est(|s| s.c_init),
        c_linf: est(|s| s.c_linf),
        c_best: est(|s| s.c_best),
        c_g: est(|s| s.c_g),
        c_v: est(|s| s.c_v),
    })
}
