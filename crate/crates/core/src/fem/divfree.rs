//! Explicit basis of the discretely divergence-free velocities: curls of Clough–Tocher
//! (piecewise cubic, globally C¹) stream functions clamped on the boundary.
//!
//! Macro dofs per triangle: value and `h`-scaled gradient at each corner, `h`-scaled normal
//! derivative at each edge midpoint (normals oriented from the lower to the higher vertex index,
//! rotated clockwise).

use super::element::{node_bary, NQ, QUAD_POINTS};
use super::space::{Spaces, NONE};
use crate::error::{Error, Result};
use crate::sparse::Csr;
use nalgebra::{DMatrix, DVector};

fn mono(x: f64, y: f64) -> [f64; 10] {
    [
        1.0,
        x,
        y,
        x * x,
        x * y,
        y * y,
        x * x * x,
        x * x * y,
        x * y * y,
        y * y * y,
    ]
}

fn mono_dx(x: f64, y: f64) -> [f64; 10] {
    [0.0, 1.0, 0.0, 2.0 * x, y, 0.0, 3.0 * x * x, 2.0 * x * y, y * y, 0.0]
}

fn mono_dy(x: f64, y: f64) -> [f64; 10] {
    [0.0, 0.0, 1.0, 0.0, x, 2.0 * y, 0.0, x * x, 2.0 * x * y, 3.0 * y * y]
}

fn mono_dxx(x: f64, y: f64) -> [f64; 10] {
    [0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 6.0 * x, 2.0 * y, 0.0, 0.0]
}

fn mono_dxy(x: f64, y: f64) -> [f64; 10] {
    [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0 * x, 2.0 * y, 0.0]
}

fn mono_dyy(x: f64, y: f64) -> [f64; 10] {
    [0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0 * x, 6.0 * y]
}

fn eval(c: &[f64; 10], m: [f64; 10]) -> f64 {
    c.iter().zip(m).map(|(a, b)| a * b).sum()
}

/// The twelve local basis functions of one macro triangle, as cubic coefficients on each of its
/// three children in coordinates `(x - centroid) / h`.
#[derive(Clone, Debug)]
pub struct MacroBasis {
    pub centroid: [f64; 2],
    pub coeffs: [[[f64; 10]; 12]; 3],
    pub residual: f64,
}

fn macro_basis(corners: [[f64; 2]; 3], normals: [[f64; 2]; 3], h: f64) -> MacroBasis {
    let c = [
        (corners[0][0] + corners[1][0] + corners[2][0]) / 3.0,
        (corners[0][1] + corners[1][1] + corners[2][1]) / 3.0,
    ];
    let hat = |p: [f64; 2]| [(p[0] - c[0]) / h, (p[1] - c[1]) / h];
    let mut a = DMatrix::<f64>::zeros(48, 30);
    let mut row = 0;
    for j in 0..3 {
        let jm = (j + 2) % 3;
        for s in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0] {
            let p = hat([
                corners[j][0] + s * (c[0] - corners[j][0]),
                corners[j][1] + s * (c[1] - corners[j][1]),
            ]);
            for f in [mono, mono_dx, mono_dy] {
                let m = f(p[0], p[1]);
                for k in 0..10 {
                    a[(row, 10 * j + k)] = m[k];
                    a[(row, 10 * jm + k)] = -m[k];
                }
                row += 1;
            }
        }
    }
    for i in 0..3 {
        let p = hat(corners[i]);
        for f in [mono, mono_dx, mono_dy] {
            let m = f(p[0], p[1]);
            for k in 0..10 {
                a[(row, 10 * i + k)] = m[k];
            }
            row += 1;
        }
    }
    for i in 0..3 {
        let q = corners[(i + 1) % 3];
        let p = hat([0.5 * (corners[i][0] + q[0]), 0.5 * (corners[i][1] + q[1])]);
        let (dx, dy) = (mono_dx(p[0], p[1]), mono_dy(p[0], p[1]));
        for k in 0..10 {
            a[(row, 10 * i + k)] = normals[i][0] * dx[k] + normals[i][1] * dy[k];
        }
        row += 1;
    }
    debug_assert_eq!(row, 48);
    let svd = a.clone().svd(true, true);
    let mut coeffs = [[[0.0; 10]; 12]; 3];
    let mut residual: f64 = 0.0;
    for d in 0..12 {
        let mut rhs = DVector::<f64>::zeros(48);
        // dof rows: corners 36..45 (value, dx, dy per corner), then edges 45..48
        rhs[36 + d] = 1.0;
        let x = svd.solve(&rhs, 1e-12).expect("svd solve");
        residual = residual.max((&a * &x - &rhs).amax());
        for j in 0..3 {
            for k in 0..10 {
                coeffs[j][d][k] = x[10 * j + k];
            }
        }
    }
    MacroBasis {
        centroid: c,
        coeffs,
        residual,
    }
}

/// Basis `Z` of `V_{h,div}` as columns in free velocity coordinates, plus per-quadrature-point
/// values and symmetric gradients of each local basis function for matrix-free assembly.
#[derive(Clone, Debug)]
pub struct DivFreeBasis {
    pub dim: usize,
    pub z: Csr,
    /// Reduced index (or `NONE`) of each local macro dof.
    pub macro_dofs: Vec<[usize; 12]>,
    /// Velocity at `[child][q][d]`, flattened.
    pub vel: Vec<[f64; 2]>,
    /// Symmetric gradient `[[e0, e1], [e1, -e0]]` at `[child][q][d]`, flattened.
    pub eps: Vec<[f64; 2]>,
    pub max_fit_residual: f64,
    pub boundary_leak: f64,
}

impl DivFreeBasis {
    #[inline]
    pub fn at(child: usize, q: usize, d: usize) -> usize {
        (child * NQ + q) * 12 + d
    }

    pub fn new(sp: &Spaces) -> Result<Self> {
        let mac = sp
            .mesh
            .macro_mesh
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("divergence-free basis needs a split mesh".into()))?;
        let nv = mac.n_vertices();
        let h = sp.h;
        let mut reduced = vec![NONE; 3 * nv + mac.n_edges()];
        let mut dim = 0;
        for v in 0..nv {
            if !mac.boundary[v] {
                for k in 0..3 {
                    reduced[3 * v + k] = dim;
                    dim += 1;
                }
            }
        }
        for e in 0..mac.n_edges() {
            if !mac.is_boundary_edge(e) {
                reduced[3 * nv + e] = dim;
                dim += 1;
            }
        }

        let mut owner = vec![NONE; sp.n_nodes()];
        for (t, nodes) in sp.tri_nodes.iter().enumerate() {
            for &n in nodes {
                if owner[n] == NONE {
                    owner[n] = t;
                }
            }
        }

        let n_children = sp.n_triangles();
        let mut macro_dofs = Vec::with_capacity(mac.n_triangles());
        let mut vel = vec![[0.0; 2]; n_children * NQ * 12];
        let mut eps = vec![[0.0; 2]; n_children * NQ * 12];
        let mut trip = Vec::new();
        let mut max_fit_residual: f64 = 0.0;
        let mut boundary_leak: f64 = 0.0;
        for (t, tri) in mac.triangles.iter().enumerate() {
            let corners = mac.corners(t);
            let mut normals = [[0.0; 2]; 3];
            let mut dofs = [NONE; 12];
            for i in 0..3 {
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                let (lo, hi) = (mac.vertices[a.min(b)], mac.vertices[a.max(b)]);
                let (tx, ty) = (hi[0] - lo[0], hi[1] - lo[1]);
                let len = (tx * tx + ty * ty).sqrt();
                normals[i] = [ty / len, -tx / len];
                for k in 0..3 {
                    dofs[3 * i + k] = reduced[3 * tri[i] + k];
                }
                dofs[9 + i] = reduced[3 * nv + mac.tri_edges[t][i]];
            }
            let basis = macro_basis(corners, normals, h);
            max_fit_residual = max_fit_residual.max(basis.residual);
            let hat = |p: [f64; 2]| [(p[0] - basis.centroid[0]) / h, (p[1] - basis.centroid[1]) / h];
            for j in 0..3 {
                let child = 3 * t + j;
                let geo = &sp.geo[child];
                for (ln, &node) in sp.tri_nodes[child].iter().enumerate() {
                    let p = hat(geo.point(node_bary(ln)));
                    let (dx, dy) = (mono_dx(p[0], p[1]), mono_dy(p[0], p[1]));
                    for d in 0..12 {
                        let cf = &basis.coeffs[j][d];
                        let curl = [eval(cf, dy) / h, -eval(cf, dx) / h];
                        if sp.node_boundary[node] {
                            if dofs[d] != NONE {
                                boundary_leak = boundary_leak.max(curl[0].abs()).max(curl[1].abs());
                            }
                            continue;
                        }
                        if owner[node] != child || dofs[d] == NONE {
                            continue;
                        }
                        for c in 0..2 {
                            if curl[c] != 0.0 {
                                trip.push((sp.free_of[2 * node + c], dofs[d], curl[c]));
                            }
                        }
                    }
                }
                for q in 0..NQ {
                    let p = hat(geo.point(QUAD_POINTS[q]));
                    let (dx, dy) = (mono_dx(p[0], p[1]), mono_dy(p[0], p[1]));
                    let (dxx, dxy, dyy) = (mono_dxx(p[0], p[1]), mono_dxy(p[0], p[1]), mono_dyy(p[0], p[1]));
                    for d in 0..12 {
                        let cf = &basis.coeffs[j][d];
                        let k = Self::at(child, q, d);
                        vel[k] = [eval(cf, dy) / h, -eval(cf, dx) / h];
                        let h2 = h * h;
                        eps[k] = [eval(cf, dxy) / h2, 0.5 * (eval(cf, dyy) - eval(cf, dxx)) / h2];
                    }
                }
            }
            macro_dofs.push(dofs);
        }
        let z = Csr::from_triplets(sp.n_velocity(), dim, &trip);
        Ok(Self {
            dim,
            z,
            macro_dofs,
            vel,
            eps,
            max_fit_residual,
            boundary_leak,
        })
    }

    /// Values `u(x_q)` and strain components at all quadrature points of reduced coefficients `c`.
    pub fn eval_at_quadrature(&self, c: &[f64], out_vel: &mut [[f64; 2]], out_eps: &mut [[f64; 2]]) {
        for (t, dofs) in self.macro_dofs.iter().enumerate() {
            let mut local = [0.0; 12];
            for d in 0..12 {
                if dofs[d] != NONE {
                    local[d] = c[dofs[d]];
                }
            }
            for j in 0..3 {
                let child = 3 * t + j;
                for q in 0..NQ {
                    let base = Self::at(child, q, 0);
                    let mut u = [0.0; 2];
                    let mut e = [0.0; 2];
                    for d in 0..12 {
                        let (v, s) = (self.vel[base + d], self.eps[base + d]);
                        u[0] += local[d] * v[0];
                        u[1] += local[d] * v[1];
                        e[0] += local[d] * s[0];
                        e[1] += local[d] * s[1];
                    }
                    out_vel[child * NQ + q] = u;
                    out_eps[child * NQ + q] = e;
                }
            }
        }
    }
}
