use super::element::{node_bary, p2_gradients, p2_values, Geometry, NQ, QUAD_POINTS, QUAD_WEIGHTS};
use crate::error::{invalid, Result};
use crate::mesh::{unit_square_mesh, TriMesh};
use crate::sparse::Csr;

pub const NONE: usize = usize::MAX;

/// Precomputed quadrature data for one point of one triangle.
#[derive(Clone, Copy, Debug)]
pub struct QuadPoint {
    pub x: [f64; 2],
    pub w: f64,
    pub phi: [f64; 6],
    pub dphi: [[f64; 2]; 6],
    pub bary: [f64; 3],
}

/// Continuous quadratic velocities and discontinuous linear pressures on a barycentrically
/// refined structured mesh of the unit square.
#[derive(Clone, Debug)]
pub struct Spaces {
    pub mesh: TriMesh,
    pub geo: Vec<Geometry>,
    /// Scalar quadratic nodes of each triangle (3 vertices, then 3 edge midpoints).
    pub tri_nodes: Vec<[usize; 6]>,
    pub node_coords: Vec<[f64; 2]>,
    pub node_boundary: Vec<bool>,
    /// Unmasked velocity dofs `2 * node + component` that are not on the boundary.
    pub free: Vec<usize>,
    pub free_of: Vec<usize>,
    pub quad: Vec<[QuadPoint; NQ]>,
    pub h: f64,
}

impl Spaces {
    pub fn new(cells: usize) -> Result<Self> {
        if cells < 1 {
            return invalid("need at least one macro cell per side");
        }
        let mesh = unit_square_mesh(cells)?.alfeld_split();
        Ok(Self::from_mesh(mesh))
    }

    pub fn from_mesh(mesh: TriMesh) -> Self {
        let nv = mesh.n_vertices();
        let ne = mesh.n_edges();
        let mut node_coords = mesh.vertices.clone();
        let mut node_boundary = mesh.boundary.clone();
        for (e, [a, b]) in mesh.edges.iter().enumerate() {
            let (pa, pb) = (mesh.vertices[*a], mesh.vertices[*b]);
            node_coords.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            node_boundary.push(mesh.is_boundary_edge(e));
        }
        let geo: Vec<Geometry> = (0..mesh.n_triangles())
            .map(|t| Geometry::new(mesh.corners(t)))
            .collect();
        let tri_nodes = mesh
            .triangles
            .iter()
            .zip(&mesh.tri_edges)
            .map(|(t, e)| [t[0], t[1], t[2], nv + e[0], nv + e[1], nv + e[2]])
            .collect();
        let n_nodes = nv + ne;
        let mut free = Vec::new();
        let mut free_of = vec![NONE; 2 * n_nodes];
        for node in 0..n_nodes {
            if !node_boundary[node] {
                for c in 0..2 {
                    free_of[2 * node + c] = free.len();
                    free.push(2 * node + c);
                }
            }
        }
        let quad = geo
            .iter()
            .map(|g| {
                std::array::from_fn(|q| {
                    let l = QUAD_POINTS[q];
                    QuadPoint {
                        x: g.point(l),
                        w: QUAD_WEIGHTS[q] * g.area,
                        phi: p2_values(l),
                        dphi: p2_gradients(l, &g.grad_bary),
                        bary: l,
                    }
                })
            })
            .collect();
        let h = mesh.macro_mesh.as_ref().map_or(mesh.h_max, |m| m.h_max);
        Self {
            mesh,
            geo,
            tri_nodes,
            node_coords,
            node_boundary,
            free,
            free_of,
            quad,
            h,
        }
    }

    pub fn cells(&self) -> usize {
        self.mesh.cells
    }

    pub fn n_triangles(&self) -> usize {
        self.mesh.n_triangles()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    /// Unmasked velocity dimension (`X_h`).
    pub fn n_velocity_full(&self) -> usize {
        2 * self.n_nodes()
    }

    /// `dim V_h`.
    pub fn n_velocity(&self) -> usize {
        self.free.len()
    }

    /// `dim Q_h` before removing constants.
    pub fn n_pressure(&self) -> usize {
        3 * self.n_triangles()
    }

    /// Velocity value and gradient (`grad[i][j] = ∂_j u_i`) in triangle `t` at barycentric `l`.
    pub fn eval_velocity(&self, coeffs: &[f64], t: usize, l: [f64; 3]) -> ([f64; 2], [[f64; 2]; 2]) {
        let phi = p2_values(l);
        let dphi = p2_gradients(l, &self.geo[t].grad_bary);
        let nodes = &self.tri_nodes[t];
        let mut u = [0.0; 2];
        let mut g = [[0.0; 2]; 2];
        for a in 0..6 {
            for c in 0..2 {
                let v = coeffs[2 * nodes[a] + c];
                u[c] += v * phi[a];
                g[c][0] += v * dphi[a][0];
                g[c][1] += v * dphi[a][1];
            }
        }
        (u, g)
    }

    pub fn eval_pressure(&self, coeffs: &[f64], t: usize, l: [f64; 3]) -> f64 {
        (0..3).map(|i| coeffs[3 * t + i] * l[i]).sum()
    }

    /// Nodal interpolant of `f` into `X_h`, optionally with boundary values zeroed.
    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> [f64; 2], masked: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.n_velocity_full()];
        for (node, x) in self.node_coords.iter().enumerate() {
            if masked && self.node_boundary[node] {
                continue;
            }
            let v = f(*x);
            out[2 * node] = v[0];
            out[2 * node + 1] = v[1];
        }
        out
    }

    /// Restriction of a full coefficient vector to free dofs.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&d| full[d]).collect()
    }

    /// Free-dof vector scattered into a full vector with zero boundary values.
    pub fn extend(&self, free: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_velocity_full()];
        for (&d, &v) in self.free.iter().zip(free) {
            out[d] = v;
        }
        out
    }

    pub fn mass_full(&self) -> Csr {
        let mut trip = Vec::with_capacity(self.n_triangles() * 72);
        for (t, qs) in self.quad.iter().enumerate() {
            let nodes = &self.tri_nodes[t];
            let mut local = [[0.0; 6]; 6];
            for q in qs {
                for a in 0..6 {
                    for b in 0..6 {
                        local[a][b] += q.w * q.phi[a] * q.phi[b];
                    }
                }
            }
            for a in 0..6 {
                for b in 0..6 {
                    for c in 0..2 {
                        trip.push((2 * nodes[a] + c, 2 * nodes[b] + c, local[a][b]));
                    }
                }
            }
        }
        let n = self.n_velocity_full();
        Csr::from_triplets(n, n, &trip)
    }

    /// `(ε u, ε v)` on the unmasked space.
    pub fn sym_grad_full(&self) -> Csr {
        let mut trip = Vec::with_capacity(self.n_triangles() * 144);
        for (t, qs) in self.quad.iter().enumerate() {
            let nodes = &self.tri_nodes[t];
            let mut local = [[[[0.0; 2]; 2]; 6]; 6];
            for q in qs {
                for a in 0..6 {
                    for b in 0..6 {
                        let (ga, gb) = (q.dphi[a], q.dphi[b]);
                        let dd = ga[0] * gb[0] + ga[1] * gb[1];
                        for c in 0..2 {
                            for d in 0..2 {
                                let diag = if c == d { dd } else { 0.0 };
                                local[a][b][c][d] += q.w * 0.5 * (diag + ga[d] * gb[c]);
                            }
                        }
                    }
                }
            }
            for a in 0..6 {
                for b in 0..6 {
                    for c in 0..2 {
                        for d in 0..2 {
                            trip.push((2 * nodes[a] + c, 2 * nodes[b] + d, local[a][b][c][d]));
                        }
                    }
                }
            }
        }
        let n = self.n_velocity_full();
        Csr::from_triplets(n, n, &trip)
    }

    /// `B[q, v] = (q, div v)` with pressure dof `3t + i` the barycentric coordinate `λ_i` on `t`.
    pub fn div_full(&self) -> Csr {
        let mut trip = Vec::with_capacity(self.n_triangles() * 36);
        for (t, qs) in self.quad.iter().enumerate() {
            let nodes = &self.tri_nodes[t];
            let mut local = [[[0.0; 2]; 6]; 3];
            for q in qs {
                for i in 0..3 {
                    for a in 0..6 {
                        for c in 0..2 {
                            local[i][a][c] += q.w * q.bary[i] * q.dphi[a][c];
                        }
                    }
                }
            }
            for i in 0..3 {
                for a in 0..6 {
                    for c in 0..2 {
                        trip.push((3 * t + i, 2 * nodes[a] + c, local[i][a][c]));
                    }
                }
            }
        }
        Csr::from_triplets(self.n_pressure(), self.n_velocity_full(), &trip)
    }

    pub fn pressure_mass(&self) -> Csr {
        let mut trip = Vec::with_capacity(self.n_triangles() * 9);
        for (t, g) in self.geo.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    let v = g.area * if i == j { 2.0 } else { 1.0 } / 12.0;
                    trip.push((3 * t + i, 3 * t + j, v));
                }
            }
        }
        let n = self.n_pressure();
        Csr::from_triplets(n, n, &trip)
    }

    /// `∫ ψ_i` for each pressure basis function.
    pub fn pressure_moments(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_pressure()];
        for (t, g) in self.geo.iter().enumerate() {
            for i in 0..3 {
                m[3 * t + i] = g.area / 3.0;
            }
        }
        m
    }

    /// Divergence of `v` at the three vertices of each triangle (exact maximum of a linear function).
    pub fn divergence_pointwise_max(&self, coeffs: &[f64]) -> f64 {
        let mut mx: f64 = 0.0;
        for t in 0..self.n_triangles() {
            for i in 0..3 {
                let (_, g) = self.eval_velocity(coeffs, t, node_bary(i));
                mx = mx.max((g[0][0] + g[1][1]).abs());
            }
        }
        mx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions_single_cell() {
        let s = Spaces::new(1).unwrap();
        // 6 vertices + 11 edges = 17 nodes; interior: 2 barycenters + 7 interior edges
        assert_eq!(s.n_nodes(), 17);
        assert_eq!(s.n_velocity(), 2 * 9);
        assert_eq!(s.n_pressure(), 18);
    }

    #[test]
    fn mass_partition_of_unity() {
        let s = Spaces::new(3).unwrap();
        let m = s.mass_full();
        let total: f64 = m.data.iter().sum();
        assert!((total - 2.0).abs() < 1e-13);
    }

    #[test]
    fn constants_are_divergence_free() {
        let s = Spaces::new(3).unwrap();
        let c = s.interpolate(|_| [1.3, -0.7], false);
        let b = s.div_full();
        let bc = b.matvec(&c);
        assert!(bc.iter().all(|v| v.abs() < 1e-14));
        assert!(s.divergence_pointwise_max(&c) < 1e-12);
    }

    #[test]
    fn linear_field_divergence_and_strain() {
        let s = Spaces::new(2).unwrap();
        let v = s.interpolate(|x| [x[0], 0.0], false);
        assert!((s.divergence_pointwise_max(&v) - 1.0).abs() < 1e-12);
        let shear = s.interpolate(|x| [x[1], 0.0], false);
        let k = s.sym_grad_full();
        let e = crate::sparse::dot(&shear, &k.matvec(&shear));
        assert!((e - 0.5).abs() < 1e-13);
    }

    #[test]
    fn div_pairs_with_pressure_constants() {
        // (1, div v) = 0 for every masked v
        let s = Spaces::new(2).unwrap();
        let b = s.div_full();
        let ones = vec![1.0; s.n_pressure()];
        let bt1 = b.tmatvec(&ones);
        for &d in &s.free {
            assert!(bt1[d].abs() < 1e-14);
        }
    }
}
