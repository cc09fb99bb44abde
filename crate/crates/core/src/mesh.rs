//! Structured triangulations of the unit square and their barycentric (Alfeld) refinement.

use crate::error::{invalid, Error, Result};
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<bool>,
    /// Edges as sorted vertex pairs.
    pub edges: Vec<[usize; 2]>,
    /// Local edge `i` of triangle `t` joins local vertices `i` and `(i+1) % 3`.
    pub tri_edges: Vec<[usize; 3]>,
    pub edge_tris: Vec<Vec<usize>>,
    /// Number of macro cells per side of the structured parent grid.
    pub cells: usize,
    /// Present on split meshes: the macro mesh and `child -> parent`.
    pub macro_mesh: Option<Box<TriMesh>>,
    pub parent: Vec<usize>,
    pub h_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    /// `max_K h_K / ρ_K`, `ρ_K` the inscribed diameter.
    pub shape_regularity: f64,
    /// `max h_K / min h_K`.
    pub quasi_uniform_ratio: f64,
    pub h_max: f64,
    pub h_min: f64,
}

fn area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl TriMesh {
    fn build(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>, boundary: Vec<bool>, cells: usize) -> Self {
        let mut map: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut edge_tris: Vec<Vec<usize>> = Vec::new();
        let mut tri_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut te = [0; 3];
            for i in 0..3 {
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                let e = *map.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edge_tris.push(Vec::new());
                    edges.len() - 1
                });
                edge_tris[e].push(t);
                te[i] = e;
            }
            tri_edges.push(te);
        }
        let h_max = edges
            .iter()
            .map(|e| dist(vertices[e[0]], vertices[e[1]]))
            .fold(0.0, f64::max);
        Self {
            vertices,
            triangles,
            boundary,
            edges,
            tri_edges,
            edge_tris,
            cells,
            macro_mesh: None,
            parent: Vec::new(),
            h_max,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.edge_tris[e].len() == 1
    }

    pub fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        area(a, b, c)
    }

    /// Longest edge of triangle `t`.
    pub fn diameter(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        dist(a, b).max(dist(b, c)).max(dist(c, a))
    }

    pub fn quality_report(&self) -> Result<QualityReport> {
        let mut shape: f64 = 0.0;
        let (mut hmax, mut hmin) = (0.0f64, f64::INFINITY);
        for t in 0..self.n_triangles() {
            let [a, b, c] = self.corners(t);
            let ar = area(a, b, c);
            let perim = dist(a, b) + dist(b, c) + dist(c, a);
            let h = self.diameter(t);
            if !(ar > 1e-14 * h * h) {
                return Err(Error::DegenerateElement {
                    index: t,
                    reason: format!("signed area {ar:e}"),
                });
            }
            let rho = 4.0 * ar / perim;
            shape = shape.max(h / rho);
            hmax = hmax.max(h);
            hmin = hmin.min(h);
        }
        Ok(QualityReport {
            shape_regularity: shape,
            quasi_uniform_ratio: hmax / hmin,
            h_max: hmax,
            h_min: hmin,
        })
    }

    /// Barycentric split: triangle `t` becomes `3t, 3t+1, 3t+2`, child `i` joining
    /// macro corners `i`, `i+1` and the new barycenter `n_vertices + t`.
    pub fn alfeld_split(&self) -> Self {
        let nv = self.n_vertices();
        let mut vertices = self.vertices.clone();
        let mut boundary = self.boundary.clone();
        let mut triangles = Vec::with_capacity(3 * self.n_triangles());
        let mut parent = Vec::with_capacity(3 * self.n_triangles());
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = self.corners(t);
            vertices.push([(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]);
            boundary.push(false);
            let z = nv + t;
            for i in 0..3 {
                triangles.push([tri[i], tri[(i + 1) % 3], z]);
                parent.push(t);
            }
        }
        let mut out = Self::build(vertices, triangles, boundary, self.cells);
        out.macro_mesh = Some(Box::new(self.clone()));
        out.parent = parent;
        out
    }

    /// Barycentric coordinates of `x` in triangle `t`.
    pub fn barycentric(&self, t: usize, x: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.corners(t);
        let det = 2.0 * area(a, b, c);
        let l1 = 2.0 * area(x, c, a) / det;
        let l2 = 2.0 * area(a, b, x) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Triangle containing `x` (structured lookup through the macro grid).
    pub fn locate(&self, x: [f64; 2]) -> (usize, [f64; 3]) {
        let m = self.cells;
        let i = ((x[0] * m as f64).floor().max(0.0) as usize).min(m - 1);
        let j = ((x[1] * m as f64).floor().max(0.0) as usize).min(m - 1);
        let fx = x[0] * m as f64 - i as f64;
        let fy = x[1] * m as f64 - j as f64;
        let macro_t = 2 * (j * m + i) + usize::from(fy > fx);
        let candidates: Vec<usize> = if self.macro_mesh.is_some() {
            (3 * macro_t..3 * macro_t + 3).collect()
        } else {
            vec![macro_t]
        };
        let mut best = (candidates[0], [f64::NEG_INFINITY; 3]);
        let mut best_min = f64::NEG_INFINITY;
        for t in candidates {
            let l = self.barycentric(t, x);
            let mn = l[0].min(l[1]).min(l[2]);
            if mn > best_min {
                best_min = mn;
                best = (t, l);
            }
        }
        best
    }
}

/// `m x m` squares, each cut along the diagonal from `(i, j)` to `(i+1, j+1)`.
pub fn unit_square_mesh(m: usize) -> Result<TriMesh> {
    if m < 1 {
        return invalid("mesh needs at least one cell per side");
    }
    let idx = |i: usize, j: usize| j * (m + 1) + i;
    let mut vertices = Vec::with_capacity((m + 1) * (m + 1));
    let mut boundary = Vec::with_capacity((m + 1) * (m + 1));
    for j in 0..=m {
        for i in 0..=m {
            vertices.push([i as f64 / m as f64, j as f64 / m as f64]);
            boundary.push(i == 0 || j == 0 || i == m || j == m);
        }
    }
    let mut triangles = Vec::with_capacity(2 * m * m);
    for j in 0..m {
        for i in 0..m {
            let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Ok(TriMesh::build(vertices, triangles, boundary, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cell() {
        let t = unit_square_mesh(1).unwrap();
        assert_eq!(t.n_vertices(), 4);
        assert_eq!(t.n_triangles(), 2);
        assert!(t.boundary.iter().all(|&b| b));
        assert!((t.h_max - 2f64.sqrt()).abs() < 1e-15);
        assert!(unit_square_mesh(0).is_err());
    }

    #[test]
    fn alfeld_of_single_cell() {
        let t = unit_square_mesh(1).unwrap().alfeld_split();
        assert_eq!(t.n_vertices(), 6);
        assert_eq!(t.n_triangles(), 6);
        assert_eq!(t.parent, vec![0, 0, 0, 1, 1, 1]);
        for k in 0..6 {
            assert!(t.area(k) > 0.0);
        }
    }

    #[test]
    fn euler_characteristic_and_areas() {
        for m in [1, 2, 3, 5, 8] {
            for t in [
                unit_square_mesh(m).unwrap(),
                unit_square_mesh(m).unwrap().alfeld_split(),
            ] {
                let chi = t.n_vertices() as i64 - t.n_edges() as i64 + t.n_triangles() as i64;
                assert_eq!(chi, 1);
                let total: f64 = (0..t.n_triangles()).map(|k| t.area(k)).sum();
                assert!((total - 1.0).abs() < 1e-13);
                let nb = t.edge_tris.iter().filter(|e| e.len() == 1).count();
                assert_eq!(nb, 4 * m);
            }
        }
    }

    #[test]
    fn split_quality() {
        let mut ratio = None;
        for m in [1, 2, 4, 8] {
            let parent = unit_square_mesh(m).unwrap();
            let child = parent.alfeld_split();
            let qp = parent.quality_report().unwrap();
            let qc = child.quality_report().unwrap();
            assert!(qc.shape_regularity <= 3.0 * qp.shape_regularity);
            assert!((qp.shape_regularity - (1.0 + 2f64.sqrt())).abs() < 1e-12);
            match ratio {
                None => ratio = Some(qc.quasi_uniform_ratio),
                Some(r) => assert!((qc.quasi_uniform_ratio - r).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn degenerate_triangle_reported() {
        let mut t = unit_square_mesh(1).unwrap();
        t.vertices[3] = [0.5, 0.0];
        assert!(matches!(t.quality_report(), Err(Error::DegenerateElement { .. })));
    }

    proptest! {
        #[test]
        fn locate_finds_containing_triangle(m in 1usize..7, x in 0.0f64..1.0, y in 0.0f64..1.0, split in any::<bool>()) {
            let mut t = unit_square_mesh(m).unwrap();
            if split {
                t = t.alfeld_split();
            }
            let (k, l) = t.locate([x, y]);
            prop_assert!(l.iter().all(|&v| v > -1e-12));
            let [a, b, c] = t.corners(k);
            let px = l[0] * a[0] + l[1] * b[0] + l[2] * c[0];
            let py = l[0] * a[1] + l[1] * b[1] + l[2] * c[1];
            prop_assert!((px - x).abs() < 1e-12 && (py - y).abs() < 1e-12);
        }
    }
}
