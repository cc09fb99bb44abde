//! Reference quantities on a single triangle: quadrature and the quadratic Lagrange basis.

/// Six-point rule, exact for degree 4; barycentric points and weights summing to one.
pub const QUAD_POINTS: [[f64; 3]; 6] = {
    const A1: f64 = 0.445_948_490_915_964_9;
    const B1: f64 = 1.0 - 2.0 * A1;
    const A2: f64 = 0.091_576_213_509_770_74;
    const B2: f64 = 1.0 - 2.0 * A2;
    [
        [B1, A1, A1],
        [A1, B1, A1],
        [A1, A1, B1],
        [B2, A2, A2],
        [A2, B2, A2],
        [A2, A2, B2],
    ]
};

pub const QUAD_WEIGHTS: [f64; 6] = [
    0.223_381_589_678_011_47,
    0.223_381_589_678_011_47,
    0.223_381_589_678_011_47,
    0.109_951_743_655_321_87,
    0.109_951_743_655_321_87,
    0.109_951_743_655_321_87,
];

pub const NQ: usize = 6;

/// Affine data of a triangle.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub corners: [[f64; 2]; 3],
    pub area: f64,
    /// `∇λ_i`.
    pub grad_bary: [[f64; 2]; 3],
}

impl Geometry {
    pub fn new(corners: [[f64; 2]; 3]) -> Self {
        let [a, b, c] = corners;
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let g1 = [(c[1] - a[1]) / det, -(c[0] - a[0]) / det];
        let g2 = [-(b[1] - a[1]) / det, (b[0] - a[0]) / det];
        let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
        Self {
            corners,
            area: 0.5 * det,
            grad_bary: [g0, g1, g2],
        }
    }

    pub fn point(&self, l: [f64; 3]) -> [f64; 2] {
        let [a, b, c] = self.corners;
        [
            l[0] * a[0] + l[1] * b[0] + l[2] * c[0],
            l[0] * a[1] + l[1] * b[1] + l[2] * c[1],
        ]
    }
}

/// Local node `3 + i` sits at the midpoint of local edge `i`, between vertices `i` and `(i+1) % 3`.
pub const EDGE_VERTS: [[usize; 2]; 3] = [[0, 1], [1, 2], [2, 0]];

pub fn node_bary(i: usize) -> [f64; 3] {
    let mut l = [0.0; 3];
    if i < 3 {
        l[i] = 1.0;
    } else {
        let [a, b] = EDGE_VERTS[i - 3];
        l[a] = 0.5;
        l[b] = 0.5;
    }
    l
}

pub fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

pub fn p2_gradients(l: [f64; 3], g: &[[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let mut out = [[0.0; 2]; 6];
    for i in 0..3 {
        let s = 4.0 * l[i] - 1.0;
        out[i] = [s * g[i][0], s * g[i][1]];
    }
    for (e, [a, b]) in EDGE_VERTS.iter().enumerate() {
        out[3 + e] = [
            4.0 * (l[*a] * g[*b][0] + l[*b] * g[*a][0]),
            4.0 * (l[*a] * g[*b][1] + l[*b] * g[*a][1]),
        ];
    }
    out
}
