//! Lagrange P1/P2 shape functions on affine triangles.
//!
//! Local node order for P2: vertices 0, 1, 2, then the midpoints of edges
//! (0,1), (1,2), (2,0).

use crate::mesh::Point;

/// Affine map data of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct TriangleGeometry {
    pub vertices: [Point; 3],
    pub area: f64,
    /// Constant gradients of the barycentric coordinates.
    pub grad_bary: [[f64; 2]; 3],
}

impl TriangleGeometry {
    pub fn new(vertices: [Point; 3]) -> Self {
        let [a, b, c] = vertices;
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let area = 0.5 * det;
        let g1 = [(c[1] - a[1]) / det, -(c[0] - a[0]) / det];
        let g2 = [-(b[1] - a[1]) / det, (b[0] - a[0]) / det];
        let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
        Self { vertices, area, grad_bary: [g0, g1, g2] }
    }

    pub fn point(&self, bary: &[f64; 3]) -> Point {
        let v = &self.vertices;
        [
            bary[0] * v[0][0] + bary[1] * v[1][0] + bary[2] * v[2][0],
            bary[0] * v[0][1] + bary[1] * v[1][1] + bary[2] * v[2][1],
        ]
    }
}

pub const P2_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

pub fn p1_values(l: &[f64; 3]) -> [f64; 3] {
    *l
}

pub fn p2_values(l: &[f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

pub fn p2_gradients(l: &[f64; 3], g: &[[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let mut out = [[0.0; 2]; 6];
    for i in 0..3 {
        let s = 4.0 * l[i] - 1.0;
        out[i] = [s * g[i][0], s * g[i][1]];
    }
    for (k, &(i, j)) in P2_EDGES.iter().enumerate() {
        out[3 + k] = [
            4.0 * (l[i] * g[j][0] + l[j] * g[i][0]),
            4.0 * (l[i] * g[j][1] + l[j] * g[i][1]),
        ];
    }
    out
}
