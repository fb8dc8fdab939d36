//! Scalar Lagrange node sets (P1 or P2) derived from a triangulation.
//!
//! Vector fields use the interleaved layout `dof = 2 * node + component`.

use crate::element::P2_EDGES;
use crate::mesh::{ElementOrder, PeriodicMesh, Phase, Point, Rect};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct FeSpace {
    pub order: ElementOrder,
    /// Vertices first (same indices as the mesh), then edge midpoints.
    pub coords: Vec<Point>,
    /// Local-to-global node indices; P1 spaces use the first three entries.
    pub elements: Vec<[usize; 6]>,
    pub phases: Vec<Phase>,
    /// Periodic master of every node (identity when unpaired).
    pub master: Vec<usize>,
    /// Nodes carrying Dirichlet constraints.
    pub dirichlet: Vec<bool>,
    pub n_vertices: usize,
}

impl FeSpace {
    pub fn new(mesh: &PeriodicMesh, order: ElementOrder) -> Self {
        let nv = mesh.nodes.len();
        let mut coords = mesh.nodes.clone();
        let mut elements = Vec::with_capacity(mesh.triangles.len());
        let mut edge_node: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &mesh.triangles {
            let v = t.vertices;
            let mut e = [v[0], v[1], v[2], usize::MAX, usize::MAX, usize::MAX];
            for (k, &(i, j)) in P2_EDGES.iter().enumerate() {
                let key = (v[i].min(v[j]), v[i].max(v[j]));
                *edge_count.entry(key).or_default() += 1;
                if order == ElementOrder::P2 {
                    let id = *edge_node.entry(key).or_insert_with(|| {
                        let a = mesh.nodes[key.0];
                        let b = mesh.nodes[key.1];
                        coords.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
                        coords.len() - 1
                    });
                    e[3 + k] = id;
                }
            }
            elements.push(e);
        }
        let n = coords.len();

        let mut dirichlet = vec![false; n];
        for &b in &mesh.boundary_nodes {
            dirichlet[b] = true;
        }
        if order == ElementOrder::P2 {
            for (&(a, b), &id) in &edge_node {
                if edge_count[&(a, b)] == 1 && dirichlet[a] && dirichlet[b] {
                    dirichlet[id] = true;
                }
            }
        }

        let mut master: Vec<usize> = (0..n).collect();
        if !mesh.periodic_pairs.is_empty() {
            for &(m, s) in &mesh.periodic_pairs {
                master[s] = m;
            }
            if order == ElementOrder::P2 {
                let bb = mesh.bounding_box();
                let key = |p: Point| ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64);
                let mut by_pos: HashMap<(i64, i64), usize> = HashMap::new();
                for id in nv..n {
                    by_pos.insert(key(coords[id]), id);
                }
                for id in nv..n {
                    if let Some(target) = periodic_image(&bb, coords[id]) {
                        if let Some(&m) = by_pos.get(&key(target)) {
                            master[id] = m;
                        }
                    }
                }
            }
        }
        Self {
            order,
            coords,
            elements,
            phases: mesh.triangles.iter().map(|t| t.phase).collect(),
            master,
            dirichlet,
            n_vertices: nv,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_vector_dofs(&self) -> usize {
        2 * self.coords.len()
    }

    pub fn nodes_per_element(&self) -> usize {
        match self.order {
            ElementOrder::P1 => 3,
            ElementOrder::P2 => 6,
        }
    }

    pub fn local_nodes(&self, e: usize) -> &[usize] {
        &self.elements[e][..self.nodes_per_element()]
    }

    pub fn is_periodic(&self) -> bool {
        self.master.iter().enumerate().any(|(i, &m)| i != m)
    }

    pub fn has_dirichlet(&self) -> bool {
        self.dirichlet.iter().any(|&d| d)
    }
}

/// Image of a point on the upper/right face on the opposite face.
fn periodic_image(bb: &Rect, p: Point) -> Option<Point> {
    let tol = 1e-12 * (bb.width() + bb.height());
    let mut q = p;
    let mut moved = false;
    if (p[0] - bb.x1).abs() < tol {
        q[0] = bb.x0;
        moved = true;
    }
    if (p[1] - bb.y1).abs() < tol {
        q[1] = bb.y0;
        moved = true;
    }
    moved.then_some(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_cell_mesh, build_macro_mesh, CellGeometry};

    #[test]
    fn p2_node_count_on_grid() {
        let m = build_macro_mesh(&Rect::unit(), 4).unwrap();
        let s = FeSpace::new(&m, ElementOrder::P2);
        assert_eq!(s.n_nodes(), 81);
        assert_eq!(s.dirichlet.iter().filter(|&&d| d).count(), 32);
    }

    #[test]
    fn periodic_masters_are_translates() {
        let m = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
        let s = FeSpace::new(&m, ElementOrder::P2);
        let mut slaves = 0;
        for (i, &mi) in s.master.iter().enumerate() {
            if mi != i {
                slaves += 1;
                assert_eq!(s.master[mi], mi);
                let d = [s.coords[i][0] - s.coords[mi][0], s.coords[i][1] - s.coords[mi][1]];
                assert!((d[0] - 0.0).abs() < 1e-12 || (d[0] - 1.0).abs() < 1e-12);
                assert!((d[1] - 0.0).abs() < 1e-12 || (d[1] - 1.0).abs() < 1e-12);
            }
        }
        // 17x17 P2 grid nodes on the square boundary: 2*17 - 1 slaves
        assert_eq!(slaves, 33);
    }
}
