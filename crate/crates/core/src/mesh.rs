//! Boundary-fitted triangulations of the periodic cell, the macroscopic
//! domain and the fine-scale composite.
//!
//! All meshes start from a structured grid of squares split along the
//! `(i, j) -> (i+1, j+1)` diagonal. Grid nodes close to the interface are
//! snapped onto it: for every grid edge whose endpoints lie strictly on
//! opposite sides of the interface, the endpoint with the smaller level-set
//! value is projected onto the interface. Afterwards no edge crosses the
//! interface, so every triangle lies in a single phase.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Matrix,
    Inclusion,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Matrix => "matrix",
            Phase::Inclusion => "inclusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementOrder {
    P1,
    P2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InclusionShape {
    /// A radius of zero means "no inclusion".
    Disk { center: Point, radius: f64 },
    Square { center: Point, half_width: f64 },
}

impl InclusionShape {
    pub fn disk(cx: f64, cy: f64, radius: f64) -> Self {
        InclusionShape::Disk { center: [cx, cy], radius }
    }

    pub fn is_empty(&self) -> bool {
        match *self {
            InclusionShape::Disk { radius, .. } => radius <= 0.0,
            InclusionShape::Square { half_width, .. } => half_width <= 0.0,
        }
    }

    /// Signed distance-like level set, negative inside.
    pub fn level_set(&self, p: Point) -> f64 {
        match *self {
            InclusionShape::Disk { center, radius } => {
                ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt() - radius
            }
            InclusionShape::Square { center, half_width } => {
                (p[0] - center[0]).abs().max((p[1] - center[1]).abs()) - half_width
            }
        }
    }

    /// Closest point on the interface.
    fn project(&self, p: Point) -> Point {
        match *self {
            InclusionShape::Disk { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let d = (dx * dx + dy * dy).sqrt();
                if d == 0.0 {
                    [center[0] + radius, center[1]]
                } else {
                    [center[0] + radius * dx / d, center[1] + radius * dy / d]
                }
            }
            InclusionShape::Square { center, half_width } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let cl = |v: f64| v.clamp(-half_width, half_width);
                if dx.abs().max(dy.abs()) >= half_width {
                    [center[0] + cl(dx), center[1] + cl(dy)]
                } else if half_width - dx.abs() < half_width - dy.abs() {
                    [center[0] + half_width.copysign(dx), p[1]]
                } else {
                    [p[0], center[1] + half_width.copysign(dy)]
                }
            }
        }
    }

    /// Area of the exact inclusion.
    pub fn area(&self) -> f64 {
        match *self {
            InclusionShape::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
            InclusionShape::Square { half_width, .. } => 4.0 * half_width * half_width,
        }
    }

    fn bbox(&self) -> (Point, Point) {
        match *self {
            InclusionShape::Disk { center, radius } => (
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ),
            InclusionShape::Square { center, half_width } => (
                [center[0] - half_width, center[1] - half_width],
                [center[0] + half_width, center[1] + half_width],
            ),
        }
    }

    fn characteristic_size(&self) -> f64 {
        match *self {
            InclusionShape::Disk { radius, .. } => radius,
            InclusionShape::Square { half_width, .. } => half_width,
        }
    }
}

/// Unit-cell geometry: the inclusion shape and the number of grid segments
/// per unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub inclusion: InclusionShape,
    pub resolution: usize,
}

impl CellGeometry {
    pub fn disk(radius: f64, resolution: usize) -> Self {
        Self { inclusion: InclusionShape::disk(0.5, 0.5, radius), resolution }
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    pub vertices: [usize; 3],
    pub phase: Phase,
}

/// Triangulation with phase tags and periodic node identification.
///
/// `periodic_pairs` holds `(master, slave)` pairs; a slave's master is never
/// itself a slave, so corners of a periodic cell all map to the node at the
/// lower-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicMesh {
    pub nodes: Vec<Point>,
    pub triangles: Vec<Triangle>,
    pub periodic_pairs: Vec<(usize, usize)>,
    pub boundary_nodes: Vec<usize>,
    pub element_order: ElementOrder,
}

impl PeriodicMesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].vertices;
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn phase_area(&self, phase: Phase) -> f64 {
        (0..self.triangles.len())
            .filter(|&t| self.triangles[t].phase == phase)
            .map(|t| self.triangle_area(t))
            .sum()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn count_phase(&self, phase: Phase) -> usize {
        self.triangles.iter().filter(|t| t.phase == phase).count()
    }

    pub fn bounding_box(&self) -> Rect {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.nodes {
            r.x0 = r.x0.min(p[0]);
            r.y0 = r.y0.min(p[1]);
            r.x1 = r.x1.max(p[0]);
            r.y1 = r.y1.max(p[1]);
        }
        r
    }

    pub fn with_order(mut self, order: ElementOrder) -> Self {
        self.element_order = order;
        self
    }

    /// Periodic master of every node (identity for unpaired nodes).
    pub fn master_map(&self) -> Vec<usize> {
        let mut m: Vec<usize> = (0..self.nodes.len()).collect();
        for &(master, slave) in &self.periodic_pairs {
            m[slave] = master;
        }
        m
    }

    /// Whether the elements of `phase` form one edge-connected component,
    /// taking periodic identification into account.
    pub fn phase_connected(&self, phase: Phase) -> bool {
        let master = self.master_map();
        let tris: Vec<usize> = (0..self.triangles.len())
            .filter(|&t| self.triangles[t].phase == phase)
            .collect();
        if tris.is_empty() {
            return true;
        }
        let mut edge_owner: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (k, &t) in tris.iter().enumerate() {
            let v = self.triangles[t].vertices;
            for e in 0..3 {
                let a = master[v[e]];
                let b = master[v[(e + 1) % 3]];
                edge_owner.entry((a.min(b), a.max(b))).or_default().push(k);
            }
        }
        let mut parent: Vec<usize> = (0..tris.len()).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let n = p[y];
                p[y] = r;
                y = n;
            }
            r
        }
        for owners in edge_owner.values() {
            for w in owners.windows(2) {
                let a = find(&mut parent, w[0]);
                let b = find(&mut parent, w[1]);
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        (0..tris.len()).all(|k| find(&mut parent, k) == root)
    }

    /// Restriction to the triangles of one phase. Returns the submesh and,
    /// for each submesh node, its index in `self`. Boundary nodes of the
    /// submesh are the vertices of edges owned by a single triangle.
    pub fn phase_submesh(&self, phase: Phase) -> (PeriodicMesh, Vec<usize>) {
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut back = Vec::new();
        let mut triangles = Vec::new();
        for t in self.triangles.iter().filter(|t| t.phase == phase) {
            let mut v = [0; 3];
            for (k, &g) in t.vertices.iter().enumerate() {
                if map[g] == usize::MAX {
                    map[g] = back.len();
                    back.push(g);
                }
                v[k] = map[g];
            }
            triangles.push(Triangle { vertices: v, phase });
        }
        let nodes = back.iter().map(|&g| self.nodes[g]).collect();
        let mut sub = PeriodicMesh {
            nodes,
            triangles,
            periodic_pairs: vec![],
            boundary_nodes: vec![],
            element_order: self.element_order,
        };
        sub.boundary_nodes = topological_boundary_nodes(&sub);
        (sub, back)
    }

    /// Serializes to the `mesh2d v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("mesh2d v1\n");
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for (i, p) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "{} {:?} {:?}", i, p[0], p[1]);
        }
        let _ = writeln!(s, "tris {}", self.triangles.len());
        for (i, t) in self.triangles.iter().enumerate() {
            let [a, b, c] = t.vertices;
            let _ = writeln!(s, "{} {} {} {} {}", i, a, b, c, t.phase.name());
        }
        let _ = writeln!(s, "periodic {}", self.periodic_pairs.len());
        for (m, sl) in &self.periodic_pairs {
            let _ = writeln!(s, "{} {}", m, sl);
        }
        let _ = writeln!(s, "dirichlet {}", self.boundary_nodes.len());
        for b in &self.boundary_nodes {
            let _ = writeln!(s, "{}", b);
        }
        s
    }

    /// Parses the `mesh2d v1` text format. The element order is not part of
    /// the format; parsed meshes are tagged `P1`.
    pub fn from_text(text: &str) -> Result<PeriodicMesh> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let err = |line: usize, msg: &str| Error::MeshFormat { line, msg: msg.to_string() };
        let mut next = |what: &str| -> Result<(usize, Vec<String>)> {
            loop {
                match lines.next() {
                    Some((_, "")) => continue,
                    Some((n, l)) => {
                        return Ok((n, l.split_whitespace().map(str::to_string).collect()))
                    }
                    None => return Err(err(0, &format!("unexpected end of input, expected {what}"))),
                }
            }
        };
        let (n, h) = next("header")?;
        if h != ["mesh2d", "v1"] {
            return Err(err(n, "expected header `mesh2d v1`"));
        }
        let section = |n: usize, toks: &[String], name: &str| -> Result<usize> {
            if toks.len() != 2 || toks[0] != name {
                return Err(err(n, &format!("expected `{name} <count>`")));
            }
            toks[1].parse().map_err(|_| err(n, "bad count"))
        };
        let num = |n: usize, s: &str| -> Result<f64> { s.parse().map_err(|_| err(n, "bad number")) };
        let idx = |n: usize, s: &str| -> Result<usize> { s.parse().map_err(|_| err(n, "bad index")) };

        let (n, t) = next("nodes")?;
        let nn = section(n, &t, "nodes")?;
        let mut nodes = Vec::with_capacity(nn);
        for i in 0..nn {
            let (n, t) = next("node")?;
            if t.len() != 3 || idx(n, &t[0])? != i {
                return Err(err(n, "expected `id x y`"));
            }
            nodes.push([num(n, &t[1])?, num(n, &t[2])?]);
        }
        let (n, t) = next("tris")?;
        let nt = section(n, &t, "tris")?;
        let mut triangles = Vec::with_capacity(nt);
        for i in 0..nt {
            let (n, t) = next("triangle")?;
            if t.len() != 5 || idx(n, &t[0])? != i {
                return Err(err(n, "expected `id n1 n2 n3 phase`"));
            }
            let v = [idx(n, &t[1])?, idx(n, &t[2])?, idx(n, &t[3])?];
            if v.iter().any(|&x| x >= nn) {
                return Err(err(n, "node index out of range"));
            }
            let phase = match t[4].as_str() {
                "matrix" => Phase::Matrix,
                "inclusion" => Phase::Inclusion,
                _ => return Err(err(n, "unknown phase")),
            };
            triangles.push(Triangle { vertices: v, phase });
        }
        let (n, t) = next("periodic")?;
        let np = section(n, &t, "periodic")?;
        let mut periodic_pairs = Vec::with_capacity(np);
        for _ in 0..np {
            let (n, t) = next("pair")?;
            if t.len() != 2 {
                return Err(err(n, "expected `master slave`"));
            }
            periodic_pairs.push((idx(n, &t[0])?, idx(n, &t[1])?));
        }
        let (n, t) = next("dirichlet")?;
        let nd = section(n, &t, "dirichlet")?;
        let mut boundary_nodes = Vec::with_capacity(nd);
        for _ in 0..nd {
            let (n, t) = next("node id")?;
            if t.len() != 1 {
                return Err(err(n, "expected a node id"));
            }
            boundary_nodes.push(idx(n, &t[0])?);
        }
        Ok(PeriodicMesh { nodes, triangles, periodic_pairs, boundary_nodes, element_order: ElementOrder::P1 })
    }
}

pub(crate) fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn topological_boundary_nodes(mesh: &PeriodicMesh) -> Vec<usize> {
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &mesh.triangles {
        for e in 0..3 {
            let a = t.vertices[e];
            let b = t.vertices[(e + 1) % 3];
            *count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut flag = vec![false; mesh.nodes.len()];
    for (&(a, b), &c) in &count {
        if c == 1 {
            flag[a] = true;
            flag[b] = true;
        }
    }
    (0..flag.len()).filter(|&i| flag[i]).collect()
}

/// Structured grid on `[0,1]^2` with `n` segments per side, snapped to the
/// interface of `inclusion` (if any). Returns node coordinates in
/// `(n+1)^2` row-major order (`j * (n+1) + i`) and triangle phases.
fn snapped_unit_grid(inclusion: &InclusionShape, n: usize) -> Result<(Vec<Point>, Vec<Triangle>)> {
    let stride = n + 1;
    let h = 1.0 / n as f64;
    let mut nodes: Vec<Point> = (0..stride * stride)
        .map(|k| [(k % stride) as f64 * h, (k / stride) as f64 * h])
        .collect();
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let a = j * stride + i;
            let b = a + 1;
            let c = a + stride + 1;
            let d = a + stride;
            triangles.push(Triangle { vertices: [a, b, c], phase: Phase::Matrix });
            triangles.push(Triangle { vertices: [a, c, d], phase: Phase::Matrix });
        }
    }
    if inclusion.is_empty() {
        return Ok((nodes, triangles));
    }
    let phi: Vec<f64> = nodes.iter().map(|&p| inclusion.level_set(p)).collect();
    let mut snap = vec![false; nodes.len()];
    for t in &triangles {
        for e in 0..3 {
            let a = t.vertices[e];
            let b = t.vertices[(e + 1) % 3];
            if phi[a] * phi[b] < 0.0 {
                let pick = if phi[a].abs() < phi[b].abs() || (phi[a].abs() == phi[b].abs() && a < b) {
                    a
                } else {
                    b
                };
                snap[pick] = true;
            }
        }
    }
    for (k, s) in snap.iter().enumerate() {
        if *s {
            nodes[k] = inclusion.project(nodes[k]);
        }
    }
    let tol = 1e-12;
    for t in triangles.iter_mut() {
        let [a, b, c] = t.vertices;
        let vmax = [a, b, c].iter().map(|&v| inclusion.level_set(nodes[v])).fold(f64::MIN, f64::max);
        let centroid = [
            (nodes[a][0] + nodes[b][0] + nodes[c][0]) / 3.0,
            (nodes[a][1] + nodes[b][1] + nodes[c][1]) / 3.0,
        ];
        if vmax <= tol && inclusion.level_set(centroid) < 0.0 {
            t.phase = Phase::Inclusion;
        }
        let area = signed_area(nodes[a], nodes[b], nodes[c]);
        if area <= 1e-3 * h * h {
            return Err(Error::ResolutionTooCoarse(format!(
                "snapping produced a degenerate triangle (area {area:e})"
            )));
        }
    }
    Ok((nodes, triangles))
}

fn check_cell_geometry(geom: &CellGeometry) -> Result<()> {
    if geom.resolution < 4 {
        return Err(Error::ResolutionTooCoarse(format!("resolution {} < 4", geom.resolution)));
    }
    if geom.inclusion.is_empty() {
        return Ok(());
    }
    let h = 1.0 / geom.resolution as f64;
    let (lo, hi) = geom.inclusion.bbox();
    let margin = lo[0].min(lo[1]).min(1.0 - hi[0]).min(1.0 - hi[1]);
    if margin < h - 1e-12 {
        return Err(Error::InclusionTouchesBoundary);
    }
    if geom.inclusion.characteristic_size() < h {
        return Err(Error::ResolutionTooCoarse(format!(
            "inclusion size {} below mesh size {h}",
            geom.inclusion.characteristic_size()
        )));
    }
    Ok(())
}

/// Periodic pairs of a structured `(nx*n+1) x (ny*n+1)` grid.
fn grid_periodic_pairs(cols: usize, rows: usize) -> Vec<(usize, usize)> {
    let stride = cols + 1;
    let mut pairs = Vec::new();
    for j in 0..=rows {
        for i in 0..=cols {
            if i < cols && j < rows {
                continue;
            }
            let mi = if i == cols { 0 } else { i };
            let mj = if j == rows { 0 } else { j };
            pairs.push((mj * stride + mi, j * stride + i));
        }
    }
    pairs
}

fn grid_boundary_nodes(cols: usize, rows: usize) -> Vec<usize> {
    let stride = cols + 1;
    (0..(rows + 1) * stride)
        .filter(|&k| {
            let (i, j) = (k % stride, k / stride);
            i == 0 || j == 0 || i == cols || j == rows
        })
        .collect()
}

/// Boundary-fitted triangulation of the unit cell.
pub fn build_cell_mesh(geom: &CellGeometry) -> Result<PeriodicMesh> {
    check_cell_geometry(geom)?;
    let n = geom.resolution;
    let (nodes, triangles) = snapped_unit_grid(&geom.inclusion, n)?;
    if !geom.inclusion.is_empty() && !triangles.iter().any(|t| t.phase == Phase::Inclusion) {
        return Err(Error::ResolutionTooCoarse("interface not resolved".into()));
    }
    Ok(PeriodicMesh {
        nodes,
        triangles,
        periodic_pairs: grid_periodic_pairs(n, n),
        boundary_nodes: grid_boundary_nodes(n, n),
        element_order: ElementOrder::P2,
    })
}

/// Structured triangulation of a rectangle with `n` segments per unit
/// length. Every element is tagged matrix.
pub fn build_macro_mesh(domain: &Rect, n: usize) -> Result<PeriodicMesh> {
    if n < 2 {
        return Err(Error::InvalidValue { key: "n".into(), msg: format!("{n} < 2") });
    }
    let cols = (domain.width() * n as f64).round() as usize;
    let rows = (domain.height() * n as f64).round() as usize;
    if cols == 0 || rows == 0 || domain.width() <= 0.0 || domain.height() <= 0.0 {
        return Err(Error::InvalidValue { key: "domain".into(), msg: "empty rectangle".into() });
    }
    let stride = cols + 1;
    let hx = domain.width() / cols as f64;
    let hy = domain.height() / rows as f64;
    let nodes = (0..(rows + 1) * stride)
        .map(|k| [domain.x0 + (k % stride) as f64 * hx, domain.y0 + (k / stride) as f64 * hy])
        .collect();
    let mut triangles = Vec::with_capacity(2 * rows * cols);
    for j in 0..rows {
        for i in 0..cols {
            let a = j * stride + i;
            triangles.push(Triangle { vertices: [a, a + 1, a + stride + 1], phase: Phase::Matrix });
            triangles.push(Triangle { vertices: [a, a + stride + 1, a + stride], phase: Phase::Matrix });
        }
    }
    Ok(PeriodicMesh {
        nodes,
        triangles,
        periodic_pairs: vec![],
        boundary_nodes: grid_boundary_nodes(cols, rows),
        element_order: ElementOrder::P2,
    })
}

/// Number of cells per unit length for `eps`, if `1/eps` is an integer.
pub fn cells_per_unit(eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::NonTilingEpsilon(f64::NAN));
    }
    let m = 1.0 / eps;
    let r = m.round();
    if r < 1.0 || (m - r).abs() > 1e-9 * m.max(1.0) {
        return Err(Error::NonTilingEpsilon(m));
    }
    Ok(r as usize)
}

/// Fine-scale composite mesh: `domain` tiled by cells of size `eps`, each a
/// scaled copy of the cell mesh with `cells_res` segments. Inclusions of
/// cells touching the outer boundary are tagged matrix.
pub fn build_fine_mesh(
    domain: &Rect,
    eps: f64,
    cells_res: usize,
    inclusion: &InclusionShape,
) -> Result<PeriodicMesh> {
    let m = cells_per_unit(eps)?;
    let eps = 1.0 / m as f64;
    let nx_f = domain.width() / eps;
    let ny_f = domain.height() / eps;
    if (nx_f - nx_f.round()).abs() > 1e-9 || (ny_f - ny_f.round()).abs() > 1e-9 || nx_f < 1.0 || ny_f < 1.0 {
        return Err(Error::NonTilingEpsilon(1.0 / eps));
    }
    let (nx, ny) = (nx_f.round() as usize, ny_f.round() as usize);
    if cells_res < 8 {
        return Err(Error::ResolutionTooCoarse(format!("cells_res {cells_res} < 8")));
    }
    let geom = CellGeometry { inclusion: *inclusion, resolution: cells_res };
    check_cell_geometry(&geom)?;
    let n = cells_res;
    let (template, cell_tris) = snapped_unit_grid(inclusion, n)?;
    let tstride = n + 1;
    let cols = nx * n;
    let rows = ny * n;
    let stride = cols + 1;
    let mut nodes = Vec::with_capacity((rows + 1) * stride);
    for gj in 0..=rows {
        for gi in 0..=cols {
            let ci = (gi / n).min(nx - 1);
            let cj = (gj / n).min(ny - 1);
            let t = template[(gj - cj * n) * tstride + (gi - ci * n)];
            nodes.push([domain.x0 + eps * (ci as f64 + t[0]), domain.y0 + eps * (cj as f64 + t[1])]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * rows * cols);
    for cj in 0..ny {
        for ci in 0..nx {
            let touches = ci == 0 || cj == 0 || ci == nx - 1 || cj == ny - 1;
            for t in &cell_tris {
                let v = t.vertices.map(|k| {
                    let (li, lj) = (k % tstride, k / tstride);
                    (cj * n + lj) * stride + ci * n + li
                });
                let phase = if touches { Phase::Matrix } else { t.phase };
                triangles.push(Triangle { vertices: v, phase });
            }
        }
    }
    Ok(PeriodicMesh {
        nodes,
        triangles,
        periodic_pairs: vec![],
        boundary_nodes: grid_boundary_nodes(cols, rows),
        element_order: ElementOrder::P2,
    })
}

/// Barycentric coordinates of `p` in triangle `(a, b, c)`.
pub fn barycentric(a: Point, b: Point, c: Point, p: Point) -> [f64; 3] {
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

const LOCATE_TOL: f64 = 1e-12;

/// Phase of the triangle containing `x`; points on shared edges resolve to
/// the lowest-index triangle.
pub fn locate_phase(mesh: &PeriodicMesh, x: Point) -> Result<Phase> {
    for t in &mesh.triangles {
        let [a, b, c] = t.vertices;
        let l = barycentric(mesh.nodes[a], mesh.nodes[b], mesh.nodes[c], x);
        if l.iter().all(|&v| v >= -LOCATE_TOL) {
            return Ok(t.phase);
        }
    }
    Err(Error::PointOutsideDomain(x[0], x[1]))
}

/// Bucket grid for repeated point location.
#[derive(Debug, Clone)]
pub struct PointLocator {
    bbox: Rect,
    nb: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointLocator {
    pub fn new(mesh: &PeriodicMesh) -> Self {
        let bbox = mesh.bounding_box();
        let nb = ((mesh.triangles.len() as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nb * nb];
        let cell = |v: f64, lo: f64, len: f64| -> usize {
            (((v - lo) / len * nb as f64).floor().max(0.0) as usize).min(nb - 1)
        };
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let ps = t.vertices.map(|v| mesh.nodes[v]);
            let (mut lx, mut ly, mut hx, mut hy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for p in ps {
                lx = lx.min(p[0]);
                ly = ly.min(p[1]);
                hx = hx.max(p[0]);
                hy = hy.max(p[1]);
            }
            let eps = 1e-12 * (bbox.width() + bbox.height());
            for bj in cell(ly - eps, bbox.y0, bbox.height())..=cell(hy + eps, bbox.y0, bbox.height()) {
                for bi in cell(lx - eps, bbox.x0, bbox.width())..=cell(hx + eps, bbox.x0, bbox.width()) {
                    buckets[bj * nb + bi].push(ti);
                }
            }
        }
        Self { bbox, nb, buckets }
    }

    /// Containing triangle and barycentric coordinates.
    pub fn locate(&self, mesh: &PeriodicMesh, x: Point) -> Option<(usize, [f64; 3])> {
        let b = &self.bbox;
        let tol = 1e-10 * (b.width() + b.height());
        if x[0] < b.x0 - tol || x[0] > b.x1 + tol || x[1] < b.y0 - tol || x[1] > b.y1 + tol {
            return None;
        }
        let nb = self.nb;
        let bi = ((((x[0] - b.x0) / b.width()) * nb as f64).floor().max(0.0) as usize).min(nb - 1);
        let bj = ((((x[1] - b.y0) / b.height()) * nb as f64).floor().max(0.0) as usize).min(nb - 1);
        for &t in &self.buckets[bj * nb + bi] {
            let [p, q, r] = mesh.triangles[t].vertices;
            let l = barycentric(mesh.nodes[p], mesh.nodes[q], mesh.nodes[r], x);
            if l.iter().all(|&v| v >= -1e-10) {
                return Some((t, l));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn empty_inclusion_is_all_matrix() {
        let m = build_cell_mesh(&CellGeometry::disk(0.0, 8)).unwrap();
        assert_eq!(m.count_phase(Phase::Inclusion), 0);
        assert_eq!(m.triangles.len(), 128);
        assert!(!m.periodic_pairs.is_empty());
    }

    #[test]
    fn disk_area_converges() {
        let m = build_cell_mesh(&CellGeometry::disk(0.25, 32)).unwrap();
        let a = m.phase_area(Phase::Inclusion);
        let exact = PI * 0.0625;
        assert!((a - exact).abs() / exact < 0.02, "area {a}");
        assert!((m.total_area() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn area_error_is_first_order_or_better() {
        let exact = PI * 0.0625;
        let e16 = (build_cell_mesh(&CellGeometry::disk(0.25, 16)).unwrap().phase_area(Phase::Inclusion) - exact).abs();
        let e32 = (build_cell_mesh(&CellGeometry::disk(0.25, 32)).unwrap().phase_area(Phase::Inclusion) - exact).abs();
        let ratio = e16 / e32;
        assert!(ratio >= 1.5, "ratio {ratio}");
    }

    #[test]
    fn margin_violation() {
        assert!(matches!(build_cell_mesh(&CellGeometry::disk(0.49, 8)), Err(Error::InclusionTouchesBoundary)));
    }

    #[test]
    fn too_coarse() {
        assert!(matches!(build_cell_mesh(&CellGeometry::disk(0.25, 3)), Err(Error::ResolutionTooCoarse(_))));
    }

    #[test]
    fn periodic_pairs_differ_by_lattice_vector() {
        let m = build_cell_mesh(&CellGeometry::disk(0.25, 16)).unwrap();
        for &(a, b) in &m.periodic_pairs {
            let d = [m.nodes[b][0] - m.nodes[a][0], m.nodes[b][1] - m.nodes[a][1]];
            let ok = |v: f64| (v - 0.0).abs() < 1e-12 || (v - 1.0).abs() < 1e-12;
            assert!(ok(d[0]) && ok(d[1]) && (d[0] + d[1]) > 0.5);
            // masters are never slaves
            assert!(!m.periodic_pairs.iter().any(|&(_, s)| s == a));
        }
    }

    #[test]
    fn triangles_positive_and_matrix_connected() {
        for &(r, n) in &[(0.25, 8), (0.25, 32), (0.45, 32), (0.3, 17)] {
            let m = build_cell_mesh(&CellGeometry::disk(r, n)).unwrap();
            assert!((0..m.triangles.len()).all(|t| m.triangle_area(t) > 0.0));
            assert!(m.phase_connected(Phase::Matrix), "r={r} n={n}");
        }
    }

    #[test]
    fn square_inclusion() {
        let g = CellGeometry {
            inclusion: InclusionShape::Square { center: [0.5, 0.5], half_width: 0.25 },
            resolution: 16,
        };
        let m = build_cell_mesh(&g).unwrap();
        assert!((m.phase_area(Phase::Inclusion) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn macro_counts() {
        let m = build_macro_mesh(&Rect::unit(), 2).unwrap();
        assert_eq!((m.triangles.len(), m.nodes.len()), (8, 9));
        assert_eq!(build_macro_mesh(&Rect::unit(), 4).unwrap().triangles.len(), 32);
        let r = build_macro_mesh(&Rect::new(0.0, 0.0, 2.0, 1.0), 4).unwrap();
        assert_eq!(r.triangles.len(), 64);
        assert!((r.total_area() - 2.0).abs() < 1e-13);
        assert!(r.periodic_pairs.is_empty());
        assert_eq!(m.boundary_nodes.len(), 8);
    }

    #[test]
    fn fine_mesh_boundary_cells_are_matrix() {
        let inc = InclusionShape::disk(0.5, 0.5, 0.25);
        let m = build_fine_mesh(&Rect::unit(), 0.5, 8, &inc).unwrap();
        assert_eq!(m.count_phase(Phase::Inclusion), 0);
        let m4 = build_fine_mesh(&Rect::unit(), 0.25, 8, &inc).unwrap();
        let cell = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
        assert_eq!(m4.count_phase(Phase::Inclusion), 4 * cell.count_phase(Phase::Inclusion));
        assert!(matches!(build_fine_mesh(&Rect::unit(), 0.3, 8, &inc), Err(Error::NonTilingEpsilon(_))));
    }

    #[test]
    fn fine_mesh_inclusion_area() {
        let inc = InclusionShape::disk(0.5, 0.5, 0.25);
        let eps = 0.125;
        let m = build_fine_mesh(&Rect::unit(), eps, 16, &inc).unwrap();
        let exact = 36.0 * eps * eps * PI * 0.0625;
        let a = m.phase_area(Phase::Inclusion);
        assert!((a - exact).abs() / exact < 0.03, "{a} vs {exact}");
        assert!((m.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn locate_phase_examples() {
        let m = build_cell_mesh(&CellGeometry::disk(0.25, 16)).unwrap();
        assert_eq!(locate_phase(&m, [0.5, 0.5]).unwrap(), Phase::Inclusion);
        assert_eq!(locate_phase(&m, [0.05, 0.05]).unwrap(), Phase::Matrix);
        let a = locate_phase(&m, [0.75, 0.5]).unwrap();
        let b = locate_phase(&m, [0.75, 0.5]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(locate_phase(&m, [1.5, 0.5]), Err(Error::PointOutsideDomain(..))));
    }

    #[test]
    fn locator_agrees_with_scan() {
        let m = build_cell_mesh(&CellGeometry::disk(0.3, 12)).unwrap();
        let loc = PointLocator::new(&m);
        for k in 0..200 {
            let p = [((k * 37) % 101) as f64 / 100.0, ((k * 53) % 97) as f64 / 96.0];
            let (t, l) = loc.locate(&m, p).unwrap();
            assert!(l.iter().all(|&v| v > -1e-10));
            assert_eq!(m.triangles[t].phase, locate_phase(&m, p).unwrap());
        }
    }

    #[test]
    fn text_round_trip() {
        let m = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap().with_order(ElementOrder::P1);
        let txt = m.to_text();
        assert!(txt.starts_with("mesh2d v1\nnodes 81\n"));
        let back = PeriodicMesh::from_text(&txt).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), txt);
        assert!(PeriodicMesh::from_text("mesh2d v2\n").is_err());
    }

    #[test]
    fn inclusion_submesh_boundary_lies_on_interface() {
        let m = build_cell_mesh(&CellGeometry::disk(0.25, 16)).unwrap();
        let (sub, _) = m.phase_submesh(Phase::Inclusion);
        assert!(!sub.boundary_nodes.is_empty());
        for &b in &sub.boundary_nodes {
            let p = sub.nodes[b];
            let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
            assert!((r - 0.25).abs() < 1e-12, "node at radius {r}");
        }
    }
}
