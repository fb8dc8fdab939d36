//! Assembly of the bilinear forms and load vectors, and elimination of
//! periodic / Dirichlet constraints.

use crate::element::{p2_gradients, p2_values, TriangleGeometry};
use crate::error::{Error, Result};
use crate::mesh::{ElementOrder, PeriodicMesh, Phase, Point};
use crate::quadrature::six_point;
use crate::space::FeSpace;
use crate::sparse::{CsrMatrix, TripletBuilder};
use crate::tensor::ElasticityTensor4;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Material description of the two-phase composite.
///
/// The matrix phase carries `matrix_tensor`. The inclusion carries the
/// scale-independent bulk part `inclusion_lambda * I (x) I` plus a shear
/// part of Lame modulus `2 * inclusion_mu_scale * eps^2`, so the default
/// scale `1/2` gives shear tensor `eps^2 (d_ip d_jq + d_iq d_jp)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub matrix_tensor: ElasticityTensor4,
    pub inclusion_lambda: f64,
    pub inclusion_mu_scale: f64,
    /// `None` for cell problems, where only the degenerate part enters.
    pub epsilon: Option<f64>,
}

impl Default for MaterialSpec {
    fn default() -> Self {
        Self::isotropic_matrix(1.0, 1.0)
    }
}

impl MaterialSpec {
    pub fn isotropic_matrix(lambda: f64, mu: f64) -> Self {
        Self {
            matrix_tensor: ElasticityTensor4::isotropic(lambda, mu),
            inclusion_lambda: 1.0,
            inclusion_mu_scale: 0.5,
            epsilon: None,
        }
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = Some(eps);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inclusion_lambda > 0.0) {
            return Err(Error::InvalidValue { key: "inclusion_lambda".into(), msg: "must be > 0".into() });
        }
        if !(self.inclusion_mu_scale > 0.0) {
            return Err(Error::InvalidValue { key: "inclusion_mu_scale".into(), msg: "must be > 0".into() });
        }
        if !(self.matrix_tensor.coercivity() > 0.0) {
            return Err(Error::InvalidValue { key: "matrix_tensor".into(), msg: "not positive definite".into() });
        }
        Ok(())
    }

    /// Degenerate tensor (order-one part): matrix tensor on the matrix,
    /// pure bulk response on the inclusion.
    pub fn degenerate_tensor(&self, phase: Phase) -> ElasticityTensor4 {
        match phase {
            Phase::Matrix => self.matrix_tensor,
            Phase::Inclusion => ElasticityTensor4::isotropic(self.inclusion_lambda, 0.0),
        }
    }

    /// Shear tensor multiplying `eps^2`, supported in the inclusion.
    pub fn shear_tensor(&self, phase: Phase) -> ElasticityTensor4 {
        match phase {
            Phase::Matrix => ElasticityTensor4::zero(),
            Phase::Inclusion => ElasticityTensor4::isotropic(0.0, 2.0 * self.inclusion_mu_scale),
        }
    }

    /// `C1 + eps^2 C0`.
    pub fn full_tensor(&self, phase: Phase, eps: f64) -> ElasticityTensor4 {
        self.degenerate_tensor(phase).add(&self.shear_tensor(phase).scaled(eps * eps))
    }

    /// Viscosity of the micro Stokes operator on the inclusion, i.e. the
    /// Lame shear modulus of the shear tensor divided by `eps^2`.
    pub fn stokes_viscosity(&self) -> f64 {
        2.0 * self.inclusion_mu_scale
    }

    /// Volume average of the degenerate tensor over the mesh.
    pub fn mean_degenerate_tensor(&self, mesh: &PeriodicMesh) -> Matrix3<f64> {
        let a2 = mesh.phase_area(Phase::Inclusion);
        let a1 = mesh.phase_area(Phase::Matrix);
        (self.degenerate_tensor(Phase::Matrix).to_voigt() * a1
            + self.degenerate_tensor(Phase::Inclusion).to_voigt() * a2)
            / (a1 + a2)
    }
}

/// Tensor per phase for the general elasticity form.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseTensors {
    pub matrix: Option<ElasticityTensor4>,
    pub inclusion: Option<ElasticityTensor4>,
}

impl PhaseTensors {
    pub fn uniform(t: ElasticityTensor4) -> Self {
        Self { matrix: Some(t), inclusion: Some(t) }
    }

    pub fn get(&self, phase: Phase) -> Result<ElasticityTensor4> {
        match phase {
            Phase::Matrix => self.matrix,
            Phase::Inclusion => self.inclusion,
        }
        .ok_or_else(|| Error::PhaseFieldMissing(phase.name().into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FormKind {
    Elasticity(PhaseTensors),
    /// `C1`: matrix tensor on the matrix, projected bulk form on the
    /// inclusion (see [`assemble_projected_bulk`]).
    Degenerate,
    /// `C1 + eps^2 C0`; needs `material.epsilon`.
    ScaledFull,
    /// Vector mass form.
    Mass,
    /// `-int q div v` between P1 pressures (rows) and P2 velocities.
    Divergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    Periodic,
    Dirichlet,
    MeanZero,
}

/// Map from full vector dofs to equations of the constrained system.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub full_to_reduced: Vec<Option<usize>>,
    pub n_reduced: usize,
}

impl DofMap {
    pub fn identity(n: usize) -> Self {
        Self { full_to_reduced: (0..n).map(Some).collect(), n_reduced: n }
    }

    /// Builds the map for a vector space with the given constraints.
    pub fn for_space(space: &FeSpace, periodic: bool, dirichlet: bool) -> Self {
        let n = space.n_nodes();
        let mut node_eq = vec![None; n];
        let mut next = 0;
        for i in 0..n {
            let m = if periodic { space.master[i] } else { i };
            if m != i || (dirichlet && space.dirichlet[i]) {
                continue;
            }
            node_eq[i] = Some(next);
            next += 1;
        }
        let mut full = vec![None; 2 * n];
        for i in 0..n {
            if dirichlet && space.dirichlet[i] {
                continue;
            }
            let m = if periodic { space.master[i] } else { i };
            if dirichlet && space.dirichlet[m] {
                continue;
            }
            if let Some(k) = node_eq[m] {
                full[2 * i] = Some(2 * k);
                full[2 * i + 1] = Some(2 * k + 1);
            }
        }
        Self { full_to_reduced: full, n_reduced: 2 * next }
    }

    pub fn n_full(&self) -> usize {
        self.full_to_reduced.len()
    }

    /// `P^T b`.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.n_reduced];
        for (d, m) in self.full_to_reduced.iter().enumerate() {
            if let Some(k) = m {
                r[*k] += full[d];
            }
        }
        r
    }

    /// `P x`: constrained dofs take their master's value or zero.
    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        self.full_to_reduced.iter().map(|m| m.map_or(0.0, |k| reduced[k])).collect()
    }

    /// Injection of a full field that already satisfies the constraints.
    pub fn sample(&self, full: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.n_reduced];
        for (d, m) in self.full_to_reduced.iter().enumerate() {
            if let Some(k) = m {
                r[*k] = full[d];
            }
        }
        r
    }

    /// `P^T A P`.
    pub fn reduce_matrix(&self, a: &CsrMatrix) -> CsrMatrix {
        let mut tb = TripletBuilder::with_capacity(self.n_reduced, self.n_reduced, a.nnz());
        for i in 0..a.nrows() {
            if let Some(ri) = self.full_to_reduced[i] {
                for (j, v) in a.row(i) {
                    if let Some(rj) = self.full_to_reduced[j] {
                        tb.push(ri, rj, v);
                    }
                }
            }
        }
        tb.build()
    }
}

/// Assembled operator with right-hand side and constraint metadata.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub dof_map: DofMap,
    pub constraints: Vec<ConstraintKind>,
    /// Orthonormal vectors spanning the constant fields of the constrained
    /// space; filled when `MeanZero` is requested.
    pub mean_basis: Vec<Vec<f64>>,
}

impl SparseSystem {
    pub fn unconstrained(matrix: CsrMatrix) -> Self {
        let n = matrix.nrows();
        Self { matrix, rhs: vec![0.0; n], dof_map: DofMap::identity(n), constraints: vec![], mean_basis: vec![] }
    }

    pub fn has(&self, kind: ConstraintKind) -> bool {
        self.constraints.contains(&kind)
    }
}

fn vector_element_stiffness(
    geo: &TriangleGeometry,
    d: &Matrix3<f64>,
    order: ElementOrder,
) -> Vec<[f64; 12]> {
    let quad = six_point();
    let nloc = if order == ElementOrder::P2 { 6 } else { 3 };
    let mut ke = vec![[0.0; 12]; 2 * nloc];
    for q in &quad {
        let grads: Vec<[f64; 2]> = match order {
            ElementOrder::P2 => p2_gradients(&q.bary, &geo.grad_bary).to_vec(),
            ElementOrder::P1 => geo.grad_bary.to_vec(),
        };
        let w = q.weight * geo.area;
        // strain of basis function (a, c) in Voigt form
        let strain = |a: usize, c: usize| -> [f64; 3] {
            let g = grads[a];
            if c == 0 {
                [g[0], 0.0, g[1]]
            } else {
                [0.0, g[1], g[0]]
            }
        };
        for a in 0..nloc {
            for c in 0..2 {
                let ea = strain(a, c);
                let da = [
                    d[(0, 0)] * ea[0] + d[(0, 1)] * ea[1] + d[(0, 2)] * ea[2],
                    d[(1, 0)] * ea[0] + d[(1, 1)] * ea[1] + d[(1, 2)] * ea[2],
                    d[(2, 0)] * ea[0] + d[(2, 1)] * ea[1] + d[(2, 2)] * ea[2],
                ];
                for b in 0..nloc {
                    for e in 0..2 {
                        let eb = strain(b, e);
                        ke[2 * a + c][2 * b + e] += w * (da[0] * eb[0] + da[1] * eb[1] + da[2] * eb[2]);
                    }
                }
            }
        }
    }
    ke
}

fn scalar_element_mass(geo: &TriangleGeometry, order: ElementOrder) -> Vec<[f64; 6]> {
    let nloc = if order == ElementOrder::P2 { 6 } else { 3 };
    let mut me = vec![[0.0; 6]; nloc];
    for q in &six_point() {
        let vals: Vec<f64> = match order {
            ElementOrder::P2 => p2_values(&q.bary).to_vec(),
            ElementOrder::P1 => q.bary.to_vec(),
        };
        let w = q.weight * geo.area;
        for a in 0..nloc {
            for b in 0..nloc {
                me[a][b] += w * vals[a] * vals[b];
            }
        }
    }
    me
}

pub(crate) fn element_geometry(space: &FeSpace, e: usize) -> TriangleGeometry {
    let n = &space.elements[e];
    TriangleGeometry::new([space.coords[n[0]], space.coords[n[1]], space.coords[n[2]]])
}

/// Runs `f` over element chunks in parallel and merges the triplets in
/// chunk order.
fn assemble_parallel<F>(n_elem: usize, nrows: usize, ncols: usize, f: F) -> CsrMatrix
where
    F: Fn(usize, &mut TripletBuilder) + Sync,
{
    const CHUNK: usize = 512;
    let parts: Vec<TripletBuilder> = (0..n_elem.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut tb = TripletBuilder::new(nrows, ncols);
            for e in c * CHUNK..((c + 1) * CHUNK).min(n_elem) {
                f(e, &mut tb);
            }
            tb
        })
        .collect();
    let mut all = TripletBuilder::with_capacity(nrows, ncols, parts.iter().map(|p| p.len()).sum());
    for p in parts {
        all.extend(p);
    }
    all.build()
}

/// Vector stiffness `int C e(u) : e(v)` with a tensor per element.
pub fn assemble_stiffness<F>(space: &FeSpace, tensor: F) -> Result<CsrMatrix>
where
    F: Fn(Phase) -> Result<ElasticityTensor4> + Sync,
{
    let mut voigt: [Option<Matrix3<f64>>; 2] = [None, None];
    for (k, p) in [Phase::Matrix, Phase::Inclusion].into_iter().enumerate() {
        if space.phases.contains(&p) {
            voigt[k] = Some(tensor(p)?.to_voigt());
        }
    }
    let n = space.n_vector_dofs();
    let order = space.order;
    Ok(assemble_parallel(space.elements.len(), n, n, |e, tb| {
        let idx = if space.phases[e] == Phase::Matrix { 0 } else { 1 };
        let d = voigt[idx].as_ref().expect("checked above");
        if d.iter().all(|&x| x == 0.0) {
            return;
        }
        let geo = element_geometry(space, e);
        let ke = vector_element_stiffness(&geo, d, order);
        let nodes = space.local_nodes(e);
        for (a, &na) in nodes.iter().enumerate() {
            for c in 0..2 {
                for (b, &nb) in nodes.iter().enumerate() {
                    for k in 0..2 {
                        tb.push(2 * na + c, 2 * nb + k, ke[2 * a + c][2 * b + k]);
                    }
                }
            }
        }
    }))
}

/// Scalar mass matrix `int phi_a phi_b`, optionally restricted to one phase.
pub fn assemble_scalar_mass(space: &FeSpace, phase: Option<Phase>) -> CsrMatrix {
    let n = space.n_nodes();
    let order = space.order;
    assemble_parallel(space.elements.len(), n, n, |e, tb| {
        if phase.is_some_and(|p| p != space.phases[e]) {
            return;
        }
        let geo = element_geometry(space, e);
        let me = scalar_element_mass(&geo, order);
        let nodes = space.local_nodes(e);
        for (a, &na) in nodes.iter().enumerate() {
            for (b, &nb) in nodes.iter().enumerate() {
                tb.push(na, nb, me[a][b]);
            }
        }
    })
}

/// Vector mass matrix, optionally restricted to one phase.
pub fn assemble_vector_mass(space: &FeSpace, phase: Option<Phase>) -> CsrMatrix {
    let s = assemble_scalar_mass(space, phase);
    let n = space.n_vector_dofs();
    let mut tb = TripletBuilder::with_capacity(n, n, 2 * s.nnz());
    for i in 0..s.nrows() {
        for (j, v) in s.row(i) {
            tb.push(2 * i, 2 * j, v);
            tb.push(2 * i + 1, 2 * j + 1, v);
        }
    }
    tb.build()
}

/// Divergence coupling `B[q, (a, c)] = -int psi_q d_c phi_a` between a P1
/// pressure space and a P2 velocity space on the same triangulation.
pub fn assemble_divergence(vspace: &FeSpace, pspace: &FeSpace) -> Result<CsrMatrix> {
    if vspace.order != ElementOrder::P2 || pspace.order != ElementOrder::P1 {
        return Err(Error::UnsupportedOrder("divergence needs P2 velocity and P1 pressure".into()));
    }
    let nv = vspace.n_vector_dofs();
    let np = pspace.n_nodes();
    Ok(assemble_parallel(vspace.elements.len(), np, nv, |e, tb| {
        let geo = element_geometry(vspace, e);
        let vn = vspace.local_nodes(e);
        let pn = pspace.local_nodes(e);
        let mut be = [[0.0; 12]; 3];
        for q in &six_point() {
            let g = p2_gradients(&q.bary, &geo.grad_bary);
            let w = q.weight * geo.area;
            for p in 0..3 {
                for a in 0..6 {
                    for c in 0..2 {
                        be[p][2 * a + c] -= w * q.bary[p] * g[a][c];
                    }
                }
            }
        }
        for p in 0..3 {
            for a in 0..6 {
                for c in 0..2 {
                    tb.push(pn[p], 2 * vn[a] + c, be[p][2 * a + c]);
                }
            }
        }
    }))
}

/// Bulk form `lambda * B^T W^{-1} B` on the elements of `phase`. `B` pairs
/// the P2 space with P1 pressures on the vertices of those elements and `W`
/// is the lumped pressure mass. Its kernel is the set of fields that are
/// divergence-free for the P2/P1 pair, and on affine fields it equals
/// `int lambda (div u)^2`.
pub fn assemble_projected_bulk(space: &FeSpace, phase: Phase, lambda: f64) -> Result<CsrMatrix> {
    if space.order != ElementOrder::P2 {
        return Err(Error::UnsupportedOrder("projected bulk form needs a P2 space".into()));
    }
    let nv = space.n_vector_dofs();
    let mut pmap = vec![usize::MAX; space.n_vertices];
    let mut weights: Vec<f64> = Vec::new();
    let mut entries = Vec::new();
    for e in (0..space.elements.len()).filter(|&e| space.phases[e] == phase) {
        let geo = element_geometry(space, e);
        let vn = space.local_nodes(e);
        let mut pn = [0; 3];
        for p in 0..3 {
            if pmap[vn[p]] == usize::MAX {
                pmap[vn[p]] = weights.len();
                weights.push(0.0);
            }
            pn[p] = pmap[vn[p]];
            weights[pn[p]] += geo.area / 3.0;
        }
        for q in &six_point() {
            let g = p2_gradients(&q.bary, &geo.grad_bary);
            let w = q.weight * geo.area;
            for p in 0..3 {
                for a in 0..6 {
                    for c in 0..2 {
                        entries.push((pn[p], 2 * vn[a] + c, -w * q.bary[p] * g[a][c]));
                    }
                }
            }
        }
    }
    let np = weights.len();
    if np == 0 {
        return Ok(CsrMatrix::zeros(nv, nv));
    }
    let mut tb = TripletBuilder::with_capacity(np, nv, entries.len());
    for (i, j, v) in entries {
        tb.push(i, j, v);
    }
    let b = tb.build();
    let scale: Vec<f64> = weights.iter().map(|w| lambda / w).collect();
    let scaled = CsrMatrix::from_diagonal(&scale).matmul(&b);
    Ok(b.transpose().matmul(&scaled))
}

/// Degenerate form: the matrix tensor on the matrix phase plus the
/// projected bulk form of the inclusion.
pub fn assemble_degenerate(space: &FeSpace, material: &MaterialSpec) -> Result<CsrMatrix> {
    assemble_scaled(space, material, 0.0)
}

/// Degenerate form plus `shear_scale` times the inclusion shear form.
pub fn assemble_scaled(space: &FeSpace, material: &MaterialSpec, shear_scale: f64) -> Result<CsrMatrix> {
    let k = assemble_stiffness(space, |p| {
        Ok(match p {
            Phase::Matrix => material.matrix_tensor,
            Phase::Inclusion => material.shear_tensor(p).scaled(shear_scale),
        })
    })?;
    let bulk = assemble_projected_bulk(space, Phase::Inclusion, material.inclusion_lambda)?;
    Ok(k.add_scaled(&bulk, 1.0))
}

/// Assembles one of the standard forms on a mesh. Vector forms use the
/// mesh's element order; the divergence form pairs P2 velocities with P1
/// pressures and yields a rectangular matrix.
pub fn assemble_form(mesh: &PeriodicMesh, kind: FormKind, material: &MaterialSpec) -> Result<SparseSystem> {
    let space = FeSpace::new(mesh, mesh.element_order);
    let m = match kind {
        FormKind::Elasticity(t) => assemble_stiffness(&space, |p| t.get(p))?,
        FormKind::Degenerate => assemble_degenerate(&space, material)?,
        FormKind::ScaledFull => {
            let eps = material.epsilon.ok_or_else(|| Error::InvalidValue {
                key: "epsilon".into(),
                msg: "scaled form needs an epsilon".into(),
            })?;
            assemble_scaled(&space, material, eps * eps)?
        }
        FormKind::Mass => assemble_vector_mass(&space, None),
        FormKind::Divergence => {
            let v = FeSpace::new(mesh, ElementOrder::P2);
            let p = FeSpace::new(mesh, ElementOrder::P1);
            let b = assemble_divergence(&v, &p)?;
            let n = b.nrows();
            return Ok(SparseSystem {
                rhs: vec![0.0; n],
                dof_map: DofMap::identity(b.ncols()),
                matrix: b,
                constraints: vec![],
                mean_basis: vec![],
            });
        }
    };
    Ok(SparseSystem::unconstrained(m))
}

/// Eliminates periodic and Dirichlet constraints and records the mean-zero
/// condition. Applying the same constraints again leaves the system
/// unchanged.
pub fn constrain(system: &SparseSystem, space: &FeSpace, bcs: &[ConstraintKind]) -> Result<SparseSystem> {
    let mut kinds = system.constraints.clone();
    for k in bcs {
        if !kinds.contains(k) {
            kinds.push(*k);
        }
    }
    let periodic = kinds.contains(&ConstraintKind::Periodic);
    let dirichlet = kinds.contains(&ConstraintKind::Dirichlet);
    if periodic && !space.is_periodic() {
        return Err(Error::MissingPeriodicPairs);
    }
    if dirichlet && !space.has_dirichlet() {
        return Err(Error::EmptyBoundary);
    }
    if system.dof_map.n_full() != space.n_vector_dofs() {
        return Err(Error::IncompatibleInputs("system does not match the space".into()));
    }
    let target = DofMap::for_space(space, periodic, dirichlet);
    // current equation -> new equation, through any representative full dof
    let mut step = vec![None; system.dof_map.n_reduced];
    let mut seen = vec![false; system.dof_map.n_reduced];
    for (d, m) in system.dof_map.full_to_reduced.iter().enumerate() {
        if let Some(k) = *m {
            if !seen[k] {
                seen[k] = true;
                step[k] = target.full_to_reduced[d];
            }
        }
    }
    let step_map = DofMap { full_to_reduced: step, n_reduced: target.n_reduced };
    let matrix = step_map.reduce_matrix(&system.matrix);
    let rhs = step_map.restrict(&system.rhs);
    let mut mean_basis = vec![];
    if kinds.contains(&ConstraintKind::MeanZero) {
        mean_basis = translation_basis(target.n_reduced);
    }
    Ok(SparseSystem { matrix, rhs, dof_map: target, constraints: kinds, mean_basis })
}

/// Normalized constant fields `(1, 0)` and `(0, 1)` in interleaved layout.
pub fn translation_basis(n: usize) -> Vec<Vec<f64>> {
    let s = 1.0 / ((n / 2) as f64).sqrt();
    (0..2)
        .map(|c| (0..n).map(|i| if i % 2 == c { s } else { 0.0 }).collect())
        .collect()
}

/// Nodal interpolation of a vector function.
pub fn project_field<F>(space: &FeSpace, f: F) -> Result<Vec<f64>>
where
    F: Fn(Point) -> [f64; 2],
{
    let mut out = vec![0.0; space.n_vector_dofs()];
    for (i, &p) in space.coords.iter().enumerate() {
        let v = f(p);
        if !v[0].is_finite() || !v[1].is_finite() {
            return Err(Error::NonFiniteSample(i));
        }
        out[2 * i] = v[0];
        out[2 * i + 1] = v[1];
    }
    Ok(out)
}

/// Load vector `int f . phi` with `f` evaluated at quadrature points.
pub fn assemble_load<F>(space: &FeSpace, f: F) -> Vec<f64>
where
    F: Fn(Point, Phase) -> [f64; 2] + Sync,
{
    let parts: Vec<Vec<(usize, f64)>> = (0..space.elements.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|e| {
            let geo = element_geometry(space, e);
            let nodes = space.local_nodes(e);
            let mut le = [0.0; 12];
            for q in &six_point() {
                let x = geo.point(&q.bary);
                let fv = f(x, space.phases[e]);
                let w = q.weight * geo.area;
                let vals = basis_values(space.order, &q.bary);
                for a in 0..nodes.len() {
                    le[2 * a] += w * fv[0] * vals[a];
                    le[2 * a + 1] += w * fv[1] * vals[a];
                }
            }
            nodes
                .iter()
                .enumerate()
                .flat_map(|(a, &n)| [(2 * n, le[2 * a]), (2 * n + 1, le[2 * a + 1])])
                .collect()
        })
        .collect();
    let mut out = vec![0.0; space.n_vector_dofs()];
    for part in parts {
        for (i, v) in part {
            out[i] += v;
        }
    }
    out
}

/// Load `int f . phi` from values of `f` given at the six quadrature
/// points of every element, indexed `6 * element + point`.
pub fn assemble_load_at_points(space: &FeSpace, values: &[[f64; 2]]) -> Vec<f64> {
    let mut out = vec![0.0; space.n_vector_dofs()];
    for e in 0..space.elements.len() {
        let geo = element_geometry(space, e);
        let nodes = space.local_nodes(e);
        for (k, q) in six_point().iter().enumerate() {
            let fv = values[6 * e + k];
            let w = q.weight * geo.area;
            let vals = basis_values(space.order, &q.bary);
            for (a, &n) in nodes.iter().enumerate() {
                out[2 * n] += w * fv[0] * vals[a];
                out[2 * n + 1] += w * fv[1] * vals[a];
            }
        }
    }
    out
}

/// Physical coordinates and weights of the six-point rule on every
/// element, indexed `6 * element + point`.
pub fn quadrature_points(space: &FeSpace) -> Vec<(Point, f64)> {
    let mut out = Vec::with_capacity(6 * space.elements.len());
    for e in 0..space.elements.len() {
        let geo = element_geometry(space, e);
        for q in &six_point() {
            out.push((geo.point(&q.bary), q.weight * geo.area));
        }
    }
    out
}

/// Load `-int (C eta) : e(phi)` for a constant strain `eta`.
pub fn assemble_strain_load<F>(space: &FeSpace, tensor: F, eta: &[[f64; 2]; 2]) -> Vec<f64>
where
    F: Fn(Phase) -> ElasticityTensor4,
{
    let stress_of = |p: Phase| {
        let t = tensor(p);
        let mut s = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        s[i][j] += t.c[i][j][k][l] * eta[k][l];
                    }
                }
            }
        }
        s
    };
    let stress = [stress_of(Phase::Matrix), stress_of(Phase::Inclusion)];
    let mut out = vec![0.0; space.n_vector_dofs()];
    for e in 0..space.elements.len() {
        let s = &stress[if space.phases[e] == Phase::Matrix { 0 } else { 1 }];
        let geo = element_geometry(space, e);
        let nodes = space.local_nodes(e);
        for q in &six_point() {
            let w = q.weight * geo.area;
            let grads = basis_gradients(space.order, &q.bary, &geo);
            for (a, &n) in nodes.iter().enumerate() {
                let g = grads[a];
                // s : grad(phi e_c) = s[c][k] g[k] by symmetry of s
                out[2 * n] -= w * (s[0][0] * g[0] + s[0][1] * g[1]);
                out[2 * n + 1] -= w * (s[1][0] * g[0] + s[1][1] * g[1]);
            }
        }
    }
    out
}

pub(crate) fn basis_values(order: ElementOrder, bary: &[f64; 3]) -> Vec<f64> {
    match order {
        ElementOrder::P2 => p2_values(bary).to_vec(),
        ElementOrder::P1 => bary.to_vec(),
    }
}

pub(crate) fn basis_gradients(order: ElementOrder, bary: &[f64; 3], geo: &TriangleGeometry) -> Vec<[f64; 2]> {
    match order {
        ElementOrder::P2 => p2_gradients(bary, &geo.grad_bary).to_vec(),
        ElementOrder::P1 => geo.grad_bary.to_vec(),
    }
}

/// Value and gradient of a vector field at barycentric point `bary` of
/// element `e`.
pub fn eval_field(space: &FeSpace, u: &[f64], e: usize, bary: &[f64; 3]) -> ([f64; 2], [[f64; 2]; 2]) {
    let geo = element_geometry(space, e);
    let vals = basis_values(space.order, bary);
    let grads = basis_gradients(space.order, bary, &geo);
    let mut v = [0.0; 2];
    let mut g = [[0.0; 2]; 2];
    for (a, &n) in space.local_nodes(e).iter().enumerate() {
        for c in 0..2 {
            v[c] += u[2 * n + c] * vals[a];
            for k in 0..2 {
                g[c][k] += u[2 * n + c] * grads[a][k];
            }
        }
    }
    (v, g)
}

/// `sqrt(int |u|^2)`, optionally over one phase.
pub fn l2_norm(space: &FeSpace, u: &[f64], phase: Option<Phase>) -> f64 {
    let mut s = 0.0;
    for e in 0..space.elements.len() {
        if phase.is_some_and(|p| p != space.phases[e]) {
            continue;
        }
        let area = element_geometry(space, e).area;
        for q in &six_point() {
            let (v, _) = eval_field(space, u, e, &q.bary);
            s += q.weight * area * (v[0] * v[0] + v[1] * v[1]);
        }
    }
    s.sqrt()
}

/// `int u` componentwise, optionally over one phase.
pub fn integrate_field(space: &FeSpace, u: &[f64], phase: Option<Phase>) -> [f64; 2] {
    let mut s = [0.0; 2];
    for e in 0..space.elements.len() {
        if phase.is_some_and(|p| p != space.phases[e]) {
            continue;
        }
        let area = element_geometry(space, e).area;
        for q in &six_point() {
            let (v, _) = eval_field(space, u, e, &q.bary);
            s[0] += q.weight * area * v[0];
            s[1] += q.weight * area * v[1];
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_cell_mesh, build_macro_mesh, CellGeometry, Rect, Triangle};
    use crate::quadrature::duffy;
    use crate::sparse::LinearOperator;

    fn two_triangle_square(order: ElementOrder) -> PeriodicMesh {
        PeriodicMesh {
            nodes: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            triangles: vec![
                Triangle { vertices: [0, 1, 2], phase: Phase::Matrix },
                Triangle { vertices: [0, 2, 3], phase: Phase::Matrix },
            ],
            periodic_pairs: vec![],
            boundary_nodes: vec![0, 1, 2, 3],
            element_order: order,
        }
    }

    #[test]
    fn p1_mass_total_is_area() {
        let sys = assemble_form(&two_triangle_square(ElementOrder::P1), FormKind::Mass, &MaterialSpec::default()).unwrap();
        let total: f64 = sys.matrix.values().iter().sum();
        // vector mass counts both components
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_form_annihilates_translations() {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
        let sys = assemble_form(&mesh, FormKind::Degenerate, &MaterialSpec::default()).unwrap();
        let n = sys.matrix.nrows();
        for c in 0..2 {
            let t: Vec<f64> = (0..n).map(|i| if i % 2 == c { 1.0 } else { 0.0 }).collect();
            let r = sys.matrix.apply_alloc(&t);
            assert!(crate::sparse::norm2(&r) <= 1e-12);
        }
    }

    /// Element stiffness by high-order Duffy quadrature with gradients taken
    /// from an explicit monomial basis.
    fn oracle_element_stiffness(v: [Point; 3], lambda: f64, mu: f64) -> Vec<Vec<f64>> {
        // P2 basis via barycentric formula evaluated independently
        let geo = TriangleGeometry::new(v);
        let mut k = vec![vec![0.0; 12]; 12];
        let h = 1e-5;
        let shape = |p: Point, a: usize| {
            let l = crate::mesh::barycentric(v[0], v[1], v[2], p);
            p2_values(&l)[a]
        };
        for q in duffy(8) {
            let x = geo.point(&q.bary);
            let mut g = [[0.0; 2]; 6];
            for (a, ga) in g.iter_mut().enumerate() {
                // central differences are exact for quadratics up to roundoff
                ga[0] = (shape([x[0] + h, x[1]], a) - shape([x[0] - h, x[1]], a)) / (2.0 * h);
                ga[1] = (shape([x[0], x[1] + h], a) - shape([x[0], x[1] - h], a)) / (2.0 * h);
            }
            let w = q.weight * geo.area;
            for a in 0..6 {
                for c in 0..2 {
                    for b in 0..6 {
                        for e in 0..2 {
                            // grad(phi_a e_c)[i][j] = d_ic g_a[j]
                            let mut s = 0.0;
                            let ea = |i: usize, j: usize| 0.5 * (if i == c { g[a][j] } else { 0.0 } + if j == c { g[a][i] } else { 0.0 });
                            let eb = |i: usize, j: usize| 0.5 * (if i == e { g[b][j] } else { 0.0 } + if j == e { g[b][i] } else { 0.0 });
                            let tra = ea(0, 0) + ea(1, 1);
                            let trb = eb(0, 0) + eb(1, 1);
                            s += lambda * tra * trb;
                            for i in 0..2 {
                                for j in 0..2 {
                                    s += 2.0 * mu * ea(i, j) * eb(i, j);
                                }
                            }
                            k[2 * a + c][2 * b + e] += w * s;
                        }
                    }
                }
            }
        }
        k
    }

    #[test]
    fn single_triangle_stiffness_matches_oracle() {
        let v = [[0.1, 0.0], [1.2, 0.3], [0.4, 0.9]];
        let mesh = PeriodicMesh {
            nodes: v.to_vec(),
            triangles: vec![Triangle { vertices: [0, 1, 2], phase: Phase::Matrix }],
            periodic_pairs: vec![],
            boundary_nodes: vec![],
            element_order: ElementOrder::P2,
        };
        let sys = assemble_form(&mesh, FormKind::Elasticity(PhaseTensors::uniform(ElasticityTensor4::isotropic(1.0, 1.0))), &MaterialSpec::default()).unwrap();
        let k = oracle_element_stiffness(v, 1.0, 1.0);
        let d = sys.matrix.to_dense();
        for i in 0..12 {
            for j in 0..12 {
                assert!((d[i][j] - k[i][j]).abs() < 1e-8, "({i},{j}) {} vs {}", d[i][j], k[i][j]);
            }
        }
    }

    #[test]
    fn dirichlet_count_on_macro_mesh() {
        let mut mesh = build_macro_mesh(&Rect::unit(), 2).unwrap();
        mesh.element_order = ElementOrder::P1;
        let space = FeSpace::new(&mesh, ElementOrder::P1);
        let sys = assemble_form(&mesh, FormKind::Mass, &MaterialSpec::default()).unwrap();
        let c = constrain(&sys, &space, &[ConstraintKind::Dirichlet]).unwrap();
        assert_eq!(c.matrix.nrows(), 2);
    }

    #[test]
    fn constrain_is_idempotent() {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
        let space = FeSpace::new(&mesh, ElementOrder::P2);
        let sys = assemble_form(&mesh, FormKind::Degenerate, &MaterialSpec::default()).unwrap();
        let bcs = [ConstraintKind::Periodic, ConstraintKind::MeanZero];
        let a = constrain(&sys, &space, &bcs).unwrap();
        let b = constrain(&a, &space, &[ConstraintKind::MeanZero]).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.mean_basis, b.mean_basis);
        assert!(matches!(
            constrain(&sys, &space, &[ConstraintKind::Dirichlet]).map(|_| ()),
            Ok(())
        ));
        let macro_mesh = build_macro_mesh(&Rect::unit(), 2).unwrap();
        let ms = FeSpace::new(&macro_mesh, ElementOrder::P2);
        let msys = assemble_form(&macro_mesh, FormKind::Mass, &MaterialSpec::default()).unwrap();
        assert!(matches!(constrain(&msys, &ms, &[ConstraintKind::Periodic]), Err(Error::MissingPeriodicPairs)));
    }

    #[test]
    fn symmetry_of_assembled_forms() {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.3, 12)).unwrap();
        let mat = MaterialSpec::default().with_epsilon(0.25);
        for kind in [FormKind::Degenerate, FormKind::ScaledFull, FormKind::Mass] {
            let a = assemble_form(&mesh, kind, &mat).unwrap().matrix;
            assert!(a.symmetry_defect() <= 1e-12 * a.max_abs());
        }
    }

    #[test]
    fn missing_phase_tensor() {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
        let t = PhaseTensors { matrix: Some(ElasticityTensor4::isotropic(1.0, 1.0)), inclusion: None };
        assert!(matches!(assemble_form(&mesh, FormKind::Elasticity(t), &MaterialSpec::default()), Err(Error::PhaseFieldMissing(_))));
    }

    #[test]
    fn interpolation_examples() {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
        let space = FeSpace::new(&mesh, ElementOrder::P2);
        assert!(project_field(&space, |_| [0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
        let c = project_field(&space, |_| [1.0, 0.0]).unwrap();
        assert!(c.chunks(2).all(|p| p == [1.0, 0.0]));
        assert!(matches!(project_field(&space, |_| [f64::NAN, 0.0]), Err(Error::NonFiniteSample(0))));
        let grid = build_macro_mesh(&Rect::unit(), 32).unwrap();
        let gs = FeSpace::new(&grid, ElementOrder::P2);
        let s = project_field(&gs, |p| [(2.0 * std::f64::consts::PI * p[0]).sin(), 0.0]).unwrap();
        let n2 = l2_norm(&gs, &s, None).powi(2);
        assert!((n2 - 0.5).abs() < 0.005, "{n2}");
    }

    #[test]
    fn divergence_of_linear_field() {
        let mesh = build_macro_mesh(&Rect::unit(), 3).unwrap();
        let v = FeSpace::new(&mesh, ElementOrder::P2);
        let p = FeSpace::new(&mesh, ElementOrder::P1);
        let b = assemble_divergence(&v, &p).unwrap();
        // u = (x, 0): div u = 1, so B u = -int psi_q and sums to -area
        let u = project_field(&v, |x| [x[0], 0.0]).unwrap();
        let bu = b.apply_alloc(&u);
        assert!((bu.iter().sum::<f64>() + 1.0).abs() < 1e-13);
    }
}
