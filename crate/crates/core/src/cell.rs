//! The degenerate periodic cell problem, the effective tensor it defines,
//! and the perforated-cell comparison tensor.
//!
//! Cell problems are posed in strain form: for a unit Voigt strain `eta_a`
//! find a periodic `N_a` with
//!
//! ```text
//! int_Q C1 (eta_a + e(N_a)) : e(phi) = 0   for all periodic phi
//! ```
//!
//! and `Chom_ab = int_Q C1 (eta_a + e(N_a)) : eta_b`. By the minor
//! symmetries of `C1` this is the same as the gradient form. The degenerate
//! form has a large kernel (translations plus divergence-free fields
//! supported in the inclusion), so the system is solved by conjugate
//! gradients in the range, with the translations projected out explicitly
//! and the rest of the kernel handled by consistency of the load.

use crate::assembly::{
    assemble_degenerate, assemble_stiffness, assemble_strain_load, constrain, translation_basis, ConstraintKind,
    MaterialSpec, SparseSystem,
};
use crate::error::{Error, Result};
use crate::mesh::{ElementOrder, PeriodicMesh, Phase};
use crate::solvers::cg::project_out;
use crate::solvers::{cg_solve, CgOptions, SolveReport};
use crate::space::FeSpace;
use crate::sparse::{dot, norm2, CsrMatrix, LinearOperator};
use crate::tensor::{min_voigt_eigenvalue, voigt_to_strain, ElasticityTensor4};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Symmetric index pair `rs` of a unit macro strain, in Voigt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrainIndex {
    E11,
    E22,
    E12,
}

impl StrainIndex {
    pub const ALL: [StrainIndex; 3] = [StrainIndex::E11, StrainIndex::E22, StrainIndex::E12];

    pub fn voigt(self) -> usize {
        match self {
            StrainIndex::E11 => 0,
            StrainIndex::E22 => 1,
            StrainIndex::E12 => 2,
        }
    }

    /// Accepts `11`, `22`, `12` and `21`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "11" => Some(StrainIndex::E11),
            "22" => Some(StrainIndex::E22),
            "12" | "21" => Some(StrainIndex::E12),
            _ => None,
        }
    }

    /// Symmetrized `e_r (x) e_s`.
    pub fn strain(self) -> [[f64; 2]; 2] {
        let mut v = [0.0; 3];
        v[self.voigt()] = 1.0;
        voigt_to_strain(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorProvenance {
    Chom,
    ChatPerforated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveTensor {
    /// Engineering-shear Voigt matrix.
    pub voigt: Matrix3<f64>,
    pub provenance: TensorProvenance,
}

impl EffectiveTensor {
    pub fn tensor(&self) -> ElasticityTensor4 {
        ElasticityTensor4::from_voigt(&self.voigt)
    }

    pub fn symmetry_defect(&self) -> f64 {
        (self.voigt - self.voigt.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_voigt_eigenvalue(&self.voigt)
    }

    /// `eps^T D eps` for a Voigt strain.
    pub fn energy(&self, eps: &[f64; 3]) -> f64 {
        let e = nalgebra::Vector3::from_column_slice(eps);
        (e.transpose() * self.voigt * e)[0]
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.voigt[(i, j)];
            }
        }
        r
    }
}

/// Probes of the kernel of the constrained degenerate form, in the reduced
/// (periodic) layout.
#[derive(Debug, Clone)]
pub struct DegenerateKernelBasis {
    /// The two normalized constant fields.
    pub translations: Vec<Vec<f64>>,
    /// Normalized fields supported in the inclusion with zero elementwise
    /// divergence.
    pub bubble_samples: Vec<Vec<f64>>,
}

impl DegenerateKernelBasis {
    pub fn all(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.translations.iter().chain(self.bubble_samples.iter())
    }
}

/// Result of one cell solve.
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub index: StrainIndex,
    /// Corrector in the reduced periodic layout, orthogonal to translations.
    pub corrector: Vec<f64>,
    pub report: SolveReport,
    /// `max |<F, z>| / (|F_full| |z|)` over the kernel probes, with
    /// `F_full` the load before periodic elimination.
    pub consistency: f64,
}

/// Assembled degenerate cell problem, reusable across the three strains.
pub struct CellProblem {
    pub space: FeSpace,
    pub system: SparseSystem,
    pub material: MaterialSpec,
    /// Degenerate form before periodic elimination.
    raw: CsrMatrix,
    /// Interpolants of `y -> eta_a y` in the unconstrained layout.
    affine: [Vec<f64>; 3],
}

impl CellProblem {
    pub fn new(mesh: &PeriodicMesh, material: &MaterialSpec) -> Result<Self> {
        material.validate()?;
        if mesh.element_order != ElementOrder::P2 {
            return Err(Error::UnsupportedOrder("cell problems need a P2 mesh".into()));
        }
        let space = FeSpace::new(mesh, ElementOrder::P2);
        let raw = assemble_degenerate(&space, material)?;
        let system = constrain(
            &SparseSystem::unconstrained(raw.clone()),
            &space,
            &[ConstraintKind::Periodic, ConstraintKind::MeanZero],
        )?;
        let affine = StrainIndex::ALL.map(|i| {
            let eta = i.strain();
            space
                .coords
                .iter()
                .flat_map(|y| [eta[0][0] * y[0] + eta[0][1] * y[1], eta[1][0] * y[0] + eta[1][1] * y[1]])
                .collect()
        });
        Ok(Self { space, system, material: *material, raw, affine })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.system.matrix
    }

    /// Reduced load `-a(eta y, phi)`, i.e. `-int C1 eta : e(phi)`.
    pub fn load(&self, index: StrainIndex) -> Vec<f64> {
        self.system.dof_map.restrict(&self.full_load(index))
    }

    fn full_load(&self, index: StrainIndex) -> Vec<f64> {
        self.raw.apply_alloc(&self.affine[index.voigt()]).iter().map(|x| -x).collect()
    }

    /// `int_Q C1` in Voigt form, as the degenerate form on affine fields.
    pub fn mean_tensor(&self) -> Matrix3<f64> {
        let ka: Vec<Vec<f64>> = self.affine.iter().map(|u| self.raw.apply_alloc(u)).collect();
        Matrix3::from_fn(|b, a| dot(&self.affine[b], &ka[a]))
    }

    /// Reduced dofs that belong only to inclusion elements.
    fn inclusion_interior_dofs(&self) -> Vec<usize> {
        let n = self.space.n_nodes();
        let mut touches_matrix = vec![false; n];
        let mut in_inclusion = vec![false; n];
        for (e, nodes) in self.space.elements.iter().enumerate() {
            for &v in nodes.iter() {
                if self.space.phases[e] == Phase::Matrix {
                    touches_matrix[v] = true;
                } else {
                    in_inclusion[v] = true;
                }
            }
        }
        let mut dofs = Vec::new();
        for v in 0..n {
            if in_inclusion[v] && !touches_matrix[v] && self.space.master[v] == v {
                for c in 0..2 {
                    if let Some(k) = self.system.dof_map.full_to_reduced[2 * v + c] {
                        dofs.push(k);
                    }
                }
            }
        }
        dofs.sort_unstable();
        dofs.dedup();
        dofs
    }

    /// Translations plus `count` random divergence-free inclusion fields.
    /// Each bubble is a random field on the inclusion-interior dofs minus a
    /// solution `y` of `K_ii y = K_ii w`, which lands exactly in the kernel
    /// of the inclusion block.
    pub fn kernel_basis(&self, count: usize, seed: u64) -> Result<DegenerateKernelBasis> {
        let n = self.system.dof_map.n_reduced;
        let translations = translation_basis(n);
        let dofs = self.inclusion_interior_dofs();
        let mut bubble_samples = Vec::with_capacity(count);
        if dofs.is_empty() || count == 0 {
            return Ok(DegenerateKernelBasis { translations, bubble_samples });
        }
        let kii = self.system.matrix.submatrix(&dofs, &dofs);
        let diag = floored_diagonal(&kii);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = CgOptions { tol: 1e-14, max_iter: 50_000, jacobi: true, record_history: false };
        for _ in 0..count {
            let w: Vec<f64> = (0..dofs.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let kw = kii.apply_alloc(&w);
            let y = match cg_solve(&kii, &kw, &opts, None, Some(&diag)) {
                Ok((y, _)) => y,
                // the tolerance sits near round-off; accept the best iterate
                // and let the annihilation check below judge it
                Err(Error::MaxIterations { .. }) => {
                    let loose = CgOptions { tol: 1e-12, ..opts };
                    cg_solve(&kii, &kw, &loose, None, Some(&diag))?.0
                }
                Err(e) => return Err(e),
            };
            let mut z = vec![0.0; n];
            for (i, &d) in dofs.iter().enumerate() {
                z[d] = w[i] - y[i];
            }
            let nz = norm2(&z);
            if nz < 1e-8 * norm2(&w) {
                continue;
            }
            z.iter_mut().for_each(|x| *x /= nz);
            bubble_samples.push(z);
        }
        Ok(DegenerateKernelBasis { translations, bubble_samples })
    }

    /// `max ||K z|| / ||z||` over the probes.
    pub fn kernel_annihilation(&self, basis: &DegenerateKernelBasis) -> f64 {
        basis.all().map(|z| norm2(&self.system.matrix.apply_alloc(z)) / norm2(z)).fold(0.0, f64::max)
    }

    pub fn solve(&self, index: StrainIndex, basis: &DegenerateKernelBasis, opts: &CgOptions) -> Result<CellSolution> {
        let mut f = self.load(index);
        // the unconstrained load sets the scale; the reduced one vanishes
        // for a homogeneous cell
        let fnorm = norm2(&self.full_load(index));
        let mut consistency: f64 = 0.0;
        if fnorm > 0.0 {
            for z in basis.all() {
                consistency = consistency.max(dot(&f, z).abs() / (fnorm * norm2(z)));
            }
        }
        if consistency > 1e-12 {
            return Err(Error::ConsistencyViolation(consistency));
        }
        // the check passed, so what remains along the translations is
        // round-off
        project_out(&mut f, &basis.translations);
        let diag = floored_diagonal(&self.system.matrix);
        let (corrector, report) =
            cg_solve(&self.system.matrix, &f, opts, Some(&basis.translations), Some(&diag))?;
        Ok(CellSolution { index, corrector, report, consistency })
    }

    /// `Chom_ab = (int C1)_ab - F_b . N_a`, using that
    /// `int C1 e(N_a) : eta_b = -F_b . N_a`.
    pub fn tensor_from(&self, correctors: &[Vec<f64>; 3]) -> EffectiveTensor {
        let loads: Vec<Vec<f64>> = StrainIndex::ALL.iter().map(|&i| self.load(i)).collect();
        let mean = self.mean_tensor();
        let voigt = Matrix3::from_fn(|b, a| mean[(b, a)] - dot(&loads[b], &correctors[a]));
        EffectiveTensor { voigt, provenance: TensorProvenance::Chom }
    }
}

/// Jacobi weights for a degenerate matrix. A dof with a vanishing diagonal
/// carries only kernel directions and gets the largest diagonal instead.
fn floored_diagonal(a: &CsrMatrix) -> Vec<f64> {
    let mut diag = a.diagonal();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    for d in diag.iter_mut().filter(|d| **d <= 1e-12 * dmax) {
        *d = dmax;
    }
    diag
}

/// Outcome of the effective-tensor computation with its checks.
#[derive(Debug, Clone)]
pub struct HomogenizationResult {
    pub chom: EffectiveTensor,
    pub solutions: Vec<CellSolution>,
    pub kernel: DegenerateKernelBasis,
    /// `max ||K z|| / ||z||` over the kernel probes.
    pub kernel_annihilation: f64,
}

impl HomogenizationResult {
    pub fn correctors(&self) -> [Vec<f64>; 3] {
        [self.solutions[0].corrector.clone(), self.solutions[1].corrector.clone(), self.solutions[2].corrector.clone()]
    }
}

/// Number of random bubble probes used by the checks.
pub const DEFAULT_BUBBLE_PROBES: usize = 10;

/// Solves the cell problem for one unit strain.
pub fn solve_cell_problem(mesh: &PeriodicMesh, material: &MaterialSpec, index: StrainIndex) -> Result<CellSolution> {
    let cell = CellProblem::new(mesh, material)?;
    let basis = cell.kernel_basis(DEFAULT_BUBBLE_PROBES, 0x0ce11)?;
    cell.solve(index, &basis, &CgOptions { jacobi: true, ..Default::default() })
}

/// Runs the three cell problems (in parallel) and assembles `Chom`.
pub fn homogenize(cell: &CellProblem, opts: &CgOptions, seed: u64) -> Result<HomogenizationResult> {
    let kernel = cell.kernel_basis(DEFAULT_BUBBLE_PROBES, seed)?;
    let kernel_annihilation = cell.kernel_annihilation(&kernel);
    let solutions: Vec<CellSolution> = StrainIndex::ALL
        .par_iter()
        .map(|&i| cell.solve(i, &kernel, opts))
        .collect::<Result<_>>()?;
    let correctors = [solutions[0].corrector.clone(), solutions[1].corrector.clone(), solutions[2].corrector.clone()];
    let chom = cell.tensor_from(&correctors);
    Ok(HomogenizationResult { chom, solutions, kernel, kernel_annihilation })
}

pub fn compute_effective_tensor(mesh: &PeriodicMesh, material: &MaterialSpec) -> Result<EffectiveTensor> {
    let cell = CellProblem::new(mesh, material)?;
    Ok(homogenize(&cell, &CgOptions { jacobi: true, ..Default::default() }, 0x0ce11)?.chom)
}

/// Effective tensor of the cell with the inclusion replaced by a hole
/// (traction-free on the interface).
pub fn compute_perforated_tensor(mesh: &PeriodicMesh, material: &MaterialSpec) -> Result<EffectiveTensor> {
    material.validate()?;
    let space = FeSpace::new(mesh, mesh.element_order);
    let tensor = |p: Phase| match p {
        Phase::Matrix => material.matrix_tensor,
        Phase::Inclusion => ElasticityTensor4::zero(),
    };
    let k = assemble_stiffness(&space, |p| Ok(tensor(p)))?;
    let sys = constrain(&SparseSystem::unconstrained(k), &space, &[ConstraintKind::Periodic])?;
    // only dofs carried by matrix elements take part
    let active: Vec<usize> = sys.matrix.diagonal().iter().enumerate().filter(|(_, d)| **d > 0.0).map(|(i, _)| i).collect();
    let a = sys.matrix.submatrix(&active, &active);
    let kernel = translation_basis(active.len());
    let diag = a.diagonal();
    let opts = CgOptions { jacobi: true, ..Default::default() };
    let loads: Vec<Vec<f64>> = StrainIndex::ALL
        .iter()
        .map(|i| {
            let full = assemble_strain_load(&space, tensor, &i.strain());
            let r = sys.dof_map.restrict(&full);
            active.iter().map(|&k| r[k]).collect()
        })
        .collect();
    let sols: Vec<Vec<f64>> = loads
        .par_iter()
        .map(|f| cg_solve(&a, f, &opts, Some(&kernel), Some(&diag)).map(|r| r.0))
        .collect::<Result<_>>()?;
    let mean = material.matrix_tensor.to_voigt() * mesh.phase_area(Phase::Matrix);
    let voigt = Matrix3::from_fn(|b, c| mean[(b, c)] - dot(&loads[b], &sols[c]));
    Ok(EffectiveTensor { voigt, provenance: TensorProvenance::ChatPerforated })
}

/// Quadratic-form checks on a pair of tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorChecks {
    pub symmetry: f64,
    pub min_eigenvalue: f64,
    /// Largest violation of `eta.Chat eta <= eta.Chom eta <= eta.(int C1) eta`
    /// over the probes (<= 0 when the sandwich holds).
    pub sandwich_violation: f64,
    pub probes: usize,
}

impl TensorChecks {
    pub fn passed(&self, tol: f64) -> bool {
        self.symmetry <= tol && self.min_eigenvalue > 0.0 && self.sandwich_violation <= tol
    }
}

/// Voigt basis plus `random` random symmetric strains.
pub fn strain_probes(random: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..random {
        let e11 = rng.random::<f64>() * 2.0 - 1.0;
        let e22 = rng.random::<f64>() * 2.0 - 1.0;
        let e12 = rng.random::<f64>() * 2.0 - 1.0;
        out.push([e11, e22, 2.0 * e12]);
    }
    out
}

pub fn check_tensors(chom: &EffectiveTensor, chat: &EffectiveTensor, mean: &Matrix3<f64>, probes: &[[f64; 3]]) -> TensorChecks {
    let upper = EffectiveTensor { voigt: *mean, provenance: TensorProvenance::Chom };
    let mut worst = f64::NEG_INFINITY;
    for p in probes {
        let lo = chat.energy(p);
        let mid = chom.energy(p);
        let hi = upper.energy(p);
        worst = worst.max(lo - mid).max(mid - hi);
    }
    TensorChecks {
        symmetry: chom.symmetry_defect() / chom.voigt.amax().max(f64::MIN_POSITIVE),
        min_eigenvalue: chom.min_eigenvalue(),
        sandwich_violation: worst,
        probes: probes.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_cell_mesh, CellGeometry};

    fn cell(r: f64, res: usize) -> CellProblem {
        let mesh = build_cell_mesh(&CellGeometry::disk(r, res)).unwrap();
        CellProblem::new(&mesh, &MaterialSpec::default()).unwrap()
    }

    #[test]
    fn homogeneous_cell_has_zero_correctors() {
        let c = cell(0.0, 8);
        let h = homogenize(&c, &CgOptions { jacobi: true, ..Default::default() }, 1).unwrap();
        for s in &h.solutions {
            assert!(norm2(&s.corrector) <= 1e-12);
        }
        let want = Matrix3::new(3.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0);
        assert!((h.chom.voigt - want).amax() < 1e-12);
    }

    #[test]
    fn kernel_probes_are_annihilated() {
        let c = cell(0.25, 16);
        let b = c.kernel_basis(5, 3).unwrap();
        assert_eq!(b.bubble_samples.len(), 5);
        assert!(c.kernel_annihilation(&b) <= 1e-10, "{}", c.kernel_annihilation(&b));
    }

    #[test]
    fn inclusion_lowers_energy_and_respects_bounds() {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.25, 16)).unwrap();
        let c = CellProblem::new(&mesh, &MaterialSpec::default()).unwrap();
        let h = homogenize(&c, &CgOptions { jacobi: true, ..Default::default() }, 1).unwrap();
        let mean = c.mean_tensor();
        assert!(h.chom.voigt[(0, 0)] < mean[(0, 0)]);
        assert!(norm2(&h.solutions[0].corrector) > 1e-3);
        let chat = compute_perforated_tensor(&mesh, &MaterialSpec::default()).unwrap();
        let checks = check_tensors(&h.chom, &chat, &mean, &strain_probes(20, 9));
        assert!(checks.passed(1e-8), "{checks:?}");
    }

    #[test]
    fn strain_index_symmetry() {
        assert_eq!(StrainIndex::parse("12"), StrainIndex::parse("21"));
        assert_eq!(StrainIndex::E12.strain(), [[0.0, 0.5], [0.5, 0.0]]);
    }
}
