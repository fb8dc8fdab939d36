//! The coupled two-scale limit: macro elasticity with the effective tensor
//! and the micro Stokes problem on the inclusion, their resolvent and the
//! spectrum of the limit operator.

use crate::assembly::{
    assemble_load_at_points, assemble_scalar_mass, assemble_stiffness, assemble_vector_mass, eval_field,
    quadrature_points, DofMap, MaterialSpec,
};
use crate::cell::{homogenize, CellProblem, EffectiveTensor};
use crate::error::{Error, Result};
use crate::forcing::{TwoScaleForcing, CELL_MEAN_POINTS};
use crate::mesh::{ElementOrder, PeriodicMesh};
use crate::quadrature::six_point;
use crate::solvers::{eig_generalized, eigs_in_interval, CgOptions, EigOptions, SparseLdl};
use crate::space::FeSpace;
use crate::sparse::{dot, norm2, CsrMatrix, LinearOperator, TripletBuilder};
use crate::stokes::{StokesProblem, StokesSpectrum};
use crate::tensor::ElasticityTensor4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumLabel {
    Macro,
    Micro,
    Fine,
}

impl fmt::Display for SpectrumLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectrumLabel::Macro => "macro",
            SpectrumLabel::Micro => "micro",
            SpectrumLabel::Fine => "fine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub value: f64,
    /// One label per source; merged duplicates carry several.
    pub labels: Vec<SpectrumLabel>,
}

/// Sorted eigenvalues in `[0, window]` with their sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSet {
    pub points: Vec<SpectrumPoint>,
    pub window: f64,
}

/// Relative gap below which a macro and a micro value are merged.
pub const MERGE_TOL: f64 = 1e-9;

impl SpectrumSet {
    /// Values of one source, truncated to the window.
    pub fn from_values(values: &[f64], label: SpectrumLabel, window: f64) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|&x| (0.0..=window).contains(&x)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self { points: v.into_iter().map(|value| SpectrumPoint { value, labels: vec![label] }).collect(), window }
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, label: SpectrumLabel) -> usize {
        self.points.iter().filter(|p| p.labels.contains(&label)).count()
    }

    /// Multiset union truncated to `window`. A value of `other` within
    /// [`MERGE_TOL`] (relative) of a value of `self` from a different source
    /// is merged into it and keeps both labels.
    pub fn union(&self, other: &SpectrumSet, window: f64) -> SpectrumSet {
        let mut points: Vec<SpectrumPoint> =
            self.points.iter().filter(|p| p.value <= window).cloned().collect();
        let mut used = vec![false; points.len()];
        for q in other.points.iter().filter(|p| p.value <= window) {
            let hit = points.iter().enumerate().position(|(i, p)| {
                !used[i]
                    && (p.value - q.value).abs() <= MERGE_TOL * p.value.abs().max(q.value.abs())
                    && q.labels.iter().all(|l| !p.labels.contains(l))
            });
            match hit {
                Some(i) => {
                    used[i] = true;
                    points[i].labels.extend(q.labels.iter().copied());
                    points[i].labels.sort();
                }
                None => {
                    points.push(q.clone());
                    used.push(false);
                }
            }
        }
        points.sort_by(|a, b| a.value.partial_cmp(&b.value).unwrap());
        SpectrumSet { points, window }
    }

    /// `value,label` lines; merged points get one line per label.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,label\n");
        for p in &self.points {
            for l in &p.labels {
                s.push_str(&format!("{:.16e},{}\n", p.value, l));
            }
        }
        s
    }
}

/// Dirichlet elasticity on the macro domain with a constant tensor.
pub struct MacroProblem {
    pub space: FeSpace,
    pub dof_map: DofMap,
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
}

impl MacroProblem {
    pub fn new(mesh: &PeriodicMesh, tensor: &ElasticityTensor4) -> Result<Self> {
        if tensor.coercivity() <= 0.0 {
            return Err(Error::InvalidValue { key: "chom".into(), msg: "not positive definite".into() });
        }
        let space = FeSpace::new(mesh, ElementOrder::P2);
        if !space.has_dirichlet() {
            return Err(Error::EmptyBoundary);
        }
        let dof_map = DofMap::for_space(&space, false, true);
        let stiffness = dof_map.reduce_matrix(&assemble_stiffness(&space, |_| Ok(*tensor))?);
        let mass = dof_map.reduce_matrix(&assemble_vector_mass(&space, None));
        Ok(Self { space, dof_map, stiffness, mass })
    }

    pub fn n_dofs(&self) -> usize {
        self.stiffness.nrows()
    }

    /// The `k` lowest eigenpairs, vectors in the reduced layout.
    pub fn eigenpairs(&self, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let k = k.min(self.n_dofs());
        let r = eig_generalized(&self.stiffness, &self.mass, k, 0.0, None, &EigOptions::default())?;
        Ok((r.values, r.vectors))
    }

    /// Every eigenvalue in `[0, window]`.
    pub fn eigenvalues_below(&self, window: f64) -> Result<Vec<f64>> {
        Ok(eigs_in_interval(&self.stiffness, &self.mass, 0.0, window, 24, &EigOptions::default())?.values)
    }
}

/// Macro eigenvalues `-div(Chom e(u)) = lambda u` with Dirichlet walls.
pub fn macro_eigenpairs(mesh: &PeriodicMesh, chom: &EffectiveTensor, k: usize) -> Result<(SpectrumSet, Vec<Vec<f64>>)> {
    let p = MacroProblem::new(&mesh.clone().with_order(ElementOrder::P2), &chom.tensor())?;
    let (values, vectors) = p.eigenpairs(k)?;
    Ok((SpectrumSet::from_values(&values, SpectrumLabel::Macro, f64::INFINITY), vectors))
}

/// Limit spectrum with its two fragments.
#[derive(Debug, Clone)]
pub struct LimitSpectrum {
    pub set: SpectrumSet,
    pub chom: EffectiveTensor,
    pub macro_values: Vec<f64>,
    pub micro_values: Vec<f64>,
    /// `|<v_m>|` of every micro mode in the window.
    pub micro_mean_norms: Vec<f64>,
}

/// Stokes eigenvalues up to `window`, growing `k` until the window is
/// passed.
pub fn stokes_eigenvalues_below(problem: &StokesProblem, window: f64) -> Result<StokesSpectrum> {
    let mut k = 4;
    loop {
        let s = problem.eigenpairs(k, &EigOptions::default())?;
        if s.values.last().is_some_and(|&v| v > window) || k >= problem.n_velocity() {
            return Ok(s);
        }
        k *= 2;
    }
}

/// Union of the macro spectrum (with `Chom` from the cell mesh) and the
/// Stokes spectrum of the inclusion, truncated to `[0, window]`.
pub fn limit_spectrum(
    macro_mesh: &PeriodicMesh,
    cell_mesh: &PeriodicMesh,
    material: &MaterialSpec,
    window: f64,
) -> Result<LimitSpectrum> {
    let cell = CellProblem::new(cell_mesh, material)?;
    let chom = homogenize(&cell, &CgOptions { jacobi: true, ..Default::default() }, 0x0ce11)?.chom;
    let stokes = StokesProblem::from_cell_mesh(cell_mesh, material)?;
    limit_spectrum_with(macro_mesh, &chom, &stokes, window)
}

/// As [`limit_spectrum`] with a precomputed tensor and Stokes problem.
pub fn limit_spectrum_with(
    macro_mesh: &PeriodicMesh,
    chom: &EffectiveTensor,
    stokes: &StokesProblem,
    window: f64,
) -> Result<LimitSpectrum> {
    let mp = MacroProblem::new(&macro_mesh.clone().with_order(ElementOrder::P2), &chom.tensor())?;
    let macro_values = mp.eigenvalues_below(window)?;
    let micro = stokes_eigenvalues_below(stokes, window)?;
    let mut micro_values = Vec::new();
    let mut micro_mean_norms = Vec::new();
    for (v, n) in micro.values.iter().zip(micro.mean_norms()) {
        if *v <= window {
            micro_values.push(*v);
            micro_mean_norms.push(n);
        }
    }
    let set = SpectrumSet::from_values(&macro_values, SpectrumLabel::Macro, window)
        .union(&SpectrumSet::from_values(&micro_values, SpectrumLabel::Micro, window), window);
    Ok(LimitSpectrum { set, chom: *chom, macro_values, micro_values, micro_mean_norms })
}

/// Solution `u(x) + v(x, y)` of the limit resolvent problem.
///
/// The micro part at macro quadrature point `q` is
/// `v_q = sum_k coeffs[q][k] * basis[k]`, where `basis` are micro resolvent
/// responses to an orthonormal basis of the micro loads met at all points.
#[derive(Debug, Clone)]
pub struct TwoScaleField {
    pub macro_space: FeSpace,
    /// Full-layout P2 macro displacement.
    pub u: Vec<f64>,
    /// Macro quadrature points and weights, `6 * element + point`.
    pub points: Vec<([f64; 2], f64)>,
    /// Reduced micro velocity responses.
    pub basis: Vec<Vec<f64>>,
    /// Micro pressures of the responses.
    pub basis_pressures: Vec<Vec<f64>>,
    pub coeffs: Vec<Vec<f64>>,
    /// `<basis_k>` over the cell.
    pub basis_means: Vec<[f64; 2]>,
    /// L2(Q2) Gram matrix of the responses.
    pub gram: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl TwoScaleField {
    pub fn micro_mean(&self, q: usize) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (c, bm) in self.coeffs[q].iter().zip(&self.basis_means) {
            m[0] += c * bm[0];
            m[1] += c * bm[1];
        }
        m
    }

    /// `int_Q2 |v_q|^2`.
    pub fn micro_norm2(&self, q: usize) -> f64 {
        let c = &self.coeffs[q];
        let mut s = 0.0;
        for i in 0..c.len() {
            for j in 0..c.len() {
                s += c[i] * self.gram[i][j] * c[j];
            }
        }
        s.max(0.0)
    }

    /// Reduced micro velocity at point `q`.
    pub fn micro_velocity(&self, q: usize) -> Vec<f64> {
        let n = self.basis.first().map_or(0, |b| b.len());
        let mut v = vec![0.0; n];
        for (c, b) in self.coeffs[q].iter().zip(&self.basis) {
            crate::sparse::axpy(*c, b, &mut v);
        }
        v
    }

    pub fn macro_value(&self, q: usize) -> [f64; 2] {
        let quad = six_point();
        eval_field(&self.macro_space, &self.u, q / 6, &quad[q % 6].bary).0
    }

    /// `||u||^2_{L2(Omega)}`.
    pub fn macro_norm2(&self) -> f64 {
        (0..self.points.len())
            .map(|q| {
                let u = self.macro_value(q);
                self.points[q].1 * (u[0] * u[0] + u[1] * u[1])
            })
            .sum()
    }

    /// `||u + v||^2_{L2(Omega x Q)}`.
    pub fn two_scale_norm2(&self) -> f64 {
        (0..self.points.len())
            .map(|q| {
                let u = self.macro_value(q);
                let m = self.micro_mean(q);
                self.points[q].1
                    * (u[0] * u[0] + u[1] * u[1] + 2.0 * (u[0] * m[0] + u[1] * m[1]) + self.micro_norm2(q))
            })
            .sum()
    }

    /// `max_q ||v_q||_{L2(Q2)}`.
    pub fn max_micro_norm(&self) -> f64 {
        (0..self.points.len()).map(|q| self.micro_norm2(q).sqrt()).fold(0.0, f64::max)
    }
}

/// Largest rank of the micro load family before giving up.
pub const MAX_MICRO_RANK: usize = 64;

/// Streaming Gram-Schmidt: coefficients of `v` against `basis`, extending
/// the basis when the remainder is not negligible.
fn absorb(basis: &mut Vec<Vec<f64>>, v: &[f64]) -> Result<Vec<f64>> {
    let nv = norm2(v);
    let mut r = v.to_vec();
    let mut c = vec![0.0; basis.len()];
    if nv == 0.0 {
        return Ok(c);
    }
    for _ in 0..2 {
        for (k, b) in basis.iter().enumerate() {
            let d = dot(&r, b);
            c[k] += d;
            crate::sparse::axpy(-d, b, &mut r);
        }
    }
    let nr = norm2(&r);
    if nr > 1e-11 * nv {
        if basis.len() >= MAX_MICRO_RANK {
            return Err(Error::IncompatibleInputs(format!(
                "micro forcing spans more than {MAX_MICRO_RANK} independent cell loads"
            )));
        }
        r.iter_mut().for_each(|x| *x /= nr);
        basis.push(r);
        c.push(nr);
    }
    Ok(c)
}

/// Assembled pieces of the limit resolvent, reusable across forcings.
pub struct LimitSolver<'a> {
    pub macro_problem: MacroProblem,
    pub stokes: &'a StokesProblem,
    pub chom: EffectiveTensor,
    pub alpha: f64,
}

impl<'a> LimitSolver<'a> {
    pub fn new(macro_mesh: &PeriodicMesh, chom: &EffectiveTensor, stokes: &'a StokesProblem, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidValue { key: "alpha".into(), msg: "the limit resolvent needs alpha > 0".into() });
        }
        let macro_problem = MacroProblem::new(&macro_mesh.clone().with_order(ElementOrder::P2), &chom.tensor())?;
        Ok(Self { macro_problem, stokes, chom: *chom, alpha })
    }

    /// Solves the coupled limit problem:
    /// micro loads are compressed to a basis, each basis load gets one micro
    /// resolvent solve, and the affine dependence of `<v>` on `u` is folded
    /// into the macro operator.
    pub fn solve(&self, f: &TwoScaleForcing) -> Result<TwoScaleField> {
        let alpha = self.alpha;
        let mp = &self.macro_problem;
        let space = &mp.space;
        let points = quadrature_points(space);
        let means: Vec<[f64; 2]> = points.par_iter().map(|(x, _)| f.cell_mean(*x, CELL_MEAN_POINTS)).collect();

        // micro loads: unit forces first (the coupling to u), then f(x, .)
        let [l1, l2] = self.stokes.unit_loads();
        let mut load_basis: Vec<Vec<f64>> = Vec::new();
        let c1 = absorb(&mut load_basis, &l1)?;
        let c2 = absorb(&mut load_basis, &l2)?;
        let mut fcoef: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        if f.is_macroscopic() {
            // f(x, .) is a constant force: combination of the unit loads
            for &(x, _) in &points {
                let v = f.eval(x, [0.5, 0.5]);
                let mut c = vec![0.0; load_basis.len()];
                for k in 0..c1.len() {
                    c[k] += v[0] * c1[k];
                }
                for k in 0..c2.len() {
                    c[k] += v[1] * c2[k];
                }
                fcoef.push(c);
            }
        } else {
            let loads: Vec<Vec<f64>> =
                points.par_iter().map(|&(x, _)| self.stokes.load(|y| f.eval(x, y))).collect();
            for l in &loads {
                fcoef.push(absorb(&mut load_basis, l)?);
            }
        }
        let rank = load_basis.len();
        let resolvent = self.stokes.resolvent(alpha)?;
        let responses: Vec<_> =
            load_basis.par_iter().map(|b| resolvent.solve(b, [0.0, 0.0])).collect::<Result<_>>()?;
        let basis: Vec<Vec<f64>> = responses.iter().map(|r| self.stokes.dof_map.sample(&r.velocity)).collect();
        let basis_pressures: Vec<Vec<f64>> = responses.iter().map(|r| r.pressure.clone()).collect();
        let basis_means: Vec<[f64; 2]> = responses.iter().map(|r| r.cell_mean).collect();
        let mv: Vec<Vec<f64>> = basis.iter().map(|b| self.stokes.m.apply_alloc(b)).collect();
        let gram: Vec<Vec<f64>> = (0..rank).map(|i| (0..rank).map(|j| dot(&basis[i], &mv[j])).collect()).collect();
        let pad = |c: &[f64]| {
            let mut v = c.to_vec();
            v.resize(rank, 0.0);
            v
        };
        let c1 = pad(&c1);
        let c2 = pad(&c2);
        let mean_of = |c: &[f64]| -> [f64; 2] {
            let mut m = [0.0; 2];
            for (ck, bm) in c.iter().zip(&basis_means) {
                m[0] += ck * bm[0];
                m[1] += ck * bm[1];
            }
            m
        };
        // <v> = <S f> - alpha * Gamma u, Gamma[:, i] = <S e_i>
        let g1 = mean_of(&c1);
        let g2 = mean_of(&c2);
        let gamma = [[g1[0], g2[0]], [g1[1], g2[1]]];

        // macro operator K + alpha M - alpha^2 (scalar mass (x) Gamma)
        let smass = mp.dof_map.reduce_matrix(&{
            let s = assemble_scalar_mass(space, None);
            let n = space.n_vector_dofs();
            let mut tb = TripletBuilder::with_capacity(n, n, 4 * s.nnz());
            for i in 0..s.nrows() {
                for (j, v) in s.row(i) {
                    for c in 0..2 {
                        for d in 0..2 {
                            tb.push(2 * i + c, 2 * j + d, v * gamma[c][d]);
                        }
                    }
                }
            }
            tb.build()
        });
        let op = mp.stiffness.add_scaled(&mp.mass, alpha).add_scaled(&smass, -alpha * alpha);
        let fac = SparseLdl::new(&op)?;
        if fac.inertia().0 > 0 {
            return Err(Error::CouplingSingular);
        }
        let fcoef: Vec<Vec<f64>> = fcoef.iter().map(|c| pad(c)).collect();
        let rhs_vals: Vec<[f64; 2]> = (0..points.len())
            .map(|q| {
                let m = mean_of(&fcoef[q]);
                [means[q][0] - alpha * m[0], means[q][1] - alpha * m[1]]
            })
            .collect();
        let rhs = mp.dof_map.restrict(&assemble_load_at_points(space, &rhs_vals));
        let u_red = fac.solve(&rhs);
        let u = mp.dof_map.expand(&u_red);
        // micro coefficients: f part minus alpha * u(x_q) along the unit loads
        let quad = six_point();
        let coeffs: Vec<Vec<f64>> = (0..points.len())
            .map(|q| {
                let ux = eval_field(space, &u, q / 6, &quad[q % 6].bary).0;
                (0..rank).map(|k| fcoef[q][k] - alpha * (ux[0] * c1[k] + ux[1] * c2[k])).collect()
            })
            .collect();
        Ok(TwoScaleField {
            macro_space: space.clone(),
            u,
            points,
            basis,
            basis_pressures,
            coeffs,
            basis_means,
            gram,
            alpha,
        })
    }

    /// Two-scale inner product `int_Omega int_Q (u + v) . g`.
    pub fn pairing(&self, field: &TwoScaleField, g: &TwoScaleForcing) -> f64 {
        let mut s = 0.0;
        for q in 0..field.points.len() {
            let (x, w) = field.points[q];
            let u = field.macro_value(q);
            let gm = g.cell_mean(x, CELL_MEAN_POINTS);
            let gl = self.stokes.load(|y| g.eval(x, y));
            s += w * (u[0] * gm[0] + u[1] * gm[1] + dot(&field.micro_velocity(q), &gl));
        }
        s
    }
}

/// Convenience wrapper computing `Chom` and the Stokes problem from the cell
/// mesh first.
pub fn solve_limit_resolvent(
    macro_mesh: &PeriodicMesh,
    cell_mesh: &PeriodicMesh,
    material: &MaterialSpec,
    f: &TwoScaleForcing,
    alpha: f64,
) -> Result<TwoScaleField> {
    let cell = CellProblem::new(cell_mesh, material)?;
    let chom = homogenize(&cell, &CgOptions { jacobi: true, ..Default::default() }, 0x0ce11)?.chom;
    let stokes = StokesProblem::from_cell_mesh(cell_mesh, material)?;
    LimitSolver::new(macro_mesh, &chom, &stokes, alpha)?.solve(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::TensorProvenance;
    use crate::mesh::{build_macro_mesh, Rect};
    use nalgebra::Matrix3;

    fn iso() -> EffectiveTensor {
        EffectiveTensor {
            voigt: Matrix3::new(3.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0),
            provenance: TensorProvenance::Chom,
        }
    }

    #[test]
    fn union_merges_close_values() {
        let a = SpectrumSet::from_values(&[1.0, 2.0, 5.0], SpectrumLabel::Macro, 10.0);
        let b = SpectrumSet::from_values(&[2.0 + 1e-12, 3.0], SpectrumLabel::Micro, 10.0);
        let u = a.union(&b, 4.0);
        assert_eq!(u.values().len(), 3);
        assert_eq!(u.points[1].labels, vec![SpectrumLabel::Macro, SpectrumLabel::Micro]);
        assert!(a.union(&b, 0.5).is_empty());
    }

    #[test]
    fn macro_eigenvalues_scale_with_the_tensor() {
        let mesh = build_macro_mesh(&Rect::unit(), 4).unwrap();
        let (a, _) = macro_eigenpairs(&mesh, &iso(), 4).unwrap();
        let scaled = EffectiveTensor { voigt: iso().voigt * 2.5, ..iso() };
        let (b, _) = macro_eigenpairs(&mesh, &scaled, 4).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((2.5 * x - y).abs() <= 1e-9 * y);
        }
    }

    #[test]
    fn longer_domain_lowers_the_first_eigenvalue() {
        let sq = build_macro_mesh(&Rect::unit(), 4).unwrap();
        let long = build_macro_mesh(&Rect::new(0.0, 0.0, 2.0, 1.0), 4).unwrap();
        let (a, _) = macro_eigenpairs(&sq, &iso(), 1).unwrap();
        let (b, _) = macro_eigenpairs(&long, &iso(), 1).unwrap();
        assert!(b.values()[0] < a.values()[0]);
    }

    #[test]
    fn absorb_detects_rank() {
        let mut basis = vec![];
        absorb(&mut basis, &[1.0, 0.0, 0.0]).unwrap();
        let c = absorb(&mut basis, &[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(basis.len(), 1);
        assert!((c[0] - 2.0).abs() < 1e-15);
        absorb(&mut basis, &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(basis.len(), 2);
    }
}
