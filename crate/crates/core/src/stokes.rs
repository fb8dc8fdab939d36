//! The micro problem on the inclusion: a Stokes-type resolvent with
//! Dirichlet walls, its eigenproblem, and the gradient-absorption check.
//!
//! Velocities are P2 and pressures P1 on the inclusion triangles of a cell
//! mesh (Taylor-Hood). The viscous form is the shear part of the inclusion
//! tensor, `int C0 e(v) : e(w)`, which agrees with the vector Laplacian on
//! divergence-free fields vanishing on the wall.
//!
//! Cell means `<v>` are taken over the whole unit cell with `v` extended by
//! zero, not over the inclusion, so they are `|Q2|` times the inclusion
//! average.

use crate::assembly::{
    assemble_divergence, assemble_load, assemble_scalar_mass, assemble_stiffness, assemble_vector_mass,
    integrate_field, l2_norm, DofMap, MaterialSpec,
};
use crate::error::{Error, Result};
use crate::mesh::{ElementOrder, PeriodicMesh, Phase, Point};
use crate::solvers::minres::transpose_apply;
use crate::solvers::{
    eig_generalized, minres_saddle_solve, EigOptions, EigReport, MinresOptions, SaddleConstraint, SolveReport,
    SparseLdl,
};
use crate::space::FeSpace;
use crate::sparse::{dot, norm2, CsrMatrix, LinearOperator};
use serde::Serialize;

/// Velocity and pressure on the inclusion.
#[derive(Debug, Clone)]
pub struct MicroField {
    /// P2 velocity in the full (unconstrained) layout of the inclusion space.
    pub velocity: Vec<f64>,
    /// P1 pressure, mass-weighted mean zero.
    pub pressure: Vec<f64>,
    /// `int_Q2 v` (mean over the unit cell with zero extension).
    pub cell_mean: [f64; 2],
    pub report: SolveReport,
}

/// Assembled Taylor-Hood discretization of the inclusion.
pub struct StokesProblem {
    pub mesh: PeriodicMesh,
    pub vspace: FeSpace,
    pub pspace: FeSpace,
    pub dof_map: DofMap,
    /// Viscous form on free velocity dofs.
    pub a: CsrMatrix,
    /// Vector mass on free velocity dofs.
    pub m: CsrMatrix,
    /// Divergence rows (pressures) by free velocity columns.
    pub b: CsrMatrix,
    pub pressure_mass: CsrMatrix,
    a_factor: SparseLdl,
    pub minres: MinresOptions,
}

/// Factored resolvent `(A + alpha M)` with the saddle-point solve.
pub struct MicroResolvent<'a> {
    problem: &'a StokesProblem,
    pub alpha: f64,
    op: Option<CsrMatrix>,
    fac: Option<SparseLdl>,
}

impl MicroResolvent<'_> {
    pub fn solve(&self, load: &[f64], u_macro: [f64; 2]) -> Result<MicroField> {
        let p = self.problem;
        let mut rhs = load.to_vec();
        if u_macro != [0.0, 0.0] && self.alpha != 0.0 {
            let [l1, l2] = p.unit_loads();
            for i in 0..rhs.len() {
                rhs[i] -= self.alpha * (u_macro[0] * l1[i] + u_macro[1] * l2[i]);
            }
        }
        let zeros = vec![0.0; p.n_pressure()];
        let (op, fac) = match (&self.op, &self.fac) {
            (Some(o), Some(f)) => (o, f),
            _ => (&p.a, &p.a_factor),
        };
        let (v, p_prime, report) = minres_saddle_solve(op, &p.b, &rhs, &zeros, fac, &p.pressure_mass, &p.minres)?;
        // the saddle form carries -int p' div w; the equation's pressure is
        // the opposite sign
        let pressure = p_prime.iter().map(|x| -x).collect();
        Ok(p.field(v, pressure, report))
    }
}

/// Triangles of the inclusion whose three vertices all lie on its wall.
/// Such triangles carry a spurious pressure mode in the Taylor-Hood pair.
pub fn wall_triangles(mesh: &PeriodicMesh) -> usize {
    let mut on_wall = vec![false; mesh.nodes.len()];
    for &b in &mesh.boundary_nodes {
        on_wall[b] = true;
    }
    mesh.triangles.iter().filter(|t| t.vertices.iter().all(|&v| on_wall[v])).count()
}

impl StokesProblem {
    /// Builds the problem on the inclusion triangles of `cell_mesh`.
    pub fn from_cell_mesh(cell_mesh: &PeriodicMesh, material: &MaterialSpec) -> Result<Self> {
        if cell_mesh.count_phase(Phase::Inclusion) == 0 {
            return Err(Error::IncompatibleInputs("the cell has no inclusion".into()));
        }
        let (sub, _) = cell_mesh.phase_submesh(Phase::Inclusion);
        Self::new(sub.with_order(ElementOrder::P2), material)
    }

    /// Builds the problem on a mesh of the inclusion alone, with its
    /// boundary nodes as the wall.
    pub fn new(mesh: PeriodicMesh, material: &MaterialSpec) -> Result<Self> {
        material.validate()?;
        let vspace = FeSpace::new(&mesh, ElementOrder::P2);
        let pspace = FeSpace::new(&mesh, ElementOrder::P1);
        if !vspace.has_dirichlet() {
            return Err(Error::EmptyBoundary);
        }
        let dof_map = DofMap::for_space(&vspace, false, true);
        let shear = material.shear_tensor(Phase::Inclusion);
        let a_full = assemble_stiffness(&vspace, |_| Ok(shear))?;
        let m_full = assemble_vector_mass(&vspace, None);
        let b_full = assemble_divergence(&vspace, &pspace)?;
        let a = dof_map.reduce_matrix(&a_full);
        let m = dof_map.reduce_matrix(&m_full);
        let free: Vec<usize> = (0..dof_map.n_full()).filter(|&d| dof_map.full_to_reduced[d].is_some()).collect();
        // columns of B in reduced numbering
        let mut order = vec![0usize; dof_map.n_reduced];
        for &d in &free {
            order[dof_map.full_to_reduced[d].unwrap()] = d;
        }
        let rows: Vec<usize> = (0..b_full.nrows()).collect();
        let b = b_full.submatrix(&rows, &order);
        let pressure_mass = assemble_scalar_mass(&pspace, None);
        let a_factor = SparseLdl::new(&a)?;
        Ok(Self {
            mesh,
            vspace,
            pspace,
            dof_map,
            a,
            m,
            b,
            pressure_mass,
            a_factor,
            minres: MinresOptions::default(),
        })
    }

    pub fn n_velocity(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_pressure(&self) -> usize {
        self.b.nrows()
    }

    pub fn area(&self) -> f64 {
        self.mesh.total_area()
    }

    /// Reduced load `int f . w` for a force given on the inclusion.
    pub fn load<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(Point) -> [f64; 2] + Sync,
    {
        self.dof_map.restrict(&assemble_load(&self.vspace, |x, _| f(x)))
    }

    /// Factors the velocity block for repeated resolvent solves.
    pub fn resolvent(&self, alpha: f64) -> Result<MicroResolvent<'_>> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidValue { key: "alpha".into(), msg: "must be >= 0".into() });
        }
        let (op, fac) = if alpha == 0.0 {
            (None, None)
        } else {
            let op = self.a.add_scaled(&self.m, alpha);
            let fac = SparseLdl::new(&op)?;
            (Some(op), Some(fac))
        };
        Ok(MicroResolvent { problem: self, alpha, op, fac })
    }

    /// Solves `-div(C0 e(v)) + alpha v + alpha u = f + grad p`, `div v = 0`,
    /// `v = 0` on the wall, for a reduced load vector of `f`.
    pub fn solve_load(&self, load: &[f64], alpha: f64, u_macro: [f64; 2]) -> Result<MicroField> {
        self.resolvent(alpha)?.solve(load, u_macro)
    }

    /// Reduced loads of the unit constant forces `e_1`, `e_2`.
    pub fn unit_loads(&self) -> [Vec<f64>; 2] {
        [self.load(|_| [1.0, 0.0]), self.load(|_| [0.0, 1.0])]
    }

    fn field(&self, v_reduced: Vec<f64>, pressure: Vec<f64>, report: SolveReport) -> MicroField {
        let velocity = self.dof_map.expand(&v_reduced);
        let cell_mean = integrate_field(&self.vspace, &velocity, None);
        MicroField { velocity, pressure, cell_mean, report }
    }

    pub fn velocity_l2(&self, field: &MicroField) -> f64 {
        l2_norm(&self.vspace, &field.velocity, None)
    }

    /// `||B v|| / ||v||` for a full-layout velocity.
    pub fn div_residual(&self, velocity: &[f64]) -> f64 {
        let v = self.dof_map.sample(velocity);
        norm2(&self.b.apply_alloc(&v)) / norm2(&v).max(f64::MIN_POSITIVE)
    }

    /// `(v_f, g)` from reduced loads: the discrete L2 pairing of a solution
    /// with another forcing.
    pub fn pairing(&self, field: &MicroField, other_load: &[f64]) -> f64 {
        dot(&self.dof_map.sample(&field.velocity), other_load)
    }

    /// The `k` lowest eigenvalues of the Stokes operator with their fields.
    pub fn eigenpairs(&self, k: usize, opts: &EigOptions) -> Result<StokesSpectrum> {
        let constraint = SaddleConstraint { b: &self.b, pressure_mass: &self.pressure_mass, minres: self.minres };
        let rep = eig_generalized(&self.a, &self.m, k, 0.0, Some(&constraint), opts)?;
        let mut spec = StokesSpectrum { values: rep.values.clone(), modes: Vec::new(), filtered_count: rep.filtered_count, residuals: rep.residuals.clone(), div_residuals: vec![] };
        for ((v, p), r) in rep.vectors.into_iter().zip(rep.pressures).zip(rep.residuals) {
            let div = norm2(&self.b.apply_alloc(&v)) / norm2(&v);
            spec.div_residuals.push(div);
            let report = SolveReport { converged: true, final_residual: r, ..Default::default() };
            spec.modes.push(self.field(v, p.iter().map(|x| -x).collect(), report));
        }
        Ok(spec)
    }

    /// Eigenvalues from the penalized problem
    /// `(A + B^T W^-1 B / delta) v = mu M v` with `W` the lumped pressure
    /// mass. Independent of the saddle-point eigensolver.
    pub fn penalty_eigenvalues(&self, k: usize, delta: f64) -> Result<EigReport> {
        let w: Vec<f64> = {
            let ones = vec![1.0; self.n_pressure()];
            self.pressure_mass.apply_alloc(&ones)
        };
        let winv_b = {
            let d = CsrMatrix::from_diagonal(&w.iter().map(|x| 1.0 / (delta * x)).collect::<Vec<_>>());
            d.matmul(&self.b)
        };
        let pen = self.b.transpose().matmul(&winv_b);
        let a = self.a.add_scaled(&pen, 1.0);
        let opts = EigOptions { tol: 1e-6, ..Default::default() };
        eig_generalized(&a, &self.m, k, 0.0, None, &opts)
    }

    /// `||A v - mu M v + B^T p'||` relative to `||A v||` for a mode.
    pub fn eigen_residual(&self, mu: f64, field: &MicroField) -> f64 {
        let v = self.dof_map.sample(&field.velocity);
        let av = self.a.apply_alloc(&v);
        let mv = self.m.apply_alloc(&v);
        let p_prime: Vec<f64> = field.pressure.iter().map(|x| -x).collect();
        let btp = transpose_apply(&self.b, &p_prime, v.len());
        let r: Vec<f64> = (0..v.len()).map(|i| av[i] - mu * mv[i] + btp[i]).collect();
        norm2(&r) / norm2(&av)
    }
}

/// Stokes eigenvalues with their fields.
#[derive(Debug, Clone)]
pub struct StokesSpectrum {
    pub values: Vec<f64>,
    pub modes: Vec<MicroField>,
    pub residuals: Vec<f64>,
    /// `||B v|| / ||v||` per mode.
    pub div_residuals: Vec<f64>,
    pub filtered_count: usize,
}

impl StokesSpectrum {
    /// `|<v_m>|` per mode.
    pub fn mean_norms(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.cell_mean[0].hypot(m.cell_mean[1])).collect()
    }

    /// Whether each mode has a cell mean above `tol`.
    pub fn nonzero_mean(&self, tol: f64) -> Vec<bool> {
        self.mean_norms().into_iter().map(|n| n > tol).collect()
    }
}

/// Solves the micro resolvent for an analytic force on the inclusion.
pub fn solve_micro_resolvent<F>(
    problem: &StokesProblem,
    f: F,
    alpha: f64,
    u_macro: [f64; 2],
) -> Result<MicroField>
where
    F: Fn(Point) -> [f64; 2] + Sync,
{
    let load = problem.load(f);
    problem.solve_load(&load, alpha, u_macro)
}

/// Outcome of the irrotational-force probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollapseReport {
    pub v_norm: f64,
    pub passed: bool,
}

/// Threshold on `||v||` below which the micro response counts as absent.
pub const COLLAPSE_TOL: f64 = 1e-6;

/// Solves the Stokes problem (`alpha = 0`) for `f0 + grad f1` and reports
/// the velocity norm. `grad_f1` is the analytic gradient of `f1`.
pub fn irrotational_collapse_check<G>(problem: &StokesProblem, f0: [f64; 2], grad_f1: G) -> Result<CollapseReport>
where
    G: Fn(Point) -> [f64; 2] + Sync,
{
    let field = solve_micro_resolvent(
        problem,
        |y| {
            let g = grad_f1(y);
            [f0[0] + g[0], f0[1] + g[1]]
        },
        0.0,
        [0.0, 0.0],
    )?;
    let v_norm = problem.velocity_l2(&field);
    Ok(CollapseReport { v_norm, passed: v_norm <= COLLAPSE_TOL })
}

/// The `k` lowest Stokes eigenvalues on the inclusion of a cell mesh.
pub fn stokes_eigenpairs(cell_mesh: &PeriodicMesh, material: &MaterialSpec, k: usize) -> Result<StokesSpectrum> {
    let problem = StokesProblem::from_cell_mesh(cell_mesh, material)?;
    problem.eigenpairs(k, &EigOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_cell_mesh, CellGeometry};
    use std::f64::consts::PI;

    fn disk(res: usize) -> StokesProblem {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.25, res)).unwrap();
        StokesProblem::from_cell_mesh(&mesh, &MaterialSpec::default()).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let p = disk(16);
        let f = solve_micro_resolvent(&p, |_| [0.0, 0.0], 0.0, [0.0, 0.0]).unwrap();
        assert!(f.velocity.iter().all(|&x| x == 0.0));
        assert!(f.pressure.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_force_goes_into_pressure() {
        let p = disk(16);
        let c = [1.0, -0.5];
        let f = solve_micro_resolvent(&p, |_| c, 0.0, [0.0, 0.0]).unwrap();
        assert!(p.velocity_l2(&f) < 1e-10);
        // p = -c.y + const
        let exact: Vec<f64> = p.pspace.coords.iter().map(|y| -(c[0] * y[0] + c[1] * y[1])).collect();
        let ones = vec![1.0; exact.len()];
        let mo = p.pressure_mass.apply_alloc(&ones);
        let mean = dot(&exact, &mo) / mo.iter().sum::<f64>();
        let err = f.pressure.iter().zip(&exact).map(|(a, b)| (a - (b - mean)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rotational_force_moves_the_fluid() {
        let p = disk(16);
        let f = solve_micro_resolvent(&p, |y| [-y[1] + 0.5, y[0] - 0.5], 0.0, [0.0, 0.0]).unwrap();
        assert!(p.velocity_l2(&f) > 1e-8);
        assert!(p.div_residual(&f.velocity) < 1e-8);
    }

    #[test]
    fn macro_coupling_is_absorbed() {
        let p = disk(16);
        let f = solve_micro_resolvent(&p, |_| [0.0, 0.0], 2.0, [1.0, 3.0]).unwrap();
        assert!(p.velocity_l2(&f) < 1e-10);
    }

    #[test]
    fn resolvent_is_symmetric() {
        let p = disk(16);
        let lf = p.load(|y| [(3.0 * y[1]).sin(), y[0] * y[0]]);
        let lg = p.load(|y| [y[0] * y[1], (2.0 * y[0]).cos()]);
        let vf = p.solve_load(&lf, 1.0, [0.0, 0.0]).unwrap();
        let vg = p.solve_load(&lg, 1.0, [0.0, 0.0]).unwrap();
        let (a, b) = (p.pairing(&vf, &lg), p.pairing(&vg, &lf));
        assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()));
    }

    #[test]
    fn gradient_force_is_absorbed() {
        let p = disk(16);
        let r = irrotational_collapse_check(&p, [1.0, 0.0], |_| [0.0, 0.0]).unwrap();
        assert!(r.passed && r.v_norm <= 1e-8);
        let g = |y: Point| [2.0 * PI * (2.0 * PI * y[0]).cos() * (2.0 * PI * y[1]).cos(), -2.0 * PI * (2.0 * PI * y[0]).sin() * (2.0 * PI * y[1]).sin()];
        let r = irrotational_collapse_check(&p, [0.0, 0.0], g).unwrap();
        assert!(r.v_norm < 1e-3);
    }
}
