//! Direct simulation of the fine-scale composite: the resolvent problem and
//! low spectrum at a given `eps`, and their distance to the limit objects.

use crate::assembly::{
    assemble_degenerate, assemble_load, assemble_scaled, assemble_stiffness, assemble_vector_mass, eval_field, quadrature_points, DofMap, MaterialSpec,
};
use crate::error::{Error, Result};
use crate::forcing::TwoScaleForcing;
use crate::limit::{SpectrumLabel, SpectrumSet, TwoScaleField};
use crate::report::{Artifact, Cell, ScatterPlot, Table};
use crate::mesh::{build_fine_mesh, cells_per_unit, InclusionShape, Phase, PeriodicMesh, PointLocator, Rect};
use crate::solvers::{eig_generalized, eigs_in_interval, EigOptions, SolveReport, SparseLdl};
use crate::space::FeSpace;
use crate::sparse::{dot, norm2, CsrMatrix, LinearOperator};
use crate::tensor::ElasticityTensor4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How the inclusion shear enters the fine problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    /// `C1 + eps^2 C0`: the high-contrast scaling. The inclusion bulk term
    /// uses the projected form, so it stays locking-free as `eps -> 0`.
    #[default]
    Scaled,
    /// `C1 + C0` by plain quadrature: an ordinary composite, for comparison.
    Unscaled,
}

/// Discretized fine-scale problem with Dirichlet walls.
pub struct FineProblem {
    pub epsilon: f64,
    pub domain: Rect,
    pub mesh: PeriodicMesh,
    pub space: FeSpace,
    pub dof_map: DofMap,
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
    /// Reduced degenerate form `C1` alone.
    pub degenerate: CsrMatrix,
    pub material: MaterialSpec,
    pub contrast: Contrast,
}

/// `a(u,u) + alpha |u|^2 = (f, u)` terms of a computed solution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyIdentity {
    pub stiffness_energy: f64,
    pub mass_energy: f64,
    pub work: f64,
    /// `|a(u,u) + alpha |u|^2 - (f,u)| / |(f,u)|`.
    pub defect: f64,
}

/// Norms entering the a priori bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AprioriNorms {
    pub u_l2: f64,
    /// `eps ||grad u||`.
    pub eps_grad: f64,
    /// `||C1^{1/2} e(u)||`.
    pub degenerate_energy: f64,
    pub f_l2: f64,
}

/// One fine-scale resolvent solve.
#[derive(Debug, Clone)]
pub struct EpsRun {
    pub epsilon: f64,
    pub n_dofs: usize,
    /// Full-layout P2 displacement.
    pub u: Vec<f64>,
    pub energy: EnergyIdentity,
    pub norms: AprioriNorms,
    pub report: SolveReport,
    pub eigs: Option<SpectrumSet>,
}

impl FineProblem {
    pub fn new(
        domain: &Rect,
        eps: f64,
        cells_res: usize,
        inclusion: &InclusionShape,
        material: &MaterialSpec,
        contrast: Contrast,
    ) -> Result<Self> {
        let mesh = build_fine_mesh(domain, eps, cells_res, inclusion)?;
        Self::from_mesh(mesh, *domain, eps, material, contrast)
    }

    pub fn from_mesh(
        mesh: PeriodicMesh,
        domain: Rect,
        eps: f64,
        material: &MaterialSpec,
        contrast: Contrast,
    ) -> Result<Self> {
        material.validate()?;
        let eps = 1.0 / cells_per_unit(eps)? as f64;
        let space = FeSpace::new(&mesh, mesh.element_order);
        if !space.has_dirichlet() {
            return Err(Error::EmptyBoundary);
        }
        let dof_map = DofMap::for_space(&space, false, true);
        let full = match contrast {
            Contrast::Scaled => assemble_scaled(&space, material, eps * eps)?,
            Contrast::Unscaled => assemble_stiffness(&space, |p| Ok(unscaled_tensor(material, p)))?,
        };
        let stiffness = dof_map.reduce_matrix(&full);
        let degenerate = dof_map.reduce_matrix(&assemble_degenerate(&space, material)?);
        let mass = dof_map.reduce_matrix(&assemble_vector_mass(&space, None));
        Ok(Self {
            epsilon: eps,
            domain,
            mesh,
            space,
            dof_map,
            stiffness,
            mass,
            degenerate,
            material: *material,
            contrast,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.stiffness.nrows()
    }

    /// Full-layout load of `f(x, x/eps)`, cells anchored at the domain corner.
    pub fn load(&self, f: &TwoScaleForcing) -> Vec<f64> {
        let origin = [self.domain.x0, self.domain.y0];
        let eps = self.epsilon;
        assemble_load(&self.space, |x, _| f.fine(x, eps, origin))
    }

    /// `(K + alpha M) u = F` by sparse factorization with iterative
    /// refinement to a relative residual of `1e-10`.
    pub fn solve_resolvent(&self, f: &TwoScaleForcing, alpha: f64) -> Result<EpsRun> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidValue { key: "alpha".into(), msg: "must be >= 0".into() });
        }
        let rhs = self.dof_map.restrict(&self.load(f));
        let op = self.stiffness.add_scaled(&self.mass, alpha);
        let (u_red, report) = solve_refined(&op, &rhs, 1e-10)?;
        let ku = self.stiffness.apply_alloc(&u_red);
        let mu = self.mass.apply_alloc(&u_red);
        let stiffness_energy = dot(&u_red, &ku);
        let mass_energy = alpha * dot(&u_red, &mu);
        let work = dot(&rhs, &u_red);
        let defect = if work == 0.0 {
            (stiffness_energy + mass_energy).abs()
        } else {
            (stiffness_energy + mass_energy - work).abs() / work.abs()
        };
        let u = self.dof_map.expand(&u_red);
        let norms = self.apriori_norms(&u, f);
        Ok(EpsRun {
            epsilon: self.epsilon,
            n_dofs: self.n_dofs(),
            u,
            energy: EnergyIdentity { stiffness_energy, mass_energy, work, defect },
            norms,
            report,
            eigs: None,
        })
    }

    fn apriori_norms(&self, u: &[f64], f: &TwoScaleForcing) -> AprioriNorms {
        let quad = crate::quadrature::six_point();
        let origin = [self.domain.x0, self.domain.y0];
        let pts = quadrature_points(&self.space);
        let mut n = AprioriNorms::default();
        let (mut ul2, mut grad, mut fl2) = (0.0, 0.0, 0.0);
        for (q, &(x, w)) in pts.iter().enumerate() {
            let e = q / 6;
            let (v, g) = eval_field(&self.space, u, e, &quad[q % 6].bary);
            ul2 += w * (v[0] * v[0] + v[1] * v[1]);
            grad += w * (g[0][0] * g[0][0] + g[0][1] * g[0][1] + g[1][0] * g[1][0] + g[1][1] * g[1][1]);
            let fv = f.fine(x, self.epsilon, origin);
            fl2 += w * (fv[0] * fv[0] + fv[1] * fv[1]);
        }
        n.u_l2 = ul2.sqrt();
        n.eps_grad = self.epsilon * grad.sqrt();
        let ur = self.dof_map.restrict(u);
        n.degenerate_energy = dot(&ur, &self.degenerate.apply_alloc(&ur)).max(0.0).sqrt();
        n.f_l2 = fl2.sqrt();
        n
    }

    /// The `k` smallest eigenvalues of `K u = lambda M u`.
    pub fn eigenvalues(&self, k: usize) -> Result<SpectrumSet> {
        let r = eig_generalized(&self.stiffness, &self.mass, k.min(self.n_dofs()), 0.0, None, &EigOptions::default())?;
        Ok(SpectrumSet::from_values(&r.values, SpectrumLabel::Fine, f64::INFINITY))
    }

    /// Every eigenvalue in `[0, window]`.
    pub fn eigenvalues_below(&self, window: f64) -> Result<SpectrumSet> {
        let r = eigs_in_interval(&self.stiffness, &self.mass, 0.0, window, 48, &EigOptions::default())?;
        Ok(SpectrumSet::from_values(&r.values, SpectrumLabel::Fine, window))
    }

    /// Eigenpair closest to `target` and the share of its `L2` mass carried
    /// by the inclusions.
    pub fn inclusion_mass_fraction_near(&self, target: f64) -> Result<(f64, f64)> {
        // nearest pair to the shift, not the lowest ones above it
        let opts = EigOptions { verify_count: false, ..Default::default() };
        let r = eig_generalized(&self.stiffness, &self.mass, 1, target, None, &opts)?;
        let v = self.dof_map.expand(&r.vectors[0]);
        let inc = crate::assembly::l2_norm(&self.space, &v, Some(Phase::Inclusion));
        let all = crate::assembly::l2_norm(&self.space, &v, None);
        Ok((r.values[0], (inc / all).powi(2)))
    }
}

/// Factor, solve and refine until `||A x - b|| <= tol ||b||`.
fn solve_refined(a: &CsrMatrix, b: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    let mut report = SolveReport::default();
    let bn = norm2(b);
    if bn == 0.0 {
        report.converged = true;
        return Ok((vec![0.0; b.len()], report));
    }
    let fac = SparseLdl::new(a)?;
    let mut x = fac.solve(b);
    for it in 0..5 {
        let ax = a.apply_alloc(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        report.final_residual = norm2(&r) / bn;
        report.iterations = it;
        if report.final_residual <= tol {
            report.converged = true;
            return Ok((x, report));
        }
        let dx = fac.solve(&r);
        crate::sparse::axpy(1.0, &dx, &mut x);
    }
    Err(Error::MaxIterations { iterations: report.iterations, residual: report.final_residual })
}

/// Fine-scale resolvent solve on a freshly built mesh.
pub fn solve_eps_resolvent(
    domain: &Rect,
    eps: f64,
    cells_res: usize,
    inclusion: &InclusionShape,
    material: &MaterialSpec,
    f: &TwoScaleForcing,
    alpha: f64,
) -> Result<EpsRun> {
    FineProblem::new(domain, eps, cells_res, inclusion, material, Contrast::Scaled)?.solve_resolvent(f, alpha)
}

/// The `k` smallest fine-scale eigenvalues.
pub fn eps_eigenvalues(
    domain: &Rect,
    eps: f64,
    cells_res: usize,
    inclusion: &InclusionShape,
    material: &MaterialSpec,
    k: usize,
) -> Result<SpectrumSet> {
    FineProblem::new(domain, eps, cells_res, inclusion, material, Contrast::Scaled)?.eigenvalues(k)
}

/// Distances between a fine solution and the two-scale limit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TwoScaleDistance {
    /// `||u_eps - u||_{L2(Omega)}`.
    pub l2_macro_error: f64,
    /// `| ||u_eps||^2 - ||u + v||^2_{L2(Omega x Q)} |`.
    pub norm_defect: f64,
}

/// Compares a fine run with the limit field solved for the same forcing.
pub fn two_scale_distance(problem: &FineProblem, run: &EpsRun, limit: &TwoScaleField) -> Result<TwoScaleDistance> {
    let macro_mesh = macro_mesh_of(&limit.macro_space);
    let bb = macro_mesh.bounding_box();
    let d = &problem.domain;
    let tol = 1e-9 * (d.width() + d.height());
    if (bb.x0 - d.x0).abs() > tol || (bb.y0 - d.y0).abs() > tol || (bb.x1 - d.x1).abs() > tol || (bb.y1 - d.y1).abs() > tol
    {
        return Err(Error::IncompatibleInputs("fine and limit domains differ".into()));
    }
    if run.u.len() != problem.space.n_vector_dofs() {
        return Err(Error::IncompatibleInputs("run does not belong to this fine problem".into()));
    }
    let locator = PointLocator::new(&macro_mesh);
    let quad = crate::quadrature::six_point();
    let mut err2 = 0.0;
    let mut fine2 = 0.0;
    for (q, &(x, w)) in quadrature_points(&problem.space).iter().enumerate() {
        let (ue, _) = eval_field(&problem.space, &run.u, q / 6, &quad[q % 6].bary);
        let (t, bary) = locator.locate(&macro_mesh, x).ok_or(Error::PointOutsideDomain(x[0], x[1]))?;
        let (u0, _) = eval_field(&limit.macro_space, &limit.u, t, &bary);
        err2 += w * ((ue[0] - u0[0]).powi(2) + (ue[1] - u0[1]).powi(2));
        fine2 += w * (ue[0] * ue[0] + ue[1] * ue[1]);
    }
    Ok(TwoScaleDistance { l2_macro_error: err2.sqrt(), norm_defect: (fine2 - limit.two_scale_norm2()).abs() })
}

/// Vertex mesh of a space, for point location.
fn macro_mesh_of(space: &FeSpace) -> PeriodicMesh {
    use crate::mesh::Triangle;
    PeriodicMesh {
        nodes: space.coords[..space.n_vertices].to_vec(),
        triangles: space
            .elements
            .iter()
            .zip(&space.phases)
            .map(|(e, &phase)| Triangle { vertices: [e[0], e[1], e[2]], phase })
            .collect(),
        periodic_pairs: vec![],
        boundary_nodes: vec![],
        element_order: space.order,
    }
}

/// Fraction of the window excluded near its top edge in the fine-to-limit
/// direction.
pub const GUARD_BAND: f64 = 0.05;

/// Symmetric Hausdorff distance between the two sets on `[0, window]`.
/// Fine points above `(1 - GUARD_BAND) * window` are not required to be
/// close to a limit point: their partners may lie just above the window.
pub fn spectrum_hausdorff(fine: &SpectrumSet, limit: &SpectrumSet, window: f64) -> Result<f64> {
    let fv: Vec<f64> = fine.values().into_iter().filter(|v| (0.0..=window).contains(v)).collect();
    let lv: Vec<f64> = limit.values().into_iter().filter(|v| (0.0..=window).contains(v)).collect();
    if fv.is_empty() || lv.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let dist = |x: f64, set: &[f64]| set.iter().map(|y| (x - y).abs()).fold(f64::INFINITY, f64::min);
    let edge = (1.0 - GUARD_BAND) * window;
    let d_fine = fv.iter().filter(|&&x| x <= edge).map(|&x| dist(x, &lv)).fold(0.0, f64::max);
    let d_limit = lv.iter().map(|&x| dist(x, &fv)).fold(0.0, f64::max);
    Ok(d_fine.max(d_limit))
}

/// Tensor of the classical (unscaled) composite on one phase, for
/// comparison with standard assembly.
pub fn unscaled_tensor(material: &MaterialSpec, phase: Phase) -> ElasticityTensor4 {
    material.degenerate_tensor(phase).add(&material.shear_tensor(phase))
}

/// Inputs of an `eps` sweep. Every run shares material, forcing and the
/// limit objects it is measured against.
#[derive(Clone)]
pub struct SweepSpec<'a> {
    pub domain: Rect,
    /// `1/eps` for each run.
    pub inverse_epsilon: Vec<usize>,
    pub cells_res: usize,
    pub inclusion: InclusionShape,
    pub material: MaterialSpec,
    pub forcing: TwoScaleForcing,
    pub alpha: f64,
    /// Limit field for the same forcing and `alpha`.
    pub limit_field: Option<&'a TwoScaleField>,
    /// Limit spectrum on `[0, window]`; fine spectra are skipped without it.
    pub limit_spectrum: Option<&'a SpectrumSet>,
    pub window: f64,
    /// Eigenvalue tracked by the inclusion mass fraction (usually the
    /// first Stokes eigenvalue).
    pub micro_target: Option<f64>,
    pub workers: usize,
    /// Zero the wall-clock columns so reruns are byte-identical.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "message")]
pub enum RowStatus {
    Ok,
    Failed(String),
}

/// One line of the convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub inverse_epsilon: usize,
    pub status: RowStatus,
    pub n_dofs: usize,
    pub l2_macro_error: Option<f64>,
    pub norm_defect: Option<f64>,
    pub hausdorff: Option<f64>,
    pub smallest_eigenvalue: Option<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue nearest the micro target and its inclusion mass share.
    pub tracked_eigenvalue: Option<f64>,
    pub inclusion_mass_fraction: Option<f64>,
    pub energy_defect: f64,
    pub norms: AprioriNorms,
    pub solve_seconds: f64,
    pub eig_seconds: f64,
}

impl SweepRow {
    fn failed(m: usize, msg: String) -> Self {
        Self {
            epsilon: 1.0 / m as f64,
            inverse_epsilon: m,
            status: RowStatus::Failed(msg),
            n_dofs: 0,
            l2_macro_error: None,
            norm_defect: None,
            hausdorff: None,
            smallest_eigenvalue: None,
            eigenvalues: vec![],
            tracked_eigenvalue: None,
            inclusion_mass_fraction: None,
            energy_defect: 0.0,
            norms: AprioriNorms::default(),
            solve_seconds: 0.0,
            eig_seconds: 0.0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }

    /// `max(||u||, ||eps grad u||, ||C1^{1/2} e(u)||) / ||f||`.
    pub fn apriori_ratio(&self) -> f64 {
        let n = &self.norms;
        if n.f_l2 == 0.0 {
            return 0.0;
        }
        n.u_l2.max(n.eps_grad).max(n.degenerate_energy) / n.f_l2
    }
}

/// Rows in input order plus the sweep-wide checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Bound constant fitted on the coarsest successful run.
    pub apriori_constant: Option<f64>,
    /// Every successful run stays within 10% of that constant.
    pub apriori_respected: bool,
}

/// Tolerance on the fitted a priori constant.
pub const APRIORI_SLACK: f64 = 1.1;

fn sweep_row(spec: &SweepSpec, m: usize) -> Result<SweepRow> {
    let eps = 1.0 / m as f64;
    let t = std::time::Instant::now();
    let problem = FineProblem::new(&spec.domain, eps, spec.cells_res, &spec.inclusion, &spec.material, Contrast::Scaled)?;
    let run = problem.solve_resolvent(&spec.forcing, spec.alpha)?;
    let dist = spec.limit_field.map(|l| two_scale_distance(&problem, &run, l)).transpose()?;
    let solve_seconds = t.elapsed().as_secs_f64();
    let t = std::time::Instant::now();
    let mut row = SweepRow {
        epsilon: eps,
        inverse_epsilon: m,
        status: RowStatus::Ok,
        n_dofs: run.n_dofs,
        l2_macro_error: dist.map(|d| d.l2_macro_error),
        norm_defect: dist.map(|d| d.norm_defect),
        hausdorff: None,
        smallest_eigenvalue: None,
        eigenvalues: vec![],
        tracked_eigenvalue: None,
        inclusion_mass_fraction: None,
        energy_defect: run.energy.defect,
        norms: run.norms,
        solve_seconds,
        eig_seconds: 0.0,
    };
    if let Some(limit) = spec.limit_spectrum {
        let fine = problem.eigenvalues_below(spec.window)?;
        row.hausdorff = Some(spectrum_hausdorff(&fine, limit, spec.window)?);
        row.eigenvalues = fine.values();
        row.smallest_eigenvalue = row.eigenvalues.first().copied();
    } else {
        row.smallest_eigenvalue = problem.eigenvalues(1)?.values().first().copied();
    }
    if let Some(target) = spec.micro_target {
        let (value, share) = problem.inclusion_mass_fraction_near(target)?;
        row.tracked_eigenvalue = Some(value);
        row.inclusion_mass_fraction = Some(share);
    }
    row.eig_seconds = t.elapsed().as_secs_f64();
    if spec.deterministic {
        row.solve_seconds = 0.0;
        row.eig_seconds = 0.0;
    }
    Ok(row)
}

/// Runs the sweep on up to `workers` threads. A failing run becomes a
/// failed row; the others are unaffected.
pub fn sweep_epsilon(spec: &SweepSpec) -> Result<SweepReport> {
    if spec.inverse_epsilon.is_empty() {
        return Err(Error::InvalidValue { key: "epsilon".into(), msg: "empty sweep".into() });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.max(1))
        .build()
        .map_err(|e| Error::InnerSolveFailure(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        spec.inverse_epsilon
            .par_iter()
            .map(|&m| {
                sweep_row(spec, m).unwrap_or_else(|e| {
                    log::warn!("eps = 1/{m} failed: {e}");
                    SweepRow::failed(m, e.to_string())
                })
            })
            .collect()
    });
    let coarsest = rows.iter().filter(|r| r.is_ok()).min_by_key(|r| r.inverse_epsilon);
    let apriori_constant = coarsest.map(SweepRow::apriori_ratio);
    let apriori_respected = apriori_constant
        .is_some_and(|c| rows.iter().filter(|r| r.is_ok()).all(|r| r.apriori_ratio() <= APRIORI_SLACK * c));
    Ok(SweepReport { rows, apriori_constant, apriori_respected })
}

impl SweepReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "epsilon",
            "inverse_epsilon",
            "status",
            "dofs",
            "l2_macro_error",
            "norm_defect",
            "hausdorff",
            "smallest_eigenvalue",
            "inclusion_mass_fraction",
            "energy_defect",
            "apriori_ratio",
            "solve_seconds",
            "eig_seconds",
        ]);
        let opt = |x: Option<f64>| x.map_or(Cell::Text(String::new()), Cell::Num);
        for r in &self.rows {
            t.push(vec![
                r.epsilon.into(),
                r.inverse_epsilon.into(),
                match &r.status {
                    RowStatus::Ok => "ok".into(),
                    RowStatus::Failed(_) => "failed".into(),
                },
                r.n_dofs.into(),
                opt(r.l2_macro_error),
                opt(r.norm_defect),
                opt(r.hausdorff),
                opt(r.smallest_eigenvalue),
                opt(r.inclusion_mass_fraction),
                r.energy_defect.into(),
                r.apriori_ratio().into(),
                r.solve_seconds.into(),
                r.eig_seconds.into(),
            ]);
        }
        t
    }

    /// Fine eigenvalues against `eps`, with the limit values as lines.
    pub fn spectra_plot(&self, limit: &[f64]) -> ScatterPlot {
        ScatterPlot {
            title: "fine spectrum against eps".into(),
            x_label: "eps".into(),
            y_label: "eigenvalue".into(),
            points: self.rows.iter().flat_map(|r| r.eigenvalues.iter().map(move |&v| [r.epsilon, v])).collect(),
            reference_lines: limit.to_vec(),
        }
    }

    /// `sweep.csv`, `run_<m>.json` per row, `spectra.svg` and the summary.
    pub fn artifacts(&self, limit: &[f64]) -> Result<Vec<Artifact>> {
        let mut out = vec![Artifact::Csv { name: "sweep.csv".into(), table: self.table() }];
        for r in &self.rows {
            out.push(Artifact::json(&format!("run_1_{}.json", r.inverse_epsilon), r)?);
        }
        out.push(Artifact::Svg { name: "spectra.svg".into(), plot: self.spectra_plot(limit) });
        out.push(Artifact::json(
            "sweep_summary.json",
            &serde_json::json!({
                "apriori_constant": self.apriori_constant,
                "apriori_respected": self.apriori_respected,
                "limit_spectrum": limit,
            }),
        )?);
        Ok(out)
    }
}
