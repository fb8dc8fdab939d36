//! The invariant suite behind `twoscale check` and the acceptance tests.
//!
//! Each check builds its own inputs, runs the production code path and
//! compares against an independent reference. The sweep-based checks share
//! one [`SweepEvidence`] so the fine problems are solved once.

use crate::assembly::MaterialSpec;
use crate::cell::{
    check_tensors, compute_perforated_tensor, homogenize, strain_probes, CellProblem, EffectiveTensor,
    DEFAULT_BUBBLE_PROBES,
};
use crate::error::Result;
use crate::fine::{sweep_epsilon, RowStatus, SweepReport, SweepSpec};
use crate::forcing::TwoScaleForcing;
use crate::limit::{limit_spectrum_with, LimitSolver, LimitSpectrum};
use crate::mesh::{build_cell_mesh, build_macro_mesh, CellGeometry, InclusionShape, Rect};
use crate::solvers::lanczos::dense_generalized_eigen;
use crate::solvers::{cg_solve, eig_generalized, minres, CgOptions, EigOptions, MinresOptions};
use crate::sparse::{CsrMatrix, TripletBuilder};
use crate::stokes::{irrotational_collapse_check, StokesProblem};
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

/// First Stokes eigenvalue of the `r = 0.25` disk, Richardson-extrapolated
/// from P2/P1 resolutions 32, 64 and 128.
pub const STOKES_MU1_REFERENCE: f64 = 234.9181;
/// Second Stokes eigenvalue, same extrapolation.
pub const STOKES_MU2_REFERENCE: f64 = 422.0047;

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn outcome(id: u32, name: &'static str, start: Instant, r: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome { id, name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn default_disk() -> CellGeometry {
    CellGeometry::disk(0.25, 32)
}

fn cg() -> CgOptions {
    CgOptions { jacobi: true, ..Default::default() }
}

/// Homogeneous cell: `Chom` equals the matrix tensor exactly.
pub fn homogeneous_tensor() -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.0, 32))?;
        let cell = CellProblem::new(&mesh, &MaterialSpec::default())?;
        let chom = homogenize(&cell, &cg(), 1)?.chom;
        let exact = Matrix3::new(3.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0);
        let dev = (chom.voigt - exact).abs().max();
        let secs = t.elapsed().as_secs_f64();
        Ok((dev <= 1e-9 && secs < 5.0, format!("max deviation {dev:.2e}, {secs:.2} s of 5")))
    })();
    outcome(1, "homogeneous tensor", t, r)
}

/// Symmetry, definiteness and the perforated/mean sandwich at resolution 32.
pub fn tensor_structure() -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        let mesh = build_cell_mesh(&default_disk())?;
        let mat = MaterialSpec::default();
        let cell = CellProblem::new(&mesh, &mat)?;
        let chom = homogenize(&cell, &cg(), 1)?.chom;
        let chat = compute_perforated_tensor(&mesh, &mat)?;
        let c = check_tensors(&chom, &chat, &cell.mean_tensor(), &strain_probes(20, 0x5a17));
        let secs = t.elapsed().as_secs_f64();
        Ok((
            c.passed(1e-8) && c.symmetry <= 1e-9 && secs < 60.0,
            format!(
                "symmetry {:.1e}, min eigenvalue {:.4}, sandwich violation {:.1e} over {} probes, {secs:.1} s of 60",
                c.symmetry, c.min_eigenvalue, c.sandwich_violation, c.probes
            ),
        ))
    })();
    outcome(2, "tensor structure", t, r)
}

/// Adding kernel fields to the correctors leaves `Chom` unchanged.
pub fn kernel_invariance() -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        let mesh = build_cell_mesh(&default_disk())?;
        let cell = CellProblem::new(&mesh, &MaterialSpec::default())?;
        let h = homogenize(&cell, &cg(), 7)?;
        let mut shifted = h.correctors();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in shifted.iter_mut() {
            let scale = crate::sparse::norm2(n);
            for z in h.kernel.all() {
                let c = scale * (rng.random::<f64>() - 0.5);
                crate::sparse::axpy(c, z, n);
            }
        }
        let moved = cell.tensor_from(&shifted);
        let dev = (moved.voigt - h.chom.voigt).abs().max();
        Ok((dev <= 1e-10, format!("max entry change {dev:.2e}")))
    })();
    outcome(3, "kernel invariance", t, r)
}

/// Solvability monitor on every cell solve.
pub fn solvability_monitor() -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        let mesh = build_cell_mesh(&default_disk())?;
        let cell = CellProblem::new(&mesh, &MaterialSpec::default())?;
        let h = homogenize(&cell, &cg(), 3)?;
        let consistency = h.solutions.iter().map(|s| s.consistency).fold(0.0, f64::max);
        let range = h.solutions.iter().map(|s| s.report.range_defect).fold(0.0, f64::max);
        Ok((
            consistency <= 1e-12 && range <= 1e-9 && h.kernel.bubble_samples.len() == DEFAULT_BUBBLE_PROBES,
            format!(
                "max |<F,z>| {consistency:.1e} over {} probes, range defect {range:.1e}",
                h.kernel.bubble_samples.len() + 2
            ),
        ))
    })();
    outcome(4, "solvability monitor", t, r)
}

/// `f0 + grad_y f1` produces no micro velocity, and less so on finer meshes.
pub fn irrotational_collapse() -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        let grad = |y: [f64; 2]| {
            [2.0 * PI * (2.0 * PI * y[0]).cos() * (2.0 * PI * y[1]).cos(), -2.0 * PI * (2.0 * PI * y[0]).sin() * (2.0 * PI * y[1]).sin()]
        };
        let mut norms = Vec::new();
        for res in [32, 64] {
            let mesh = build_cell_mesh(&CellGeometry::disk(0.25, res))?;
            let p = StokesProblem::from_cell_mesh(&mesh, &MaterialSpec::default())?;
            norms.push(irrotational_collapse_check(&p, [1.0, 0.0], grad)?.v_norm);
        }
        Ok((
            norms[0] <= 1e-6 && norms[1] < norms[0],
            format!("||v|| = {:.2e} at 32, {:.2e} at 64", norms[0], norms[1]),
        ))
    })();
    outcome(5, "irrotational collapse", t, r)
}

/// Fine-scale runs and limit objects shared by the sweep checks.
pub struct SweepEvidence {
    pub report: SweepReport,
    pub limit: LimitSpectrum,
    pub window: f64,
    pub seconds: f64,
}

/// `eps` values of the sweep checks.
pub const SWEEP_INVERSE_EPSILON: [usize; 3] = [4, 8, 16];
/// Segments per cell edge in the fine meshes.
pub const SWEEP_CELLS_RES: usize = 8;
/// Macro mesh of the limit problem.
pub const SWEEP_MACRO_N: usize = 16;

/// Runs the default sweep: `f = (1, 0)`, `alpha = 1`, window `mu_2 + 10%`.
/// The limit objects use the cell mesh the fine meshes are tiled from, so
/// both sides share one discretization of the cell.
pub fn sweep_evidence(workers: usize) -> Result<SweepEvidence> {
    let t = Instant::now();
    let mat = MaterialSpec::default();
    let inclusion = InclusionShape::disk(0.5, 0.5, 0.25);
    let cell_mesh = build_cell_mesh(&CellGeometry { inclusion, resolution: SWEEP_CELLS_RES })?;
    let cell = CellProblem::new(&cell_mesh, &mat)?;
    let chom: EffectiveTensor = homogenize(&cell, &cg(), 0x0ce11)?.chom;
    let stokes = StokesProblem::from_cell_mesh(&cell_mesh, &mat)?;
    let macro_mesh = build_macro_mesh(&Rect::unit(), SWEEP_MACRO_N)?;
    let window = 1.1 * STOKES_MU2_REFERENCE;
    let limit = limit_spectrum_with(&macro_mesh, &chom, &stokes, window)?;
    let forcing = TwoScaleForcing::macroscopic(|_| [1.0, 0.0]);
    let field = LimitSolver::new(&macro_mesh, &chom, &stokes, 1.0)?.solve(&forcing)?;
    let spec = SweepSpec {
        domain: Rect::unit(),
        inverse_epsilon: SWEEP_INVERSE_EPSILON.to_vec(),
        cells_res: SWEEP_CELLS_RES,
        inclusion,
        material: mat,
        forcing,
        alpha: 1.0,
        limit_field: Some(&field),
        limit_spectrum: Some(&limit.set),
        window,
        micro_target: limit.micro_values.first().copied(),
        workers,
        deterministic: false,
    };
    let report = sweep_epsilon(&spec)?;
    Ok(SweepEvidence { report, limit, window, seconds: t.elapsed().as_secs_f64() })
}

fn failed_rows(ev: &SweepEvidence) -> Option<String> {
    let bad: Vec<String> = ev
        .report
        .rows
        .iter()
        .filter_map(|r| match &r.status {
            RowStatus::Ok => None,
            RowStatus::Failed(e) => Some(format!("1/{} ({e})", r.inverse_epsilon)),
        })
        .collect();
    (!bad.is_empty()).then(|| format!("failed runs: {}", bad.join(", ")))
}

/// `||u_eps - u||` strictly decreasing, last over first at most 1/2.
pub fn macro_convergence(ev: &SweepEvidence) -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        if let Some(msg) = failed_rows(ev) {
            return Ok((false, msg));
        }
        let errs: Vec<f64> = ev.report.rows.iter().map(|r| r.l2_macro_error.unwrap_or(f64::NAN)).collect();
        let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
        let ratio = errs[errs.len() - 1] / errs[0];
        let solve: f64 = ev.report.rows.iter().map(|r| r.solve_seconds).sum();
        Ok((
            decreasing && ratio <= 0.5 && solve < 600.0,
            format!("errors {}, ratio {ratio:.3}, solves {solve:.0} s of 600", fmt_list(&errs)),
        ))
    })();
    outcome(6, "macro convergence", t, r)
}

/// Windowed Hausdorff distance weakly decreasing, last at most half the first.
pub fn spectral_hausdorff(ev: &SweepEvidence) -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        if let Some(msg) = failed_rows(ev) {
            return Ok((false, msg));
        }
        let d: Vec<f64> = ev.report.rows.iter().map(|r| r.hausdorff.unwrap_or(f64::NAN)).collect();
        let weakly = d.windows(2).all(|w| w[1] <= w[0]);
        let ratio = d[d.len() - 1] / d[0];
        let bottom = ev.limit.set.values().first().copied().unwrap_or(f64::NAN);
        let low: Vec<f64> =
            ev.report.rows.iter().map(|r| r.smallest_eigenvalue.unwrap_or(f64::NAN) - bottom).collect();
        Ok((
            weakly && ratio <= 0.5,
            format!(
                "distances {}, ratio {ratio:.3}, window {:.2}, {} limit points, lowest-eigenvalue gaps {}",
                fmt_list(&d),
                ev.window,
                ev.limit.set.len(),
                fmt_list(&low)
            ),
        ))
    })();
    outcome(7, "spectral Hausdorff convergence", t, r)
}

/// Stokes eigenvalues against the frozen reference, divergence residual and
/// the `r^-2` scaling.
pub fn stokes_fidelity() -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        let mat = MaterialSpec::default();
        let p = StokesProblem::from_cell_mesh(&build_cell_mesh(&default_disk())?, &mat)?;
        let s = p.eigenpairs(2, &EigOptions::default())?;
        let e1 = (s.values[0] / STOKES_MU1_REFERENCE - 1.0).abs();
        let e2 = (s.values[1] / STOKES_MU2_REFERENCE - 1.0).abs();
        let div = s.div_residuals.iter().copied().fold(0.0, f64::max);
        // both radii on the same grid, so the discretizations differ
        let mu = |r: f64| -> Result<f64> {
            let q = StokesProblem::from_cell_mesh(&build_cell_mesh(&CellGeometry::disk(r, 64))?, &mat)?;
            Ok(q.eigenpairs(1, &EigOptions::default())?.values[0])
        };
        let ratio = mu(0.125)? / mu(0.25)?;
        Ok((
            e1 <= 0.01 && e2 <= 0.01 && div <= 1e-8 && (ratio / 4.0 - 1.0).abs() <= 0.01,
            format!(
                "mu1 {:.4} ({:.2}%), mu2 {:.4} ({:.2}%), div residual {div:.1e}, mu(r/2)/mu(r) {ratio:.4}",
                s.values[0],
                100.0 * e1,
                s.values[1],
                100.0 * e2
            ),
        ))
    })();
    outcome(8, "Stokes eigensolver fidelity", t, r)
}

/// Smallest fine eigenvalue above half of `min(lambda_1, mu_1)`.
pub fn spectral_gap(ev: &SweepEvidence) -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        if let Some(msg) = failed_rows(ev) {
            return Ok((false, msg));
        }
        let l1 = ev.limit.macro_values.first().copied().unwrap_or(f64::INFINITY);
        let m1 = ev.limit.micro_values.first().copied().unwrap_or(f64::INFINITY);
        let floor = 0.5 * l1.min(m1);
        let low: Vec<f64> = ev.report.rows.iter().map(|r| r.smallest_eigenvalue.unwrap_or(f64::NAN)).collect();
        Ok((low.iter().all(|&v| v >= floor), format!("smallest {}, floor {floor:.4}", fmt_list(&low))))
    })();
    outcome(9, "spectral gap", t, r)
}

fn fmt_list(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "))
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    &g * g.transpose() + DMatrix::identity(n, n) * 0.5
}

fn to_csr(a: &DMatrix<f64>) -> CsrMatrix {
    let mut tb = TripletBuilder::new(a.nrows(), a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if a[(i, j)] != 0.0 {
                tb.push(i, j, a[(i, j)]);
            }
        }
    }
    tb.build()
}

fn rel_err(x: &[f64], y: &DVector<f64>) -> f64 {
    let d: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    d / y.norm()
}

/// CG, MINRES and the eigensolver against dense factorizations on small
/// systems, and byte-identical reruns of a tensor report.
pub fn solver_suite() -> CheckOutcome {
    let t = Instant::now();
    let r = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x501e);
        // CG on a 40-dof SPD system
        let a = random_spd(40, &mut rng);
        let b = DVector::from_fn(40, |_, _| rng.random::<f64>() - 0.5);
        let exact = a.clone().cholesky().expect("spd").solve(&b);
        let opts = CgOptions { tol: 1e-13, max_iter: 2000, jacobi: false, record_history: false };
        let (x, _) = cg_solve(&to_csr(&a), b.as_slice(), &opts, None, None)?;
        let cg_err = rel_err(&x, &exact);

        // MINRES on a 30 + 10 saddle system
        let k = random_spd(30, &mut rng);
        let bb = DMatrix::from_fn(10, 30, |_, _| rng.random::<f64>() - 0.5);
        let mut s = DMatrix::zeros(40, 40);
        s.view_mut((0, 0), (30, 30)).copy_from(&k);
        s.view_mut((30, 0), (10, 30)).copy_from(&bb);
        s.view_mut((0, 30), (30, 10)).copy_from(&bb.transpose());
        let rhs = DVector::from_fn(40, |_, _| rng.random::<f64>() - 0.5);
        let exact_s = s.clone().lu().solve(&rhs).expect("nonsingular");
        let mopts = MinresOptions { tol: 1e-13, max_iter: 4000, ..Default::default() };
        let (y, _) = minres(&to_csr(&s), rhs.as_slice(), None, &mopts)?;
        let minres_err = rel_err(&y, &exact_s);

        // generalized eigenproblem with a 36-dof tridiagonal pencil
        let n = 36;
        let stiff = DMatrix::from_fn(n, n, |i, j| match (i as i64 - j as i64).abs() {
            0 => 2.0 + 0.1 * i as f64,
            1 => -1.0,
            _ => 0.0,
        });
        let mass = DMatrix::from_fn(n, n, |i, j| match (i as i64 - j as i64).abs() {
            0 => 4.0 / 6.0,
            1 => 1.0 / 6.0,
            _ => 0.0,
        });
        let (dense, _) = dense_generalized_eigen(&stiff, &mass)?;
        let eopts = EigOptions { tol: 1e-12, ..Default::default() };
        let rep = eig_generalized(&to_csr(&stiff), &to_csr(&mass), 6, 0.0, None, &eopts)?;
        let eig_err = rep.values.iter().zip(&dense).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);

        // deterministic rerun
        let tensor_json = || -> Result<String> {
            let mesh = build_cell_mesh(&CellGeometry::disk(0.25, 16))?;
            let cell = CellProblem::new(&mesh, &MaterialSpec::default())?;
            let chom = homogenize(&cell, &cg(), 5)?.chom;
            Ok(serde_json::to_string_pretty(&chom.rows())?)
        };
        let same = tensor_json()? == tensor_json()?;
        Ok((
            cg_err <= 1e-9 && minres_err <= 1e-9 && eig_err <= 1e-9 && same,
            format!("cg {cg_err:.1e}, minres {minres_err:.1e}, eigen {eig_err:.1e}, rerun identical {same}"),
        ))
    })();
    outcome(10, "solver unit suite", t, r)
}

/// Every check in order. The sweep is built once and shared.
pub fn run_all(workers: usize) -> Vec<CheckOutcome> {
    let mut out = vec![
        homogeneous_tensor(),
        tensor_structure(),
        kernel_invariance(),
        solvability_monitor(),
        irrotational_collapse(),
    ];
    match sweep_evidence(workers) {
        Ok(ev) => {
            out.push(macro_convergence(&ev));
            out.push(spectral_hausdorff(&ev));
            out.push(stokes_fidelity());
            out.push(spectral_gap(&ev));
        }
        Err(e) => {
            let start = Instant::now();
            out.push(outcome(6, "macro convergence", start, Err(e)));
            out.push(outcome(7, "spectral Hausdorff convergence", start, Ok((false, "sweep failed".into()))));
            out.push(stokes_fidelity());
            out.push(outcome(9, "spectral gap", start, Ok((false, "sweep failed".into()))));
        }
    }
    out.push(solver_suite());
    out
}
