use std::collections::HashMap;
use twoscale::assembly::MaterialSpec;
use twoscale::cell::{EffectiveTensor, TensorProvenance};
use twoscale::fine::{
    eps_eigenvalues, solve_eps_resolvent, sweep_epsilon, two_scale_distance, Contrast, FineProblem, RowStatus,
    SweepSpec,
};
use twoscale::forcing::TwoScaleForcing;
use twoscale::limit::{macro_eigenpairs, LimitSolver};
use twoscale::mesh::{build_cell_mesh, build_macro_mesh, CellGeometry, InclusionShape, Phase, Rect};
use twoscale::quadrature::six_point;
use twoscale::solvers::SparseLdl;
use twoscale::sparse::{norm2, TripletBuilder};
use twoscale::stokes::StokesProblem;
use twoscale::Error;

fn disk() -> InclusionShape {
    InclusionShape::disk(0.5, 0.5, 0.25)
}

/// P2 basis gradients at barycentric point `l`, written out from scratch.
fn p2_grads(l: [f64; 3], g: [[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let lin = |i: usize| [(4.0 * l[i] - 1.0) * g[i][0], (4.0 * l[i] - 1.0) * g[i][1]];
    let mid = |i: usize, j: usize| [4.0 * (l[i] * g[j][0] + l[j] * g[i][0]), 4.0 * (l[i] * g[j][1] + l[j] * g[i][1])];
    [lin(0), lin(1), lin(2), mid(0, 1), mid(1, 2), mid(2, 0)]
}

fn p2_vals(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

/// Classical isotropic composite assembled element by element with
/// edge-midpoint quadrature, Lame pairs per phase, Dirichlet rows dropped.
fn classical_solve(p: &FineProblem, lame: impl Fn(Phase) -> (f64, f64), f: impl Fn([f64; 2]) -> [f64; 2]) -> Vec<f64> {
    let sp = &p.space;
    let d = &p.domain;
    let on_wall = |x: [f64; 2]| {
        let t = 1e-12;
        (x[0] - d.x0).abs() < t || (x[0] - d.x1).abs() < t || (x[1] - d.y0).abs() < t || (x[1] - d.y1).abs() < t
    };
    let mut index = HashMap::new();
    for (n, &x) in sp.coords.iter().enumerate() {
        if !on_wall(x) {
            let k = index.len();
            index.insert(n, k);
        }
    }
    let nfree = index.len();
    let mut tb = TripletBuilder::new(2 * nfree, 2 * nfree);
    let mut rhs = vec![0.0; 2 * nfree];
    let mids = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];
    for (e, nodes) in sp.elements.iter().enumerate() {
        let v = [sp.coords[nodes[0]], sp.coords[nodes[1]], sp.coords[nodes[2]]];
        let det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
        let area = 0.5 * det.abs();
        let g1 = [(v[2][1] - v[0][1]) / det, -(v[2][0] - v[0][0]) / det];
        let g2 = [-(v[1][1] - v[0][1]) / det, (v[1][0] - v[0][0]) / det];
        let g = [[-g1[0] - g2[0], -g1[1] - g2[1]], g1, g2];
        let (lam, mu) = lame(sp.phases[e]);
        let mut ke = [[0.0; 12]; 12];
        for l in mids {
            let gr = p2_grads(l, g);
            let w = area / 3.0;
            for a in 0..6 {
                for ca in 0..2 {
                    for b in 0..6 {
                        for cb in 0..2 {
                            // e(phi_a e_ca) : sigma(phi_b e_cb)
                            let div_a = gr[a][ca];
                            let div_b = gr[b][cb];
                            let mut ee = 0.0;
                            for i in 0..2 {
                                for j in 0..2 {
                                    let ea = 0.5 * (if i == ca { gr[a][j] } else { 0.0 } + if j == ca { gr[a][i] } else { 0.0 });
                                    let eb = 0.5 * (if i == cb { gr[b][j] } else { 0.0 } + if j == cb { gr[b][i] } else { 0.0 });
                                    ee += ea * eb;
                                }
                            }
                            ke[2 * a + ca][2 * b + cb] += w * (lam * div_a * div_b + 2.0 * mu * ee);
                        }
                    }
                }
            }
        }
        for qp in six_point() {
            let x = [
                qp.bary[0] * v[0][0] + qp.bary[1] * v[1][0] + qp.bary[2] * v[2][0],
                qp.bary[0] * v[0][1] + qp.bary[1] * v[1][1] + qp.bary[2] * v[2][1],
            ];
            let fv = f(x);
            let phi = p2_vals(qp.bary);
            for a in 0..6 {
                if let Some(&ia) = index.get(&nodes[a]) {
                    for c in 0..2 {
                        rhs[2 * ia + c] += qp.weight * area * fv[c] * phi[a];
                    }
                }
            }
        }
        for a in 0..6 {
            for b in 0..6 {
                if let (Some(&ia), Some(&ib)) = (index.get(&nodes[a]), index.get(&nodes[b])) {
                    for ca in 0..2 {
                        for cb in 0..2 {
                            tb.push(2 * ia + ca, 2 * ib + cb, ke[2 * a + ca][2 * b + cb]);
                        }
                    }
                }
            }
        }
    }
    let u = SparseLdl::new(&tb.build()).unwrap().solve(&rhs);
    let mut full = vec![0.0; sp.n_vector_dofs()];
    for (&n, &k) in &index {
        full[2 * n] = u[2 * k];
        full[2 * n + 1] = u[2 * k + 1];
    }
    full
}

#[test]
fn unscaled_contrast_matches_classical_assembly() {
    let mat = MaterialSpec { inclusion_lambda: 3.0, inclusion_mu_scale: 0.3, ..MaterialSpec::default() };
    let domain = Rect::new(0.0, 0.0, 0.75, 0.75);
    let p = FineProblem::new(&domain, 0.25, 8, &disk(), &mat, Contrast::Unscaled).unwrap();
    assert!(p.space.phases.contains(&Phase::Inclusion));
    let f0 = |x: [f64; 2]| [1.0 + x[1], -0.5 * x[0]];
    let run = p.solve_resolvent(&TwoScaleForcing::macroscopic(f0), 0.0).unwrap();
    let oracle = classical_solve(
        &p,
        |ph| match ph {
            Phase::Matrix => (1.0, 1.0),
            Phase::Inclusion => (3.0, 0.6),
        },
        f0,
    );
    let diff: Vec<f64> = run.u.iter().zip(&oracle).map(|(a, b)| a - b).collect();
    assert!(norm2(&diff) <= 1e-10 * norm2(&oracle), "{}", norm2(&diff) / norm2(&oracle));
}

#[test]
fn zero_forcing_gives_zero_solution_and_distance() {
    let p = FineProblem::new(&Rect::unit(), 0.25, 8, &disk(), &MaterialSpec::default(), Contrast::Scaled).unwrap();
    let run = p.solve_resolvent(&TwoScaleForcing::zero(), 1.0).unwrap();
    assert_eq!(norm2(&run.u), 0.0);
    let cell = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
    let st = StokesProblem::from_cell_mesh(&cell, &MaterialSpec::default()).unwrap();
    let chom = EffectiveTensor { voigt: nalgebra::Matrix3::identity() * 2.0, provenance: TensorProvenance::Chom };
    let mm = build_macro_mesh(&Rect::unit(), 4).unwrap();
    let limit = LimitSolver::new(&mm, &chom, &st, 1.0).unwrap().solve(&TwoScaleForcing::zero()).unwrap();
    let d = two_scale_distance(&p, &run, &limit).unwrap();
    assert_eq!(d.l2_macro_error, 0.0);
    assert_eq!(d.norm_defect, 0.0);

    let other = build_macro_mesh(&Rect::new(0.0, 0.0, 2.0, 1.0), 4).unwrap();
    let far = LimitSolver::new(&other, &chom, &st, 1.0).unwrap().solve(&TwoScaleForcing::zero()).unwrap();
    assert!(matches!(two_scale_distance(&p, &run, &far), Err(Error::IncompatibleInputs(_))));
}

#[test]
fn energy_identity_holds() {
    let f = TwoScaleForcing::new(|x, y| [1.0 + (6.0 * y[1]).sin(), x[0] * (y[0] - 0.5)]);
    let run = solve_eps_resolvent(&Rect::unit(), 0.25, 8, &disk(), &MaterialSpec::default(), &f, 1.0).unwrap();
    assert!(run.energy.defect <= 1e-8, "{:?}", run.energy);
    assert!(run.report.converged);
    // alpha = 0 is admissible
    let run0 = solve_eps_resolvent(&Rect::unit(), 0.25, 8, &disk(), &MaterialSpec::default(), &f, 0.0).unwrap();
    assert!(run0.energy.defect <= 1e-8);
    assert!(run0.norms.u_l2 > run.norms.u_l2);
}

#[test]
fn homogeneous_medium_matches_the_macro_operator() {
    let none = InclusionShape::disk(0.5, 0.5, 0.0);
    let mat = MaterialSpec::default();
    let fine = eps_eigenvalues(&Rect::unit(), 0.25, 8, &none, &mat, 6).unwrap().values();
    let c2 = EffectiveTensor { voigt: mat.matrix_tensor.to_voigt(), provenance: TensorProvenance::Chom };
    let (set, _) = macro_eigenpairs(&build_macro_mesh(&Rect::unit(), 16).unwrap(), &c2, 6).unwrap();
    for (a, b) in fine.iter().zip(set.values()) {
        assert!((a - b).abs() <= 0.02 * b, "{a} vs {b}");
    }
}

#[test]
fn spectral_gap_at_eps_one_eighth() {
    let mat = MaterialSpec::default();
    let vals = eps_eigenvalues(&Rect::unit(), 0.125, 8, &disk(), &mat, 5).unwrap().values();
    assert_eq!(vals.len(), 5);
    // lambda_1 of the plain matrix operator is above 2 pi^2 mu = 19.7; the
    // first Stokes value is far larger
    let floor = 0.5 * (2.0 * std::f64::consts::PI.powi(2)).min(234.9);
    assert!(vals.iter().all(|&v| v >= floor), "{vals:?}");
}

#[test]
fn refinement_lowers_eigenvalues() {
    let mat = MaterialSpec::default();
    let coarse = eps_eigenvalues(&Rect::unit(), 0.25, 8, &disk(), &mat, 5).unwrap().values();
    let fine = eps_eigenvalues(&Rect::unit(), 0.25, 16, &disk(), &mat, 5).unwrap().values();
    for (c, f) in coarse.iter().zip(&fine) {
        assert!(f < c, "{f} !< {c}");
    }
}

fn spec(inv: Vec<usize>, domain: Rect) -> SweepSpec<'static> {
    SweepSpec {
        domain,
        inverse_epsilon: inv,
        cells_res: 8,
        inclusion: disk(),
        material: MaterialSpec::default(),
        forcing: TwoScaleForcing::macroscopic(|_| [1.0, 0.0]),
        alpha: 1.0,
        limit_field: None,
        limit_spectrum: None,
        window: 100.0,
        micro_target: None,
        workers: 2,
        deterministic: true,
    }
}

#[test]
fn single_entry_sweep_equals_the_direct_run() {
    let s = spec(vec![4], Rect::unit());
    let report = sweep_epsilon(&s).unwrap();
    assert_eq!(report.rows.len(), 1);
    let run = solve_eps_resolvent(&Rect::unit(), 0.25, 8, &disk(), &s.material, &s.forcing, 1.0).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.status, RowStatus::Ok);
    assert_eq!(row.n_dofs, run.n_dofs);
    assert_eq!(row.norms, run.norms);
    assert_eq!(row.energy_defect, run.energy.defect);
    assert_eq!(row.solve_seconds, 0.0);
    assert_eq!(report.apriori_constant, Some(row.apriori_ratio()));
    assert!(report.apriori_respected);
}

#[test]
fn failing_entry_is_isolated() {
    // a 1 x 1/2 domain is not tiled by cells of size 1/3
    let report = sweep_epsilon(&spec(vec![2, 3, 4], Rect::new(0.0, 0.0, 1.0, 0.5))).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].status, RowStatus::Ok);
    assert!(matches!(report.rows[1].status, RowStatus::Failed(_)));
    assert_eq!(report.rows[2].status, RowStatus::Ok);
    assert_eq!(report.table().rows.len(), 3);
}

#[test]
fn sweep_is_deterministic() {
    let a = sweep_epsilon(&spec(vec![2, 4], Rect::unit())).unwrap();
    let b = sweep_epsilon(&spec(vec![2, 4], Rect::unit())).unwrap();
    assert_eq!(a.table().to_csv().unwrap(), b.table().to_csv().unwrap());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn resonant_mode_lives_in_the_inclusions() {
    let mat = MaterialSpec::default();
    let p = FineProblem::new(&Rect::unit(), 0.125, 8, &InclusionShape::disk(0.5, 0.5, 0.25), &mat, Contrast::Scaled)
        .unwrap();
    let target = 252.757;
    let (value, share) = p.inclusion_mass_fraction_near(target).unwrap();
    assert!((value - target).abs() < 0.1 * target);
    assert!(share > 0.5);
}
