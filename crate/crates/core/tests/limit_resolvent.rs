use nalgebra::Matrix3;
use twoscale::assembly::{assemble_load, eval_field, MaterialSpec};
use twoscale::cell::{EffectiveTensor, TensorProvenance};
use twoscale::forcing::TwoScaleForcing;
use twoscale::limit::LimitSolver;
use twoscale::mesh::{build_cell_mesh, build_macro_mesh, CellGeometry, Rect};
use twoscale::quadrature::six_point;
use twoscale::solvers::{minres, MinresOptions, SparseLdl};
use twoscale::sparse::{norm2, TripletBuilder};
use twoscale::stokes::StokesProblem;

fn chom() -> EffectiveTensor {
    EffectiveTensor {
        voigt: Matrix3::new(2.4, 1.1, 0.0, 1.1, 2.4, 0.0, 0.0, 0.0, 0.5),
        provenance: TensorProvenance::Chom,
    }
}

fn stokes() -> StokesProblem {
    let cell = build_cell_mesh(&CellGeometry::disk(0.25, 12)).unwrap();
    StokesProblem::from_cell_mesh(&cell, &MaterialSpec::default()).unwrap()
}

fn rotational(amp: f64) -> TwoScaleForcing {
    TwoScaleForcing::new(move |x, y| {
        let g = (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin();
        [1.0 - amp * g * (y[1] - 0.5), amp * g * (y[0] - 0.5)]
    })
}

/// The coupled discrete system for all unknowns at once:
/// macro displacement, and velocity/pressure at every macro quadrature
/// point, with the micro rows weighted by the quadrature weight so the
/// block matrix is symmetric.
fn monolithic(solver: &LimitSolver, f: &TwoScaleForcing) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mp = &solver.macro_problem;
    let st = solver.stokes;
    let alpha = solver.alpha;
    let quad = six_point();
    let nu = mp.n_dofs();
    let nv = st.n_velocity();
    let np = st.n_pressure();
    let nq = 6 * mp.space.elements.len();
    let block = nv + np;
    let n = nu + nq * block;
    let [l1, l2] = st.unit_loads();

    // macro basis functions at the quadrature points
    let mut phi = vec![vec![[0.0; 2]; nq]; nu];
    for (a, row) in phi.iter_mut().enumerate() {
        let mut e = vec![0.0; nu];
        e[a] = 1.0;
        let full = mp.dof_map.expand(&e);
        for (q, val) in row.iter_mut().enumerate() {
            *val = eval_field(&mp.space, &full, q / 6, &quad[q % 6].bary).0;
        }
    }
    let mut weights = Vec::new();
    for e in 0..mp.space.elements.len() {
        let t = &mp.space.elements[e];
        let p = |i: usize| mp.space.coords[t[i]];
        let (a, b, c) = (p(0), p(1), p(2));
        let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
        for qp in &quad {
            weights.push(qp.weight * area);
        }
    }

    let mut tb = TripletBuilder::new(n, n);
    let macro_op = mp.stiffness.add_scaled(&mp.mass, alpha);
    for i in 0..nu {
        for (j, v) in macro_op.row(i) {
            tb.push(i, j, v);
        }
    }
    let micro_op = st.a.add_scaled(&st.m, alpha);
    let mut rhs = vec![0.0; n];
    let macro_load = mp.dof_map.restrict(&assemble_load(&mp.space, |x, _| f.cell_mean(x, 12)));
    rhs[..nu].copy_from_slice(&macro_load);
    for q in 0..nq {
        let w = weights[q];
        let off = nu + q * block;
        for i in 0..nv {
            for (j, v) in micro_op.row(i) {
                tb.push(off + i, off + j, w * v);
            }
        }
        for r in 0..np {
            for (j, v) in st.b.row(r) {
                tb.push(off + nv + r, off + j, w * v);
                tb.push(off + j, off + nv + r, w * v);
            }
        }
        // coupling alpha * w * phi_a(x_q) . v_q
        for a in 0..nu {
            let ph = phi[a][q];
            if ph == [0.0, 0.0] {
                continue;
            }
            for i in 0..nv {
                let c = alpha * w * (ph[0] * l1[i] + ph[1] * l2[i]);
                if c != 0.0 {
                    tb.push(a, off + i, c);
                    tb.push(off + i, a, c);
                }
            }
        }
        let xq = {
            let e = q / 6;
            let t = &mp.space.elements[e];
            let b = quad[q % 6].bary;
            let mut x = [0.0; 2];
            for k in 0..3 {
                x[0] += b[k] * mp.space.coords[t[k]][0];
                x[1] += b[k] * mp.space.coords[t[k]][1];
            }
            x
        };
        let load = st.load(|y| f.eval(xq, y));
        for i in 0..nv {
            rhs[off + i] = w * load[i];
        }
    }
    let big = tb.build();

    // block diagonal SPD preconditioner
    let mut pb = TripletBuilder::new(n, n);
    for i in 0..nu {
        for (j, v) in macro_op.row(i) {
            pb.push(i, j, v);
        }
    }
    let pdiag = st.pressure_mass.diagonal();
    for q in 0..nq {
        let off = nu + q * block;
        for i in 0..nv {
            for (j, v) in micro_op.row(i) {
                pb.push(off + i, off + j, weights[q] * v);
            }
        }
        for r in 0..np {
            pb.push(off + nv + r, off + nv + r, weights[q] * pdiag[r]);
        }
    }
    let pre = SparseLdl::new(&pb.build()).unwrap();
    let (x, report) = minres(&big, &rhs, Some(&pre), &MinresOptions { tol: 1e-12, max_iter: 20_000, ..Default::default() })
        .unwrap();
    assert!(report.converged, "{report:?}");
    let u = x[..nu].to_vec();
    let v = (0..nq).map(|q| x[nu + q * block..nu + q * block + nv].to_vec()).collect();
    (u, v)
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&d) / norm2(b).max(1e-300)
}

#[test]
fn matches_the_monolithic_coupled_system() {
    let st = stokes();
    let mesh = build_macro_mesh(&Rect::unit(), 2).unwrap();
    let solver = LimitSolver::new(&mesh, &chom(), &st, 1.0).unwrap();
    let f = rotational(40.0);
    let field = solver.solve(&f).unwrap();
    let (u, v) = monolithic(&solver, &f);
    let u_split = solver.macro_problem.dof_map.restrict(&field.u);
    assert!(rel(&u_split, &u) <= 1e-6, "macro mismatch {}", rel(&u_split, &u));
    let mut num = 0.0;
    let mut den = 0.0;
    for (q, vq) in v.iter().enumerate() {
        let d: Vec<f64> = field.micro_velocity(q).iter().zip(vq).map(|(a, b)| a - b).collect();
        num += norm2(&d).powi(2);
        den += norm2(vq).powi(2);
    }
    assert!(den > 0.0);
    assert!((num / den).sqrt() <= 1e-6, "micro mismatch {}", (num / den).sqrt());
    // the cell mean of a divergence-free field vanishes
    for q in 0..field.points.len() {
        let m = field.micro_mean(q);
        assert!(m[0].abs() + m[1].abs() <= 1e-10);
    }
}

#[test]
fn zero_forcing_gives_zero_field() {
    let st = stokes();
    let mesh = build_macro_mesh(&Rect::unit(), 2).unwrap();
    let field = LimitSolver::new(&mesh, &chom(), &st, 1.0).unwrap().solve(&TwoScaleForcing::zero()).unwrap();
    assert_eq!(norm2(&field.u), 0.0);
    assert_eq!(field.max_micro_norm(), 0.0);
}

#[test]
fn macroscopic_forcing_reduces_to_the_plain_dirichlet_solve() {
    let st = stokes();
    let mesh = build_macro_mesh(&Rect::unit(), 3).unwrap();
    let solver = LimitSolver::new(&mesh, &chom(), &st, 1.0).unwrap();
    let f0 = |x: [f64; 2]| [1.0 + x[1], -0.5 * x[0]];
    let field = solver.solve(&TwoScaleForcing::macroscopic(f0)).unwrap();
    let mp = &solver.macro_problem;
    let load = mp.dof_map.restrict(&assemble_load(&mp.space, |x, _| f0(x)));
    let plain = SparseLdl::new(&mp.stiffness.add_scaled(&mp.mass, 1.0)).unwrap().solve(&load);
    assert!(rel(&mp.dof_map.restrict(&field.u), &plain) <= 1e-10);
    assert!(field.max_micro_norm() <= 1e-8);
}

#[test]
fn resolvent_is_self_adjoint_in_the_two_scale_product() {
    let st = stokes();
    let mesh = build_macro_mesh(&Rect::unit(), 2).unwrap();
    let solver = LimitSolver::new(&mesh, &chom(), &st, 2.0).unwrap();
    let f = rotational(25.0);
    let g = TwoScaleForcing::new(|x, y| {
        let s = (2.0 * std::f64::consts::PI * y[0]).sin() * (std::f64::consts::PI * y[1]).cos();
        [x[0] * s + 0.3, (x[1] - 0.2) * (y[0] - y[1])]
    });
    let rf = solver.solve(&f).unwrap();
    let rg = solver.solve(&g).unwrap();
    let a = solver.pairing(&rf, &g);
    let b = solver.pairing(&rg, &f);
    assert!((a - b).abs() <= 1e-7 * a.abs().max(b.abs()), "{a} vs {b}");
}

#[test]
fn rejects_nonpositive_alpha() {
    let st = stokes();
    let mesh = build_macro_mesh(&Rect::unit(), 2).unwrap();
    assert!(LimitSolver::new(&mesh, &chom(), &st, 0.0).is_err());
}
