use nalgebra::DMatrix;
use twoscale::assembly::MaterialSpec;
use twoscale::cell::compute_effective_tensor;
use twoscale::checks::{STOKES_MU1_REFERENCE, STOKES_MU2_REFERENCE};
use twoscale::limit::{limit_spectrum_with, stokes_eigenvalues_below, MacroProblem, SpectrumLabel};
use twoscale::mesh::{build_cell_mesh, build_macro_mesh, CellGeometry, ElementOrder, Rect};
use twoscale::solvers::lanczos::dense_generalized_eigen;
use twoscale::sparse::CsrMatrix;
use twoscale::stokes::{stokes_eigenpairs, StokesProblem};

fn dense(a: &CsrMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a.get(i, j))
}

#[test]
fn macro_eigenvalues_match_a_dense_solve() {
    let cell = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
    let chom = compute_effective_tensor(&cell, &MaterialSpec::default()).unwrap();
    let mesh = build_macro_mesh(&Rect::unit(), 4).unwrap().with_order(ElementOrder::P2);
    let p = MacroProblem::new(&mesh, &chom.tensor()).unwrap();
    let (values, _) = p.eigenpairs(6).unwrap();
    let (reference, _) = dense_generalized_eigen(&dense(&p.stiffness), &dense(&p.mass)).unwrap();
    for (v, r) in values.iter().zip(&reference) {
        assert!((v - r).abs() <= 1e-6 * r, "{v} vs {r}");
    }
}

#[test]
fn limit_spectrum_is_the_union_of_both_fragments() {
    let mat = MaterialSpec::default();
    let cell = build_cell_mesh(&CellGeometry::disk(0.25, 8)).unwrap();
    let chom = compute_effective_tensor(&cell, &mat).unwrap();
    let stokes = StokesProblem::from_cell_mesh(&cell, &mat).unwrap();
    let macro_mesh = build_macro_mesh(&Rect::unit(), 4).unwrap();
    let window = 500.0;
    let s = limit_spectrum_with(&macro_mesh, &chom, &stokes, window).unwrap();

    let p = MacroProblem::new(&macro_mesh.clone().with_order(ElementOrder::P2), &chom.tensor()).unwrap();
    let macro_values = p.eigenvalues_below(window).unwrap();
    let micro: Vec<f64> =
        stokes_eigenvalues_below(&stokes, window).unwrap().values.into_iter().filter(|&v| v <= window).collect();
    assert_eq!(s.set.count(SpectrumLabel::Macro), macro_values.len());
    assert_eq!(s.set.count(SpectrumLabel::Micro), micro.len());
    assert_eq!(s.micro_values.len(), micro.len());

    let mut expected: Vec<f64> = macro_values.iter().chain(&micro).copied().collect();
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let got = s.set.values();
    assert!(got.len() <= expected.len());
    // every value of either fragment is in the set
    for e in &expected {
        assert!(got.iter().any(|g| (g - e).abs() <= 1e-8 * e.max(1.0)), "missing {e}");
    }
    assert!(got.iter().all(|&g| g <= window));
}

/// Recomputes the frozen Stokes references by Richardson extrapolation
/// from resolutions 32, 64, 128. Takes several minutes.
#[test]
#[ignore]
fn stokes_references_recompute() {
    let mat = MaterialSpec::default();
    let mut mu = Vec::new();
    for res in [32, 64, 128] {
        let mesh = build_cell_mesh(&CellGeometry::disk(0.25, res)).unwrap();
        mu.push(stokes_eigenpairs(&mesh, &mat, 2).unwrap().values);
    }
    for (k, reference) in [STOKES_MU1_REFERENCE, STOKES_MU2_REFERENCE].into_iter().enumerate() {
        let (a, b, c) = (mu[0][k], mu[1][k], mu[2][k]);
        // observed order from three levels, then one extrapolation step
        let rate = (a - b) / (b - c);
        let extrapolated = c - (b - c) / (rate - 1.0);
        assert!((extrapolated - reference).abs() <= 1e-4 * reference, "{extrapolated} vs {reference}");
    }
}
