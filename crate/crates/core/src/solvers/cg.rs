//! Conjugate gradients for SPD and consistent positive-semidefinite systems.

use super::SolveReport;
use crate::error::{Error, Result};
use crate::sparse::{axpy, dot, norm2, LinearOperator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Scale by the inverse diagonal of `A` (needs `diagonal`).
    pub jacobi: bool,
    pub record_history: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 20_000, jacobi: false, record_history: false }
    }
}

/// Removes the components of `x` along an orthonormal set.
pub fn project_out(x: &mut [f64], basis: &[Vec<f64>]) {
    for z in basis {
        let c = dot(x, z);
        axpy(-c, z, x);
    }
}

/// Solves `A x = b`. With a kernel basis the iteration runs in the
/// orthogonal complement of the kernel; `b` must be consistent.
pub fn cg_solve(
    a: &dyn LinearOperator,
    b: &[f64],
    opts: &CgOptions,
    kernel: Option<&[Vec<f64>]>,
    diagonal: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = b.len();
    let kernel = kernel.unwrap_or(&[]);
    let bnorm = norm2(b);
    let mut rhs = b.to_vec();
    if !kernel.is_empty() {
        let mut along = vec![0.0; n];
        for z in kernel {
            axpy(dot(b, z), z, &mut along);
        }
        if norm2(&along) > 1e-8 * bnorm {
            return Err(Error::NotConsistent(norm2(&along) / bnorm.max(f64::MIN_POSITIVE)));
        }
        project_out(&mut rhs, kernel);
    }
    let mut report = SolveReport::default();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let inv_diag: Option<Vec<f64>> = match (opts.jacobi, diagonal) {
        (true, Some(d)) => Some(d.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 1.0 }).collect()),
        _ => None,
    };
    let precondition = |r: &[f64]| -> Vec<f64> {
        let mut z = match &inv_diag {
            Some(d) => r.iter().zip(d).map(|(a, b)| a * b).collect(),
            None => r.to_vec(),
        };
        project_out(&mut z, kernel);
        z
    };
    let rnorm0 = norm2(&rhs);
    let mut r = rhs.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut energy = 0.0;
    for it in 1..=opts.max_iter {
        a.apply(&p, &mut ap);
        project_out(&mut ap, kernel);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::MaxIterations { iterations: it, residual: norm2(&r) / rnorm0 });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        project_out(&mut x, kernel);
        // energy 1/2 x^T A x - b^T x drops by alpha^2 pAp / 2 per step
        energy -= 0.5 * alpha * alpha * pap;
        let res = norm2(&r) / bnorm;
        report.iterations = it;
        report.final_residual = res;
        if opts.record_history {
            report.history.push(res);
            report.energy.push(energy);
        }
        if res <= opts.tol {
            // confirm with the true residual; on drift restart from it
            let ax = a.apply_alloc(&x);
            r.copy_from_slice(&rhs);
            axpy(-1.0, &ax, &mut r);
            project_out(&mut r, kernel);
            if norm2(&r) / bnorm <= opts.tol {
                break;
            }
            z = precondition(&r);
            rz = dot(&r, &z);
            p.copy_from_slice(&z);
            continue;
        }
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    // true residual
    let ax = a.apply_alloc(&x);
    let mut res = rhs.clone();
    axpy(-1.0, &ax, &mut res);
    project_out(&mut res, kernel);
    report.final_residual = norm2(&res) / bnorm;
    report.converged = report.final_residual <= opts.tol;
    report.range_defect = kernel.iter().map(|z| dot(&x, z).powi(2)).sum::<f64>().sqrt();
    if !report.converged {
        return Err(Error::MaxIterations { iterations: report.iterations, residual: report.final_residual });
    }
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{CsrMatrix, TripletBuilder};
    use nalgebra::{DMatrix, DVector};

    fn tridiag(n: usize) -> CsrMatrix {
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            t.push(i, i, 2.0);
            if i + 1 < n {
                t.push(i, i + 1, -1.0);
                t.push(i + 1, i, -1.0);
            }
        }
        t.build()
    }

    #[test]
    fn identity_one_iteration() {
        let a = CsrMatrix::identity(5);
        let (x, r) = cg_solve(&a, &[1.0, 0.0, 0.0, 0.0, 0.0], &CgOptions::default(), None, None).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(x, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn laplacian_matches_dense() {
        let a = tridiag(10);
        let b: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64) - 1.3).collect();
        let (x, _) = cg_solve(&a, &b, &CgOptions::default(), None, None).unwrap();
        let d = DMatrix::from_fn(10, 10, |i, j| a.get(i, j));
        let xd = d.cholesky().unwrap().solve(&DVector::from_vec(b));
        assert!((DVector::from_vec(x) - xd).amax() < 1e-10);
    }

    #[test]
    fn inconsistent_rhs_is_rejected() {
        // periodic 1D Laplacian, kernel = constants
        let n = 8;
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            t.push(i, i, 2.0);
            t.push(i, (i + 1) % n, -1.0);
            t.push((i + 1) % n, i, -1.0);
        }
        let a = t.build();
        let z = vec![vec![1.0 / (n as f64).sqrt(); n]];
        let b = vec![1.0; n];
        assert!(matches!(cg_solve(&a, &b, &CgOptions::default(), Some(&z), None), Err(Error::NotConsistent(_))));
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 3.5).collect();
        let (x, r) = cg_solve(&a, &b, &CgOptions::default(), Some(&z), None).unwrap();
        assert!(r.range_defect < 1e-12);
        let ax = a.apply_alloc(&x);
        assert!(ax.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn energy_is_monotone() {
        let a = tridiag(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let opts = CgOptions { record_history: true, ..Default::default() };
        let (_, r) = cg_solve(&a, &b, &opts, None, None).unwrap();
        assert!(r.energy.windows(2).all(|w| w[1] <= w[0] + 1e-14));
    }
}
