//! Preconditioned MINRES for symmetric indefinite systems and the Stokes
//! saddle-point wrapper built on it.

use super::ldl::SparseLdl;
use super::SolveReport;
use crate::error::{Error, Result};
use crate::sparse::{axpy, dot, norm2, CsrMatrix, LinearOperator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinresOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Give up when the residual has not dropped by 10% over this many
    /// iterations.
    pub stagnation_window: usize,
    pub record_history: bool,
}

impl Default for MinresOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 5_000, stagnation_window: 500, record_history: false }
    }
}

/// MINRES with a symmetric positive definite preconditioner `precond`
/// (applied as `z = P^{-1} r`). Converges on the relative 2-norm residual;
/// restarts from the true residual if the recursively updated estimate
/// drifts.
pub fn minres(
    a: &dyn LinearOperator,
    b: &[f64],
    precond: Option<&dyn LinearOperator>,
    opts: &MinresOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    let mut report = SolveReport::default();
    if bnorm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let apply_p = |r: &[f64]| -> Vec<f64> {
        match precond {
            Some(p) => p.apply_alloc(r),
            None => r.to_vec(),
        }
    };
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    let mut total = 0;
    for _restart in 0..4 {
        let ax = a.apply_alloc(&x);
        let mut v: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let true_res = norm2(&v) / bnorm;
        report.final_residual = true_res;
        if true_res <= opts.tol {
            report.converged = true;
            report.iterations = total;
            return Ok((x, report));
        }
        let mut z = apply_p(&v);
        let mut gamma = dot(&z, &v).sqrt();
        let gamma1 = gamma;
        let r0 = norm2(&v);
        let mut gamma_old = 1.0;
        let mut v_old = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut w_old = vec![0.0; n];
        let mut eta = gamma;
        let (mut s, mut s_old) = (0.0, 0.0);
        let (mut c, mut c_old) = (1.0, 1.0);
        let mut az = vec![0.0; n];
        loop {
            if total >= opts.max_iter {
                return Err(Error::MaxIterations { iterations: total, residual: report.final_residual });
            }
            total += 1;
            z.iter_mut().for_each(|zi| *zi /= gamma);
            a.apply(&z, &mut az);
            let delta = dot(&az, &z);
            let mut v_new = az.clone();
            axpy(-delta / gamma, &v, &mut v_new);
            axpy(-gamma / gamma_old, &v_old, &mut v_new);
            let z_new = apply_p(&v_new);
            let gamma_new = dot(&z_new, &v_new).max(0.0).sqrt();
            let a0 = c * delta - c_old * s * gamma;
            let a1 = (a0 * a0 + gamma_new * gamma_new).sqrt();
            let a2 = s * delta + c_old * c * gamma;
            let a3 = s_old * gamma;
            if a1 == 0.0 {
                return Err(Error::Stagnation(report.final_residual));
            }
            let c_new = a0 / a1;
            let s_new = gamma_new / a1;
            let mut w_new = z.clone();
            axpy(-a3, &w_old, &mut w_new);
            axpy(-a2, &w, &mut w_new);
            w_new.iter_mut().for_each(|wi| *wi /= a1);
            axpy(c_new * eta, &w_new, &mut x);
            eta = -s_new * eta;
            // preconditioned residual estimate, scaled to the 2-norm at start
            let est = eta.abs() / gamma1 * r0 / bnorm;
            report.final_residual = est;
            if opts.record_history {
                report.history.push(est);
            }
            if est < best * 0.9 {
                best = est;
                best_at = total;
            } else if total - best_at > opts.stagnation_window {
                return Err(Error::Stagnation(est));
            }
            v_old = std::mem::replace(&mut v, v_new);
            z = z_new;
            gamma_old = gamma;
            gamma = gamma_new;
            c_old = c;
            c = c_new;
            s_old = s;
            s = s_new;
            w_old = std::mem::replace(&mut w, w_new);
            if est <= 0.1 * opts.tol || gamma == 0.0 {
                break;
            }
        }
    }
    report.iterations = total;
    let ax = a.apply_alloc(&x);
    let res: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
    report.final_residual = norm2(&res) / bnorm;
    report.converged = report.final_residual <= opts.tol;
    if !report.converged {
        return Err(Error::Stagnation(report.final_residual));
    }
    Ok((x, report))
}

/// Block operator `[A B^T; B 0]`.
pub struct SaddleOperator<'a> {
    pub a: &'a CsrMatrix,
    pub b: &'a CsrMatrix,
}

impl LinearOperator for SaddleOperator<'_> {
    fn nrows(&self) -> usize {
        self.a.nrows() + self.b.nrows()
    }
    fn ncols(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let nv = self.a.nrows();
        let (xv, xp) = x.split_at(nv);
        let (yv, yp) = y.split_at_mut(nv);
        self.a.apply(xv, yv);
        let btp = transpose_apply(self.b, xp, nv);
        axpy(1.0, &btp, yv);
        self.b.apply(xv, yp);
    }
}

pub(crate) fn transpose_apply(b: &CsrMatrix, x: &[f64], ncols: usize) -> Vec<f64> {
    let mut y = vec![0.0; ncols];
    for i in 0..b.nrows() {
        let xi = x[i];
        if xi != 0.0 {
            for (j, v) in b.row(i) {
                y[j] += v * xi;
            }
        }
    }
    y
}

/// Block-diagonal preconditioner: exact factor of the velocity block and
/// the inverse diagonal of the pressure mass matrix.
pub struct BlockDiagonal<'a> {
    pub velocity: &'a SparseLdl,
    pub pressure_inv_diag: Vec<f64>,
}

impl LinearOperator for BlockDiagonal<'_> {
    fn nrows(&self) -> usize {
        self.velocity.dim() + self.pressure_inv_diag.len()
    }
    fn ncols(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let nv = self.velocity.dim();
        y[..nv].copy_from_slice(&x[..nv]);
        self.velocity.solve_in_place(&mut y[..nv]);
        for (k, d) in self.pressure_inv_diag.iter().enumerate() {
            y[nv + k] = x[nv + k] * d;
        }
    }
}

/// Solves `A v + B^T p = f`, `B v = g` with MINRES and a block-diagonal
/// preconditioner. `a_factor` factors `A` (or a spectrally equivalent SPD
/// matrix); `pressure_mass` scales the pressure block. The returned
/// pressure has zero mean with respect to `pressure_mass`.
#[allow(clippy::too_many_arguments)]
pub fn minres_saddle_solve(
    a: &CsrMatrix,
    b: &CsrMatrix,
    f: &[f64],
    g: &[f64],
    a_factor: &SparseLdl,
    pressure_mass: &CsrMatrix,
    opts: &MinresOptions,
) -> Result<(Vec<f64>, Vec<f64>, SolveReport)> {
    let nv = a.nrows();
    let np = b.nrows();
    let op = SaddleOperator { a, b };
    let pre = BlockDiagonal {
        velocity: a_factor,
        pressure_inv_diag: pressure_mass.diagonal().iter().map(|d| 1.0 / d).collect(),
    };
    let mut rhs = f.to_vec();
    rhs.extend_from_slice(g);
    let (x, mut report) = minres(&op, &rhs, Some(&pre), opts)?;
    let v = x[..nv].to_vec();
    let mut p = x[nv..].to_vec();
    let ones = vec![1.0; np];
    let mass_ones = pressure_mass.apply_alloc(&ones);
    let area: f64 = mass_ones.iter().sum();
    let mean = dot(&p, &mass_ones) / area;
    p.iter_mut().for_each(|pi| *pi -= mean);
    let bv = b.apply_alloc(&v);
    let fnorm = norm2(f).max(norm2(g)).max(f64::MIN_POSITIVE);
    report.range_defect = norm2(&bv.iter().zip(g).map(|(x, y)| x - y).collect::<Vec<_>>()) / fnorm;
    Ok((v, p, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn small_saddle_matches_dense() {
        let a = CsrMatrix::from_dense(&[
            vec![4.0, 1.0, 0.0],
            vec![1.0, 3.0, 0.5],
            vec![0.0, 0.5, 2.0],
        ]);
        let b = CsrMatrix::from_dense(&[vec![1.0, -1.0, 0.0], vec![0.0, 1.0, 2.0]]);
        let f = [1.0, 2.0, -1.0];
        let g = [0.5, 0.0];
        let fac = SparseLdl::new(&a).unwrap();
        let pm = CsrMatrix::identity(2);
        let opts = MinresOptions { tol: 1e-13, ..Default::default() };
        let op = SaddleOperator { a: &a, b: &b };
        let pre = BlockDiagonal { velocity: &fac, pressure_inv_diag: vec![1.0, 1.0] };
        let mut rhs = f.to_vec();
        rhs.extend_from_slice(&g);
        let (x, _) = minres(&op, &rhs, Some(&pre), &opts).unwrap();
        let mut k = DMatrix::zeros(5, 5);
        for i in 0..3 {
            for j in 0..3 {
                k[(i, j)] = a.get(i, j);
            }
        }
        for i in 0..2 {
            for j in 0..3 {
                k[(3 + i, j)] = b.get(i, j);
                k[(j, 3 + i)] = b.get(i, j);
            }
        }
        let xd = k.lu().solve(&DVector::from_vec(rhs)).unwrap();
        assert!((DVector::from_vec(x) - xd).amax() < 1e-10);
        let (v, _, r) = minres_saddle_solve(&a, &b, &f, &g, &fac, &pm, &opts).unwrap();
        assert!(r.range_defect < 1e-10);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn unpreconditioned_indefinite() {
        let a = CsrMatrix::from_dense(&[vec![2.0, 1.0], vec![1.0, -3.0]]);
        let (x, _) = minres(&a, &[1.0, 1.0], None, &MinresOptions::default()).unwrap();
        // det = -7
        assert!((x[0] - 4.0 / 7.0).abs() < 1e-10 && (x[1] + 1.0 / 7.0).abs() < 1e-10);
    }

    #[test]
    fn zero_rhs() {
        let a = CsrMatrix::identity(3);
        let (x, r) = minres(&a, &[0.0; 3], None, &MinresOptions::default()).unwrap();
        assert!(r.converged && x.iter().all(|&v| v == 0.0));
    }
}
