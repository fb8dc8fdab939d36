//! Block shift-invert Lanczos for `A x = lambda M x` with full
//! reorthogonalization in the `M` inner product.
//!
//! The operator `T = (A - sigma M)^{-1} M` is self-adjoint in the `M` inner
//! product. Its eigenvalues `theta = 1 / (lambda - sigma)` are largest for
//! the `lambda` closest to the shift. A block of starting vectors lets the
//! iteration resolve multiple eigenvalues up to the block size; locking and
//! restarts handle larger multiplicities.

use crate::error::{Error, Result};
use crate::sparse::{axpy, dot};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closures describing one shift-invert problem.
pub struct ShiftInvert<'a> {
    pub n: usize,
    pub sigma: f64,
    /// `y = (A - sigma M)^{-1} x` restricted to the admissible subspace.
    pub apply_t: &'a (dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync),
    pub apply_m: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanczosOptions {
    pub block_size: usize,
    pub max_basis: usize,
    /// Relative residual of the shift-inverted operator for convergence.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self { block_size: 4, max_basis: 240, tol: 1e-11, seed: 0x5eed }
    }
}

/// Converged Ritz pair.
#[derive(Debug, Clone)]
pub struct RitzPair {
    pub value: f64,
    pub vector: Vec<f64>,
    /// `||T x - theta x||_M / |theta|`.
    pub estimate: f64,
}

fn m_orthogonalize(w: &mut [f64], basis: &[Vec<f64>], mbasis: &[Vec<f64>]) {
    for _ in 0..2 {
        for (q, mq) in basis.iter().zip(mbasis) {
            let c = dot(w, mq);
            axpy(-c, q, w);
        }
    }
}

/// Runs block Lanczos until `wanted` accepted pairs have converged or the
/// basis is exhausted. Vectors in `locked` (M-orthonormal, with their
/// `M`-images) are deflated. Returns every converged accepted pair,
/// nearest to the shift first.
pub fn block_lanczos(
    prob: &ShiftInvert<'_>,
    wanted: usize,
    accept: &dyn Fn(f64) -> bool,
    locked: &[Vec<f64>],
    locked_m: &[Vec<f64>],
    start: &[Vec<f64>],
    opts: &LanczosOptions,
) -> Result<Vec<RitzPair>> {
    let n = prob.n;
    let bs = opts.block_size.max(1);
    let max_basis = opts.max_basis.min(n.saturating_sub(locked.len())).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut mq: Vec<Vec<f64>> = Vec::new();

    // first block: supplied start vectors, padded with random ones, pushed
    // through T once so they lie in its range
    let mut block: Vec<Vec<f64>> = Vec::new();
    for s in start.iter().take(bs) {
        block.push(s.clone());
    }
    while block.len() < bs {
        block.push((0..n).map(|_| rng.random::<f64>() - 0.5).collect());
    }
    let mut first = Vec::with_capacity(bs);
    for v in &block {
        first.push((prob.apply_t)(v)?);
    }
    let (mut cur, _) = orthonormalize_block(first, &q, &mq, locked, locked_m, prob.apply_m);
    if cur.is_empty() {
        return Ok(vec![]);
    }
    let mut h = DMatrix::<f64>::zeros(0, 0);
    let mut converged: Vec<RitzPair> = Vec::new();
    loop {
        let start_idx = q.len();
        for (v, mv) in cur.drain(..) {
            q.push(v);
            mq.push(mv);
        }
        let m = q.len();
        let mut hn = DMatrix::<f64>::zeros(m, m);
        hn.view_mut((0, 0), (h.nrows(), h.ncols())).copy_from(&h);
        let mut w_block = Vec::with_capacity(m - start_idx);
        for j in start_idx..m {
            let w = (prob.apply_t)(&q[j])?;
            for i in 0..m {
                let v = dot(&mq[i], &w);
                hn[(i, j)] = v;
                hn[(j, i)] = v;
            }
            w_block.push(w);
        }
        // symmetrize the freshly computed diagonal block
        for i in start_idx..m {
            for j in start_idx..i {
                let s = 0.5 * (hn[(i, j)] + hn[(j, i)]);
                hn[(i, j)] = s;
                hn[(j, i)] = s;
            }
        }
        h = hn;
        let (next, r) = orthonormalize_block(w_block, &q, &mq, locked, locked_m, prob.apply_m);
        // Ritz analysis
        let eig = SymmetricEigen::new(h.clone());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].abs().partial_cmp(&eig.eigenvalues[a].abs()).unwrap());
        let nb = m - start_idx;
        let mut pairs = Vec::new();
        for &i in &order {
            let theta = eig.eigenvalues[i];
            if theta.abs() < 1e-300 {
                continue;
            }
            let lambda = prob.sigma + 1.0 / theta;
            if !accept(lambda) {
                continue;
            }
            // residual: || R * y_last || with R mapping the last block
            let y = eig.eigenvectors.column(i);
            let mut est2 = 0.0;
            for row in &r {
                let s: f64 = (0..nb).map(|c| row[c] * y[start_idx + c]).sum();
                est2 += s * s;
            }
            pairs.push((i, lambda, est2.sqrt() / theta.abs()));
        }
        let done_count = pairs.iter().take_while(|p| p.2 <= opts.tol).count();
        let exhausted = next.is_empty() || m + next.len() > max_basis;
        if done_count >= wanted || exhausted {
            for &(i, lambda, est) in &pairs {
                if est > opts.tol {
                    continue;
                }
                let y = eig.eigenvectors.column(i);
                let mut x = vec![0.0; n];
                for (k, qk) in q.iter().enumerate() {
                    axpy(y[k], qk, &mut x);
                }
                converged.push(RitzPair { value: lambda, vector: x, estimate: est });
            }
            converged.sort_by(|a, b| {
                (a.value - prob.sigma).abs().partial_cmp(&(b.value - prob.sigma).abs()).unwrap()
            });
            return Ok(converged);
        }
        cur = next;
    }
}

/// M-orthonormalizes `block` against `q` and `locked`, then within itself.
/// Returns the new vectors with their M-images and the coefficient rows
/// `R` such that the projected-out block equals `Q_new R`.
#[allow(clippy::type_complexity)]
fn orthonormalize_block(
    block: Vec<Vec<f64>>,
    q: &[Vec<f64>],
    mq: &[Vec<f64>],
    locked: &[Vec<f64>],
    locked_m: &[Vec<f64>],
    apply_m: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
) -> (Vec<(Vec<f64>, Vec<f64>)>, Vec<Vec<f64>>) {
    let nb = block.len();
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut r: Vec<Vec<f64>> = Vec::new();
    let mut norms0 = Vec::with_capacity(nb);
    let mut work = Vec::with_capacity(nb);
    for mut w in block {
        let mw = apply_m(&w);
        norms0.push(dot(&w, &mw).max(0.0).sqrt());
        m_orthogonalize(&mut w, locked, locked_m);
        m_orthogonalize(&mut w, q, mq);
        work.push(w);
    }
    let scale = norms0.iter().cloned().fold(0.0, f64::max);
    for (c, mut w) in work.into_iter().enumerate() {
        for _ in 0..2 {
            for (k, (v, mv)) in out.iter().enumerate() {
                let s = dot(&w, mv);
                axpy(-s, v, &mut w);
                r[k][c] += s;
            }
        }
        m_orthogonalize(&mut w, locked, locked_m);
        m_orthogonalize(&mut w, q, mq);
        let mw = apply_m(&w);
        let nrm = dot(&w, &mw).max(0.0).sqrt();
        if nrm <= 1e-10 * scale.max(f64::MIN_POSITIVE) || nrm == 0.0 {
            continue;
        }
        let mut row = vec![0.0; nb];
        row[c] = nrm;
        r.push(row);
        let inv = 1.0 / nrm;
        out.push((w.iter().map(|x| x * inv).collect(), mw.iter().map(|x| x * inv).collect()));
    }
    (out, r)
}

/// Dense symmetric-definite generalized eigenproblem via Cholesky of `M`.
pub fn dense_generalized_eigen(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidValue { key: "M".into(), msg: "not positive definite".into() })?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidValue { key: "M".into(), msg: "singular".into() })?;
    let c = &linv * a * linv.transpose();
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = linv.transpose() * eig.eigenvectors.select_columns(&idx);
    Ok((vals, vecs))
}
