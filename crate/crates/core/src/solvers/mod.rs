//! Linear and eigenvalue solvers for the assembled systems.

pub mod cg;
pub mod lanczos;
pub mod ldl;
pub mod minres;
pub mod ordering;

pub use cg::{cg_solve, CgOptions};
pub use ldl::{LdlSymbolic, SparseLdl};
pub use minres::{minres, minres_saddle_solve, MinresOptions};

use crate::error::{Error, Result};
use crate::sparse::{dot, norm2, CsrMatrix, LinearOperator};
use lanczos::{block_lanczos, LanczosOptions, RitzPair, ShiftInvert};
use std::fmt::Write as _;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Relative 2-norm residual.
    pub final_residual: f64,
    pub converged: bool,
    /// Norm of the solution component along the supplied kernel basis (CG)
    /// or of the constraint residual (saddle solves).
    pub range_defect: f64,
    /// Residual per iteration when requested.
    pub history: Vec<f64>,
    /// CG energy functional per iteration when requested.
    pub energy: Vec<f64>,
}

impl SolveReport {
    /// `iter,residual` lines.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iter,residual\n");
        for (i, r) in self.history.iter().enumerate() {
            let _ = writeln!(s, "{},{:.16e}", i + 1, r);
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct EigReport {
    /// Ascending.
    pub values: Vec<f64>,
    /// M-orthonormal.
    pub vectors: Vec<Vec<f64>>,
    /// Pressures for constrained problems (empty otherwise).
    pub pressures: Vec<Vec<f64>>,
    /// `||A v - lambda M v (+ B^T p)|| / ||A v||`.
    pub residuals: Vec<f64>,
    /// Pairs rejected as spurious by the constraint test.
    pub filtered_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigOptions {
    pub tol: f64,
    pub lanczos: LanczosOptions,
    /// Confirm completeness with an inertia count (direct problems only).
    pub verify_count: bool,
    pub max_restarts: usize,
}

impl Default for EigOptions {
    fn default() -> Self {
        Self { tol: 1e-8, lanczos: LanczosOptions::default(), verify_count: true, max_restarts: 6 }
    }
}

/// Stokes-type constraint `B v = 0` for constrained eigenproblems.
pub struct SaddleConstraint<'a> {
    pub b: &'a CsrMatrix,
    pub pressure_mass: &'a CsrMatrix,
    pub minres: MinresOptions,
}

fn spectral_scale(a: &CsrMatrix, m: &CsrMatrix) -> f64 {
    let da = a.diagonal();
    let dm = m.diagonal();
    da.iter().zip(&dm).filter(|(_, m)| **m > 0.0).map(|(a, m)| a / m).fold(0.0, f64::max).max(1e-300)
}

/// Factors `A - sigma M`, nudging the shift by `1e-3` of the spectral scale
/// (up to a few times) if it hits an eigenvalue.
fn factor_shifted(sym: &LdlSymbolic, a: &CsrMatrix, m: &CsrMatrix, sigma: f64, scale: f64) -> Result<(SparseLdl, f64)> {
    let mut s = sigma;
    for attempt in 0..4 {
        match sym.factor(&a.add_scaled(m, -s)) {
            Ok(f) => return Ok((f, s)),
            Err(Error::ZeroPivot(_)) => {
                s = sigma - 1e-3 * scale * (attempt + 1) as f64;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::InnerSolveFailure(format!("shift {sigma} could not be factored")))
}

fn m_normalize_pairs(pairs: &mut [RitzPair], m: &CsrMatrix) {
    for p in pairs.iter_mut() {
        let mv = m.apply_alloc(&p.vector);
        let nrm = dot(&p.vector, &mv).sqrt();
        p.vector.iter_mut().for_each(|x| *x /= nrm);
    }
}

/// Number of eigenvalues of `(A, M)` strictly below `x`.
pub fn count_below(sym: &LdlSymbolic, a: &CsrMatrix, m: &CsrMatrix, x: f64) -> Result<usize> {
    let f = sym.factor(&a.add_scaled(m, -x))?;
    Ok(f.inertia().0)
}

fn residual(a: &CsrMatrix, m: &CsrMatrix, lambda: f64, v: &[f64]) -> f64 {
    let av = a.apply_alloc(v);
    let mv = m.apply_alloc(v);
    let r: Vec<f64> = av.iter().zip(&mv).map(|(x, y)| x - lambda * y).collect();
    norm2(&r) / norm2(&av).max(f64::MIN_POSITIVE)
}

/// The `k` smallest positive eigenvalues of `A x = lambda M x`, assuming
/// `shift` lies below them. With a constraint, only fields satisfying
/// `B v = 0` are admissible and the shifted solves go through MINRES.
pub fn eig_generalized(
    a: &CsrMatrix,
    m: &CsrMatrix,
    k: usize,
    shift: f64,
    constraint: Option<&SaddleConstraint<'_>>,
    opts: &EigOptions,
) -> Result<EigReport> {
    if k == 0 {
        return Err(Error::InvalidValue { key: "k".into(), msg: "must be at least 1".into() });
    }
    match constraint {
        None => eig_direct(a, m, k, shift, opts),
        Some(c) => eig_constrained(a, m, k, shift, c, opts),
    }
}

fn eig_direct(a: &CsrMatrix, m: &CsrMatrix, k: usize, shift: f64, opts: &EigOptions) -> Result<EigReport> {
    let n = a.nrows();
    let scale = spectral_scale(a, m);
    let sym = LdlSymbolic::analyze(&a.add_scaled(m, 0.0));
    let (fac, sigma) = factor_shifted(&sym, a, m, shift, scale)?;
    let zero_level = 1e-10 * scale;
    let apply_t = |x: &[f64]| -> Result<Vec<f64>> { Ok(fac.solve(&m.apply_alloc(x))) };
    let apply_m = |x: &[f64]| m.apply_alloc(x);
    let prob = ShiftInvert { n, sigma, apply_t: &apply_t, apply_m: &apply_m };
    let accept = |l: f64| l > zero_level;
    let mut found: Vec<RitzPair> = Vec::new();
    let mut lopts = opts.lanczos;
    lopts.max_basis = lopts.max_basis.max(3 * k + 4 * lopts.block_size);
    for restart in 0..=opts.max_restarts {
        let locked: Vec<Vec<f64>> = found.iter().map(|p| p.vector.clone()).collect();
        let locked_m: Vec<Vec<f64>> = locked.iter().map(|v| m.apply_alloc(v)).collect();
        lopts.seed = opts.lanczos.seed.wrapping_add(restart as u64);
        let mut new = block_lanczos(&prob, k.saturating_sub(found.len()), &accept, &locked, &locked_m, &[], &lopts)?;
        m_normalize_pairs(&mut new, m);
        found.extend(new);
        found.sort_by(|x, y| x.value.partial_cmp(&y.value).unwrap());
        if found.len() < k {
            continue;
        }
        found.truncate(k);
        if !opts.verify_count {
            break;
        }
        // every eigenvalue strictly below the k-th one must have been found
        let top = found[k - 1].value;
        let cut = top - 1e-8 * top.abs().max(scale * 1e-12);
        let below_cut = count_below(&sym, a, m, cut)?.saturating_sub(count_below(&sym, a, m, zero_level)?);
        let have = found.iter().filter(|p| p.value < cut).count();
        if below_cut <= have {
            break;
        }
        if restart == opts.max_restarts {
            return Err(Error::NotConverged { found: have, wanted: below_cut });
        }
        // drop the top pairs so the restart can look below them
        found.truncate(have);
    }
    if found.len() < k {
        return Err(Error::NotConverged { found: found.len(), wanted: k });
    }
    finish_direct(a, m, found, opts)
}

fn finish_direct(a: &CsrMatrix, m: &CsrMatrix, pairs: Vec<RitzPair>, opts: &EigOptions) -> Result<EigReport> {
    let mut rep = EigReport::default();
    for p in pairs {
        let r = residual(a, m, p.value, &p.vector);
        if r > opts.tol {
            return Err(Error::NotConverged { found: rep.values.len(), wanted: rep.values.len() + 1 });
        }
        rep.values.push(p.value);
        rep.residuals.push(r);
        rep.vectors.push(p.vector);
    }
    Ok(rep)
}

fn eig_constrained(
    a: &CsrMatrix,
    m: &CsrMatrix,
    k: usize,
    shift: f64,
    c: &SaddleConstraint<'_>,
    opts: &EigOptions,
) -> Result<EigReport> {
    let n = a.nrows();
    let shifted = a.add_scaled(m, -shift);
    // the shifted block preconditions itself when definite; otherwise fall
    // back to A
    let pre = match SparseLdl::new(&shifted) {
        Ok(f) if f.inertia().0 == 0 => f,
        _ => SparseLdl::new(a)?,
    };
    let np = c.b.nrows();
    let zeros = vec![0.0; np];
    let solve = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let rhs = m.apply_alloc(x);
        let (v, p, _) = minres_saddle_solve(&shifted, c.b, &rhs, &zeros, &pre, c.pressure_mass, &c.minres)
            .map_err(|e| Error::InnerSolveFailure(e.to_string()))?;
        Ok((v, p))
    };
    let apply_t = |x: &[f64]| -> Result<Vec<f64>> { Ok(solve(x)?.0) };
    let apply_m = |x: &[f64]| m.apply_alloc(x);
    let prob = ShiftInvert { n, sigma: shift, apply_t: &apply_t, apply_m: &apply_m };
    let accept = |l: f64| l > shift;
    let mut lopts = opts.lanczos;
    lopts.max_basis = lopts.max_basis.max(3 * k + 4 * lopts.block_size);
    let mut pairs = block_lanczos(&prob, k, &accept, &[], &[], &[], &lopts)?;
    m_normalize_pairs(&mut pairs, m);
    let mut rep = EigReport::default();
    pairs.sort_by(|x, y| x.value.partial_cmp(&y.value).unwrap());
    for p in pairs {
        let vnorm = norm2(&p.vector);
        let bv = c.b.apply_alloc(&p.vector);
        if norm2(&bv) > 1e-8 * vnorm {
            rep.filtered_count += 1;
            continue;
        }
        if rep.values.len() == k {
            break;
        }
        // pressure of the pair from one more shifted solve
        let (tv, tp) = solve(&p.vector)?;
        let theta = dot(&tv, &m.apply_alloc(&p.vector));
        let pres: Vec<f64> = tp.iter().map(|x| x / theta).collect();
        let av = a.apply_alloc(&p.vector);
        let mv = m.apply_alloc(&p.vector);
        let btp = minres::transpose_apply(c.b, &pres, n);
        let r: Vec<f64> = (0..n).map(|i| av[i] - p.value * mv[i] + btp[i]).collect();
        let res = norm2(&r) / norm2(&av).max(f64::MIN_POSITIVE);
        rep.values.push(p.value);
        rep.residuals.push(res);
        rep.vectors.push(p.vector);
        rep.pressures.push(pres);
    }
    if rep.values.len() < k {
        return Err(Error::NotConverged { found: rep.values.len(), wanted: k });
    }
    Ok(rep)
}

/// All eigenvalues of `(A, M)` in `[lo, hi)` by spectrum slicing: inertia
/// counts split the interval into slices holding at most `per_slice`
/// eigenvalues, and each slice is solved by shift-invert Lanczos at its
/// midpoint until the counted number of pairs is found.
pub fn eigs_in_interval(
    a: &CsrMatrix,
    m: &CsrMatrix,
    lo: f64,
    hi: f64,
    per_slice: usize,
    opts: &EigOptions,
) -> Result<EigReport> {
    let n = a.nrows();
    let sym = LdlSymbolic::analyze(&a.add_scaled(m, 0.0));
    let scale = spectral_scale(a, m);
    let count = |x: f64| -> Result<(usize, f64)> {
        let (f, s) = factor_shifted(&sym, a, m, x, scale * 1e-6)?;
        Ok((f.inertia().0, s))
    };
    let (c_lo, lo) = count(lo)?;
    let (c_hi, hi) = count(hi)?;
    let total = c_hi - c_lo;
    let mut slices: Vec<(f64, f64, usize)> = Vec::new();
    let mut stack = vec![(lo, hi, c_lo, c_hi)];
    while let Some((a0, b0, ca, cb)) = stack.pop() {
        let c = cb - ca;
        if c == 0 {
            continue;
        }
        if c <= per_slice.max(1) || (b0 - a0) < 1e-9 * b0.abs().max(1.0) {
            slices.push((a0, b0, c));
            continue;
        }
        let (cm, mid) = count(0.5 * (a0 + b0))?;
        stack.push((mid, b0, cm, cb));
        stack.push((a0, mid, ca, cm));
    }
    slices.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut all: Vec<RitzPair> = Vec::new();
    for &(s0, s1, c) in &slices {
        let (fac, sigma) = factor_shifted(&sym, a, m, 0.5 * (s0 + s1), scale * 1e-6)?;
        let apply_t = |x: &[f64]| -> Result<Vec<f64>> { Ok(fac.solve(&m.apply_alloc(x))) };
        let apply_m = |x: &[f64]| m.apply_alloc(x);
        let prob = ShiftInvert { n, sigma, apply_t: &apply_t, apply_m: &apply_m };
        let slack = 1e-10 * s1.abs().max(1.0);
        let accept = |l: f64| l >= s0 - slack && l < s1 + slack;
        let mut found: Vec<RitzPair> = Vec::new();
        let mut lopts = opts.lanczos;
        lopts.max_basis = lopts.max_basis.max(3 * c + 4 * lopts.block_size);
        for restart in 0..=opts.max_restarts {
            let locked: Vec<Vec<f64>> = found.iter().map(|p| p.vector.clone()).collect();
            let locked_m: Vec<Vec<f64>> = locked.iter().map(|v| m.apply_alloc(v)).collect();
            lopts.seed = opts.lanczos.seed.wrapping_add(restart as u64 * 7919 + s0.to_bits() % 1000);
            let mut new = block_lanczos(&prob, c - found.len(), &accept, &locked, &locked_m, &[], &lopts)?;
            m_normalize_pairs(&mut new, m);
            found.extend(new);
            if found.len() >= c {
                break;
            }
        }
        if found.len() < c {
            return Err(Error::NotConverged { found: all.len() + found.len(), wanted: total });
        }
        found.sort_by(|x, y| x.value.partial_cmp(&y.value).unwrap());
        all.extend(found);
    }
    all.sort_by(|x, y| x.value.partial_cmp(&y.value).unwrap());
    // pairs accepted within the slack of a slice boundary may appear twice
    let mut dedup: Vec<RitzPair> = Vec::with_capacity(all.len());
    for p in all {
        let dup = dedup.iter().rev().take_while(|q| (p.value - q.value).abs() <= 1e-8 * p.value.abs().max(1.0)).any(|q| {
            let mq = m.apply_alloc(&q.vector);
            dot(&p.vector, &mq).abs() > 0.5
        });
        if !dup {
            dedup.push(p);
        }
    }
    dedup.retain(|p| p.value >= lo && p.value < hi);
    finish_direct(a, m, dedup, opts)
}
