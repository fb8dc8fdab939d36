//! Sparse `L D L^T` factorization without pivoting (up-looking, elimination
//! tree based) for symmetric matrices that are definite or quasi-definite
//! enough to factor in a fill-reducing order.
//!
//! The inertia of `D` equals the inertia of the matrix, which the spectrum
//! slicing code uses to count eigenvalues below a shift.

use super::ordering::nested_dissection;
use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, LinearOperator};

/// Ordering and elimination tree of a sparsity pattern; reusable for any
/// matrix with the same pattern.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    parent: Vec<usize>,
    col_ptr: Vec<usize>,
    pattern_row_ptr: Vec<usize>,
    pattern_col_idx: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl LdlSymbolic {
    pub fn analyze(a: &CsrMatrix) -> Self {
        let perm = nested_dissection(a);
        Self::with_ordering(a, perm)
    }

    pub fn with_ordering(a: &CsrMatrix, perm: Vec<usize>) -> Self {
        let n = a.nrows();
        let mut pinv = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for (j, _) in a.row(perm[k]) {
                let mut i = pinv[j];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == NONE {
                            parent[i] = k;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut col_ptr = vec![0; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + lnz[k];
        }
        Self {
            n,
            perm,
            pinv,
            parent,
            col_ptr,
            pattern_row_ptr: a.row_ptr().to_vec(),
            pattern_col_idx: a.col_idx().to_vec(),
        }
    }

    pub fn nnz_l(&self) -> usize {
        self.col_ptr[self.n]
    }

    /// Numeric factorization. `a` must have the analyzed pattern.
    pub fn factor(&self, a: &CsrMatrix) -> Result<SparseLdl> {
        let n = self.n;
        if a.nrows() != n || a.row_ptr() != &self.pattern_row_ptr[..] || a.col_idx() != &self.pattern_col_idx[..] {
            return Err(Error::IncompatibleInputs("matrix pattern differs from the analyzed one".into()));
        }
        let nnz = self.nnz_l();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for (j, v) in a.row(self.perm[k]) {
                let mut i = self.pinv[j];
                if i <= k {
                    y[i] += v;
                    let mut len = 0;
                    while flag[i] != k {
                        pattern[len] = i;
                        len += 1;
                        flag[i] = k;
                        i = self.parent[i];
                    }
                    while len > 0 {
                        top -= 1;
                        len -= 1;
                        pattern[top] = pattern[len];
                    }
                }
            }
            let mut dk = y[k];
            y[k] = 0.0;
            while top < n {
                let i = pattern[top];
                top += 1;
                let yi = y[i];
                y[i] = 0.0;
                let start = self.col_ptr[i];
                let end = start + lnz[i];
                for p in start..end {
                    y[li[p]] -= lx[p] * yi;
                }
                let lki = yi / d[i];
                dk -= lki * yi;
                li[end] = k;
                lx[end] = lki;
                lnz[i] += 1;
            }
            if dk == 0.0 || !dk.is_finite() || dk.abs() < 1e-15 * scale {
                return Err(Error::ZeroPivot(k));
            }
            d[k] = dk;
        }
        Ok(SparseLdl { symbolic: self.clone_light(), li, lx, d })
    }

    fn clone_light(&self) -> LdlPermutation {
        LdlPermutation { perm: self.perm.clone(), col_ptr: self.col_ptr.clone() }
    }
}

#[derive(Debug, Clone)]
struct LdlPermutation {
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
}

/// Numeric factor `P A P^T = L D L^T`.
#[derive(Debug, Clone)]
pub struct SparseLdl {
    symbolic: LdlPermutation,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl SparseLdl {
    /// Analyzes and factors in one step.
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        LdlSymbolic::analyze(a).factor(a)
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// Numbers of negative and positive pivots.
    pub fn inertia(&self) -> (usize, usize) {
        let neg = self.d.iter().filter(|&&x| x < 0.0).count();
        (neg, self.d.len() - neg)
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let perm = &self.symbolic.perm;
        let cp = &self.symbolic.col_ptr;
        let mut x: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in cp[j]..cp[j + 1] {
                    x[self.li[p]] -= self.lx[p] * xj;
                }
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in cp[j]..cp[j + 1] {
                s -= self.lx[p] * x[self.li[p]];
            }
            x[j] = s;
        }
        for (k, &p) in perm.iter().enumerate() {
            b[p] = x[k];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// The factor viewed as the operator `A^{-1}`.
impl LinearOperator for SparseLdl {
    fn nrows(&self) -> usize {
        self.dim()
    }
    fn ncols(&self) -> usize {
        self.dim()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
        self.solve_in_place(y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::TripletBuilder;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            t.push(i, i, 4.0 + rng.random::<f64>());
            for _ in 0..2 {
                let j = rng.random_range(0..n);
                if j != i {
                    let v = rng.random::<f64>() - 0.5;
                    t.push(i, j, v);
                    t.push(j, i, v);
                    t.push(i, i, v.abs());
                    t.push(j, j, v.abs());
                }
            }
        }
        t.build()
    }

    #[test]
    fn solves_match_dense() {
        for seed in 0..5 {
            let a = random_spd(300, seed);
            let f = SparseLdl::new(&a).unwrap();
            let b: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&b);
            let dense = DMatrix::from_fn(300, 300, |i, j| a.get(i, j));
            let xd = dense.lu().solve(&DVector::from_vec(b.clone())).unwrap();
            let err = (DVector::from_vec(x) - xd).amax();
            assert!(err < 1e-11, "{err}");
            assert_eq!(f.inertia(), (0, 300));
        }
    }

    #[test]
    fn inertia_of_shifted_matrix() {
        let a = random_spd(120, 7);
        let dense = DMatrix::from_fn(120, 120, |i, j| a.get(i, j));
        let eig = dense.symmetric_eigen().eigenvalues;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let sigma = 0.5 * (ev[40] + ev[41]);
        let shifted = a.add_scaled(&CsrMatrix::identity(120), -sigma);
        let f = SparseLdl::new(&shifted).unwrap();
        assert_eq!(f.inertia().0, 41);
    }

    #[test]
    fn pattern_mismatch_is_rejected() {
        let a = random_spd(50, 1);
        let s = LdlSymbolic::analyze(&a);
        assert!(s.factor(&CsrMatrix::identity(50)).is_err());
    }
}
