//! Rank-4 elasticity tensors in two dimensions.
//!
//! Voigt convention used throughout the crate: strains are packed as
//! `(e11, e22, 2 e12)` (engineering shear) and stresses as `(s11, s22, s12)`,
//! so the 3x3 Voigt matrix `D` satisfies `C e : e = eps^T D eps`.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Voigt index of a symmetric index pair.
const fn voigt_index(i: usize, j: usize) -> usize {
    if i == j {
        i
    } else {
        2
    }
}

/// Index pairs for each Voigt slot.
const VOIGT_PAIRS: [(usize, usize); 3] = [(0, 0), (1, 1), (0, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticityTensor4 {
    /// `c[i][j][p][q]`.
    pub c: [[[[f64; 2]; 2]; 2]; 2],
}

impl Default for ElasticityTensor4 {
    fn default() -> Self {
        Self::zero()
    }
}

impl ElasticityTensor4 {
    pub fn zero() -> Self {
        Self { c: [[[[0.0; 2]; 2]; 2]; 2] }
    }

    /// Isotropic tensor `lambda d_ij d_pq + mu (d_ip d_jq + d_iq d_jp)`.
    pub fn isotropic(lambda: f64, mu: f64) -> Self {
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let mut t = Self::zero();
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        t.c[i][j][p][q] =
                            lambda * d(i, j) * d(p, q) + mu * (d(i, p) * d(j, q) + d(i, q) * d(j, p));
                    }
                }
            }
        }
        t
    }

    /// Builds the tensor from a Voigt matrix. Only the symmetric part of
    /// `voigt` is used, so the result always has both symmetries.
    pub fn from_voigt(voigt: &Matrix3<f64>) -> Self {
        let v = 0.5 * (voigt + voigt.transpose());
        let mut t = Self::zero();
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        t.c[i][j][p][q] = v[(voigt_index(i, j), voigt_index(p, q))];
                    }
                }
            }
        }
        t
    }

    pub fn to_voigt(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|a, b| {
            let (i, j) = VOIGT_PAIRS[a];
            let (p, q) = VOIGT_PAIRS[b];
            self.c[i][j][p][q]
        })
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut t = *self;
        t.c.iter_mut()
            .flatten()
            .flatten()
            .flatten()
            .for_each(|x| *x *= s);
        t
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut t = *self;
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        t.c[i][j][p][q] += other.c[i][j][p][q];
                    }
                }
            }
        }
        t
    }

    /// `C eta : eta` for a (not necessarily symmetric) 2x2 matrix `eta`.
    pub fn quadratic_form(&self, eta: &[[f64; 2]; 2]) -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        s += self.c[i][j][p][q] * eta[p][q] * eta[i][j];
                    }
                }
            }
        }
        s
    }

    /// Largest violation of the minor and major symmetries.
    pub fn symmetry_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        let x = self.c[i][j][p][q];
                        d = d
                            .max((x - self.c[j][i][p][q]).abs())
                            .max((x - self.c[i][j][q][p]).abs())
                            .max((x - self.c[p][q][i][j]).abs());
                    }
                }
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.c
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Best constant `nu` with `C eta : eta >= nu |eta|^2` over symmetric `eta`.
    ///
    /// Computed from the Mandel form (shear rows scaled by sqrt 2), whose
    /// eigenvalues are exactly the extremal Rayleigh quotients.
    pub fn coercivity(&self) -> f64 {
        let v = self.to_voigt();
        let s = std::f64::consts::SQRT_2;
        let scale = [1.0, 1.0, s];
        let mandel = Matrix3::from_fn(|a, b| v[(a, b)] * scale[a] * scale[b]);
        let mandel = 0.5 * (mandel + mandel.transpose());
        SymmetricEigen::new(mandel).eigenvalues.min()
    }
}

/// Converts a symmetric strain `eta` to its Voigt vector `(e11, e22, 2 e12)`.
pub fn strain_to_voigt(eta: &[[f64; 2]; 2]) -> [f64; 3] {
    [eta[0][0], eta[1][1], eta[0][1] + eta[1][0]]
}

/// Inverse of [`strain_to_voigt`].
pub fn voigt_to_strain(v: &[f64; 3]) -> [[f64; 2]; 2] {
    [[v[0], 0.5 * v[2]], [0.5 * v[2], v[1]]]
}

/// Minimum eigenvalue of the symmetric part of a Voigt matrix.
pub fn min_voigt_eigenvalue(v: &Matrix3<f64>) -> f64 {
    SymmetricEigen::new(0.5 * (v + v.transpose())).eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn isotropic_voigt_entries() {
        let v = ElasticityTensor4::isotropic(1.0, 1.0).to_voigt();
        let expected = Matrix3::new(3.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0);
        assert!((v - expected).abs().max() < 1e-15);
    }

    #[test]
    fn isotropic_is_symmetric_and_coercive() {
        let t = ElasticityTensor4::isotropic(1.0, 0.5);
        assert!(t.symmetry_defect() < 1e-14);
        // eigenvalues of the Mandel matrix: 2 mu and 2 lambda + 2 mu
        assert!((t.coercivity() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_bulk_tensor_is_only_semidefinite() {
        let t = ElasticityTensor4::isotropic(1.0, 0.0);
        assert!(t.coercivity().abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn voigt_round_trip(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64,
                            d in 0.1..5.0f64, e in -5.0..5.0f64, f in 0.1..5.0f64) {
            let v = Matrix3::new(d + 10.0, a, b, a, f + 10.0, c, b, c, e.abs() + 1.0);
            let t = ElasticityTensor4::from_voigt(&v);
            prop_assert!((t.to_voigt() - v).abs().max() < 1e-14);
            prop_assert!(t.symmetry_defect() < 1e-14);
        }

        #[test]
        fn quadratic_form_matches_voigt(l in 0.1..3.0f64, m in 0.1..3.0f64,
                                         x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
            let t = ElasticityTensor4::isotropic(l, m);
            let eta = [[x, z], [z, y]];
            let ev = strain_to_voigt(&eta);
            let v = t.to_voigt();
            let mut q = 0.0;
            for a in 0..3 { for b in 0..3 { q += ev[a] * v[(a, b)] * ev[b]; } }
            prop_assert!((q - t.quadratic_form(&eta)).abs() < 1e-12);
            prop_assert_eq!(voigt_to_strain(&ev), eta);
        }
    }
}
