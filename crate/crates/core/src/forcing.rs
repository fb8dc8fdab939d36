//! Two-scale body forces `f(x, y)` with `y` in the unit cell.

use crate::mesh::Point;
use crate::quadrature::gauss_legendre_unit;
use std::fmt;
use std::sync::Arc;

type ForceFn = dyn Fn(Point, Point) -> [f64; 2] + Send + Sync;

/// A body force depending on the macro point `x` and the cell point `y`.
/// The fine-scale force is `f(x, x / eps)` with `y` reduced to the cell.
#[derive(Clone)]
pub struct TwoScaleForcing {
    f: Arc<ForceFn>,
    /// No dependence on `y`.
    macroscopic: bool,
}

impl fmt::Debug for TwoScaleForcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TwoScaleForcing").field("macroscopic", &self.macroscopic).finish()
    }
}

impl TwoScaleForcing {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(Point, Point) -> [f64; 2] + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), macroscopic: false }
    }

    pub fn macroscopic<F>(f0: F) -> Self
    where
        F: Fn(Point) -> [f64; 2] + Send + Sync + 'static,
    {
        Self { f: Arc::new(move |x, _| f0(x)), macroscopic: true }
    }

    pub fn zero() -> Self {
        Self::macroscopic(|_| [0.0, 0.0])
    }

    pub fn is_macroscopic(&self) -> bool {
        self.macroscopic
    }

    pub fn eval(&self, x: Point, y: Point) -> [f64; 2] {
        (self.f)(x, y)
    }

    /// `f(x, x / eps)` for a cell lattice anchored at `origin`.
    pub fn fine(&self, x: Point, eps: f64, origin: Point) -> [f64; 2] {
        let cell = |v: f64, o: f64| {
            let t = (v - o) / eps;
            t - t.floor()
        };
        (self.f)(x, [cell(x[0], origin[0]), cell(x[1], origin[1])])
    }

    /// `int_Q f(x, y) dy` by an `n x n` Gauss rule.
    pub fn cell_mean(&self, x: Point, n: usize) -> [f64; 2] {
        if self.macroscopic {
            return (self.f)(x, [0.5, 0.5]);
        }
        let g = gauss_legendre_unit(n);
        let mut s = [0.0; 2];
        for &(a, wa) in &g {
            for &(b, wb) in &g {
                let v = (self.f)(x, [a, b]);
                s[0] += wa * wb * v[0];
                s[1] += wa * wb * v[1];
            }
        }
        s
    }
}

/// Gauss points per direction for cell means.
pub const CELL_MEAN_POINTS: usize = 12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_mean_of_periodic_gradient_vanishes() {
        use std::f64::consts::PI;
        let f = TwoScaleForcing::new(|_, y| {
            [2.0 * PI * (2.0 * PI * y[0]).cos() * (2.0 * PI * y[1]).cos(), -2.0 * PI * (2.0 * PI * y[0]).sin() * (2.0 * PI * y[1]).sin()]
        });
        let m = f.cell_mean([0.3, 0.2], CELL_MEAN_POINTS);
        assert!(m[0].abs() < 1e-12 && m[1].abs() < 1e-12);
    }

    #[test]
    fn fine_evaluation_reduces_to_the_cell() {
        let f = TwoScaleForcing::new(|_, y| [y[0], y[1]]);
        let v = f.fine([0.30, 0.55], 0.25, [0.0, 0.0]);
        assert!((v[0] - 0.2).abs() < 1e-12 && (v[1] - 0.2).abs() < 1e-12);
    }
}
