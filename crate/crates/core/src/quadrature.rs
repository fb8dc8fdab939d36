//! Triangle quadrature in barycentric coordinates.

/// Quadrature point: barycentric coordinates and weight, with weights
/// normalized to sum to one (multiply by the triangle area).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    pub bary: [f64; 3],
    pub weight: f64,
}

const A1: f64 = 0.445_948_490_915_965;
const W1: f64 = 0.223_381_589_678_011;
const A2: f64 = 0.091_576_213_509_771;
const W2: f64 = 0.109_951_743_655_322;

/// Six-point rule, exact for polynomials of degree 4.
pub fn six_point() -> [QuadPoint; 6] {
    let b1 = 1.0 - 2.0 * A1;
    let b2 = 1.0 - 2.0 * A2;
    [
        QuadPoint { bary: [A1, A1, b1], weight: W1 },
        QuadPoint { bary: [A1, b1, A1], weight: W1 },
        QuadPoint { bary: [b1, A1, A1], weight: W1 },
        QuadPoint { bary: [A2, A2, b2], weight: W2 },
        QuadPoint { bary: [A2, b2, A2], weight: W2 },
        QuadPoint { bary: [b2, A2, A2], weight: W2 },
    ]
}

/// Centroid rule, exact for degree 1.
pub fn centroid() -> [QuadPoint; 1] {
    [QuadPoint { bary: [1.0 / 3.0; 3], weight: 1.0 }]
}

/// Gauss-Legendre nodes and weights on `[0, 1]` by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = x;
                p0 = 1.0;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out
}

/// Collapsed tensor-product Gauss rule on the triangle (Duffy map), exact
/// for degree `2n - 2`.
pub fn duffy(n: usize) -> Vec<QuadPoint> {
    let g = gauss_legendre_unit(n);
    let mut pts = Vec::with_capacity(n * n);
    for &(u, wu) in &g {
        for &(v, wv) in &g {
            let l1 = u;
            let l2 = (1.0 - u) * v;
            // reference triangle has area 1/2; normalize weights to sum 1
            pts.push(QuadPoint { bary: [1.0 - l1 - l2, l1, l2], weight: 2.0 * wu * wv * (1.0 - u) });
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(rule: &[QuadPoint], f: impl Fn(f64, f64) -> f64) -> f64 {
        rule.iter().map(|q| q.weight * f(q.bary[1], q.bary[2])).sum::<f64>() * 0.5
    }

    // exact integral of x^a y^b over the reference triangle: a! b! / (a+b+2)!
    fn monomial(a: u32, b: u32) -> f64 {
        let f = |k: u32| (1..=k).map(f64::from).product::<f64>();
        f(a) * f(b) / f(a + b + 2)
    }

    #[test]
    fn weights_sum_to_one() {
        let s: f64 = six_point().iter().map(|q| q.weight).sum();
        assert!((s - 1.0).abs() < 1e-14);
        let s: f64 = duffy(5).iter().map(|q| q.weight).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn six_point_exact_to_degree_four() {
        for a in 0..=4 {
            for b in 0..=(4 - a) {
                let q = integrate(&six_point(), |x, y| x.powi(a as i32) * y.powi(b as i32));
                assert!((q - monomial(a, b)).abs() < 1e-14, "x^{a} y^{b}");
            }
        }
    }

    #[test]
    fn duffy_is_high_order() {
        for a in 0..=8 {
            for b in 0..=(8 - a) {
                let q = integrate(&duffy(6), |x, y| x.powi(a as i32) * y.powi(b as i32));
                assert!((q - monomial(a, b)).abs() < 1e-15, "x^{a} y^{b}");
            }
        }
    }
}
