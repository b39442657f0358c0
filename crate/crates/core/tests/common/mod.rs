//! Independent reference computations shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use promod::clothoid::{Clothoid, Pose};
use promod::linalg::Mat;
use promod::track::TrackSpec;

/// Composite Simpson rule with `n` (rounded up to even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

pub fn fresnel_quadrature(s: f64) -> (f64, f64) {
    let n = 200_000;
    let k = std::f64::consts::FRAC_PI_2;
    (
        simpson(|u| (k * u * u).cos(), 0.0, s, n),
        simpson(|u| (k * u * u).sin(), 0.0, s, n),
    )
}

/// Clothoid point at arc length `s` by integrating the heading directly.
pub fn clothoid_quadrature(c: &Clothoid, s: f64) -> (f64, f64, f64) {
    let theta = |u: f64| c.theta0 + c.kappa * u + 0.5 * c.kappa_prime * u * u;
    let turning = (c.kappa.abs() + c.kappa_prime.abs() * s) * s;
    let n = (20_000.0 * (1.0 + turning)).min(2e6) as usize;
    let x = c.x0 + simpson(|u| theta(u).cos(), 0.0, s, n);
    let y = c.y0 + simpson(|u| theta(u).sin(), 0.0, s, n);
    (x, y, theta(s))
}

pub fn angle_diff(a: f64, b: f64) -> f64 {
    (a - b + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
}

/// Largest of position and heading mismatch between the clothoid's end,
/// integrated independently, and `target`.
pub fn endpoint_residual(c: &Clothoid, target: Pose) -> f64 {
    let (x, y, th) = clothoid_quadrature(c, c.length);
    (x - target.x)
        .abs()
        .max((y - target.y).abs())
        .max(angle_diff(th, target.theta).abs())
}

pub fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows, m.cols, |i, j| m[(i, j)])
}

/// Ridge solution through nalgebra's LU: `(Φ Φᵀ + ε I) w = Φ T`.
pub fn ridge_oracle(target: &Mat, phi: &Mat, eps: f64) -> DMatrix<f64> {
    let p = to_na(phi);
    let t = to_na(target);
    let a = &p * p.transpose() + DMatrix::identity(p.nrows(), p.nrows()) * eps;
    a.lu().solve(&(&p * t)).expect("regularized system is invertible")
}

/// Naive two-pass mean and MLE covariance in input order.
pub fn gaussian_oracle(ws: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = ws.len() as f64;
    let dim = ws[0].len();
    let mut mu = DVector::zeros(dim);
    for w in ws {
        mu += DVector::from_column_slice(w);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for w in ws {
        let d = DVector::from_column_slice(w) - &mu;
        cov += &d * d.transpose();
    }
    (mu, cov / n)
}

/// Nearest centerline sample on a dense arc-length grid.
pub fn localize_brute(track: &TrackSpec, p: [f64; 2], step: f64) -> (f64, f64) {
    let total = track.total_length();
    let n = (total / step).ceil() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..n {
        let s = i as f64 * total / n as f64;
        let (x, y, _) = track.pose_at(s);
        let d2 = (x - p[0]).powi(2) + (y - p[1]).powi(2);
        if d2 < best.0 {
            best = (d2, s);
        }
    }
    (best.1, best.0.sqrt())
}

/// Kruskal–Wallis H for two groups without ties, straight from the rank-sum
/// definition.
pub fn kw_no_ties(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, usize)> = a.iter().map(|&v| (v, 0)).chain(b.iter().map(|&v| (v, 1))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len() as f64;
    let mut r = [0.0; 2];
    for (i, (_, g)) in all.iter().enumerate() {
        r[*g] += (i + 1) as f64;
    }
    12.0 / (n * (n + 1.0)) * (r[0] * r[0] / a.len() as f64 + r[1] * r[1] / b.len() as f64) - 3.0 * (n + 1.0)
}
