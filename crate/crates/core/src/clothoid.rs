//! Fresnel integrals, clothoid evaluation, G1 Hermite clothoid fitting and
//! the two-clothoid local path descriptor.
//!
//! The generalized Fresnel moments and the Newton scheme for the G1 problem
//! follow Bertolazzi and Frego, "Fast and accurate G1 fitting of clothoid
//! curves".

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promp::SampledTrajectory;
use crate::track::wrap_angle;
use crate::vehicle::VehicleState;

const FRESNEL_EPS: f64 = 1e-16;
const FRESNEL_SERIES_MAX: f64 = 1.5;
const FRESNEL_MAX_ITER: usize = 200;

/// Normalized Fresnel integrals `C(s) = ∫₀ˢ cos(πu²/2) du` and
/// `S(s) = ∫₀ˢ sin(πu²/2) du`.
pub fn fresnel(s: f64) -> (f64, f64) {
    let ax = s.abs();
    let (c, sn) = if ax < 1e-150 {
        (ax, 0.0)
    } else if ax <= FRESNEL_SERIES_MAX {
        fresnel_series(ax)
    } else {
        fresnel_continued_fraction(ax)
    };
    if s < 0.0 {
        (-c, -sn)
    } else {
        (c, sn)
    }
}

fn fresnel_series(ax: f64) -> (f64, f64) {
    // Interleaved power series for C and S.
    let fact = FRAC_PI_2 * ax * ax;
    let mut sum = 0.0;
    let mut sums = 0.0;
    let mut sumc = ax;
    let mut sign = 1.0;
    let mut odd = true;
    let mut term = ax;
    let mut n = 3.0;
    for k in 1..=FRESNEL_MAX_ITER {
        term *= fact / k as f64;
        sum += sign * term / n;
        let test = sum.abs() * FRESNEL_EPS;
        if odd {
            sign = -sign;
            sums = sum;
            sum = sumc;
        } else {
            sumc = sum;
            sum = sums;
        }
        if term < test {
            break;
        }
        odd = !odd;
        n += 2.0;
    }
    (sumc, sums)
}

fn fresnel_continued_fraction(ax: f64) -> (f64, f64) {
    // Modified Lentz evaluation of the complementary error function form.
    let one = Complex64::new(1.0, 0.0);
    let pix2 = PI * ax * ax;
    let mut b = Complex64::new(1.0, -pix2);
    let mut cc = Complex64::new(1.0 / f64::MIN_POSITIVE, 0.0);
    let mut d = one / b;
    let mut h = d;
    let mut n = -1.0;
    for _ in 2..=FRESNEL_MAX_ITER {
        n += 2.0;
        let a = -n * (n + 1.0);
        b += Complex64::new(4.0, 0.0);
        d = one / (d * a + b);
        cc = b + Complex64::new(a, 0.0) / cc;
        let del = cc * d;
        h *= del;
        if (del.re - 1.0).abs() + del.im.abs() < FRESNEL_EPS {
            break;
        }
    }
    h *= Complex64::new(ax, -ax);
    let phase = Complex64::new((0.5 * pix2).cos(), (0.5 * pix2).sin());
    let cs = Complex64::new(0.5, 0.5) * (one - phase * h);
    (cs.re, cs.im)
}

/// Fresnel integrals with the first `N` moments: `C[k] = ∫₀ᵗ u^k cos(πu²/2) du`.
fn fresnel_moments<const N: usize>(t: f64) -> ([f64; N], [f64; N]) {
    let mut c = [0.0; N];
    let mut s = [0.0; N];
    let (c0, s0) = fresnel(t);
    c[0] = c0;
    s[0] = s0;
    if N > 1 {
        let tt = FRAC_PI_2 * t * t;
        let (st, ct) = tt.sin_cos();
        c[1] = st / PI;
        s[1] = (1.0 - ct) / PI;
        if N > 2 {
            c[2] = (t * st - s0) / PI;
            s[2] = (c0 - t * ct) / PI;
        }
    }
    (c, s)
}

/// `X_k = ∫₀¹ t^k cos(a t²/2 + b t) dt`, `Y_k` likewise with sin, for
/// `|a|` away from zero.
fn xy_large_a<const N: usize>(a: f64, b: f64) -> ([f64; N], [f64; N]) {
    let s = a.signum();
    let absa = a.abs();
    let z = (absa / PI).sqrt();
    let ell = s * b / (PI * absa).sqrt();
    let g = -0.5 * s * b * b / absa;
    let mut cg = g.cos() / z;
    let mut sg = g.sin() / z;

    let (cl, sl) = fresnel_moments::<N>(ell);
    let (cz, sz) = fresnel_moments::<N>(ell + z);
    let mut x = [0.0; N];
    let mut y = [0.0; N];

    let dc0 = cz[0] - cl[0];
    let ds0 = sz[0] - sl[0];
    x[0] = cg * dc0 - s * sg * ds0;
    y[0] = sg * dc0 + s * cg * ds0;
    if N > 1 {
        cg /= z;
        sg /= z;
        let dc1 = cz[1] - cl[1];
        let ds1 = sz[1] - sl[1];
        let dc = dc1 - ell * dc0;
        let ds = ds1 - ell * ds0;
        x[1] = cg * dc - s * sg * ds;
        y[1] = sg * dc + s * cg * ds;
        if N > 2 {
            let dc2 = cz[2] - cl[2];
            let ds2 = sz[2] - sl[2];
            let dc = dc2 + ell * (ell * dc0 - 2.0 * dc1);
            let ds = ds2 + ell * (ell * ds0 - 2.0 * ds1);
            cg /= z;
            sg /= z;
            x[2] = cg * dc - s * sg * ds;
            y[2] = sg * dc + s * cg * ds;
        }
    }
    (x, y)
}

fn lommel_reduced(mu: f64, nu: f64, b: f64) -> f64 {
    let mut tmp = 1.0 / ((mu + nu + 1.0) * (mu - nu + 1.0));
    let mut res = tmp;
    for n in 1..=100 {
        let n = n as f64;
        tmp *= (-b / (2.0 * n + mu - nu + 1.0)) * (b / (2.0 * n + mu + nu + 1.0));
        res += tmp;
        if tmp.abs() < res.abs() * 1e-50 {
            break;
        }
    }
    res
}

/// Moments for `a = 0`: `X_k = ∫₀¹ t^k cos(b t) dt`, `Y_k` with sin.
fn xy_zero_a(nk: usize, b: f64, x: &mut [f64], y: &mut [f64]) {
    let (sb, cb) = b.sin_cos();
    let b2 = b * b;
    if b.abs() < 1e-3 {
        x[0] = 1.0 - (b2 / 6.0) * (1.0 - (b2 / 20.0) * (1.0 - b2 / 42.0));
        y[0] = (b / 2.0) * (1.0 - (b2 / 12.0) * (1.0 - b2 / 30.0));
    } else {
        x[0] = sb / b;
        y[0] = (1.0 - cb) / b;
    }
    // Forward recurrence is stable while k < 2|b|; Lommel series beyond.
    let mut m = (2.0 * b).abs().floor() as usize;
    if m >= nk {
        m = nk - 1;
    }
    if m < 1 {
        m = 1;
    }
    for k in 1..m {
        let kf = k as f64;
        x[k] = (sb - kf * y[k - 1]) / b;
        y[k] = (kf * x[k - 1] - cb) / b;
    }
    if m < nk {
        let a = b * sb;
        let d = sb - b * cb;
        let bb = b * d;
        let c = -b2 * sb;
        let mf = m as f64;
        let mut rla = lommel_reduced(mf + 0.5, 1.5, b);
        let mut rld = lommel_reduced(mf + 0.5, 0.5, b);
        for k in m..nk {
            let kf = k as f64;
            let rlb = lommel_reduced(kf + 1.5, 0.5, b);
            let rlc = lommel_reduced(kf + 1.5, 1.5, b);
            x[k] = (kf * a * rla + bb * rlb + cb) / (1.0 + kf);
            y[k] = (c * rlc + sb) / (2.0 + kf) + d * rld;
            rla = rlc;
            rld = rlb;
        }
    }
}

const SMALL_A_TERMS: usize = 3;

fn xy_small_a<const N: usize>(a: f64, b: f64) -> ([f64; N], [f64; N]) {
    let nkk = N + 4 * SMALL_A_TERMS + 2;
    let mut x0 = [0.0; 24];
    let mut y0 = [0.0; 24];
    xy_zero_a(nkk, b, &mut x0, &mut y0);
    let mut x = [0.0; N];
    let mut y = [0.0; N];
    for j in 0..N {
        x[j] = x0[j] - (a / 2.0) * y0[j + 2];
        y[j] = y0[j] + (a / 2.0) * x0[j + 2];
    }
    let mut t = 1.0;
    let aa = -a * a / 4.0;
    for n in 1..=SMALL_A_TERMS {
        let nf = n as f64;
        t *= aa / (2.0 * nf * (2.0 * nf - 1.0));
        let bf = a / (4.0 * nf + 2.0);
        for j in 0..N {
            let jj = 4 * n + j;
            x[j] += t * (x0[jj] - bf * y0[jj + 2]);
            y[j] += t * (y0[jj] + bf * x0[jj + 2]);
        }
    }
    (x, y)
}

/// Generalized Fresnel moments
/// `∫₀¹ t^k (cos, sin)(a t²/2 + b t + c) dt` for `k < N`.
pub fn generalized_fresnel<const N: usize>(a: f64, b: f64, c: f64) -> ([f64; N], [f64; N]) {
    let (mut x, mut y) = if a.abs() < 0.01 {
        xy_small_a::<N>(a, b)
    } else {
        xy_large_a::<N>(a, b)
    };
    let (sc, cc) = c.sin_cos();
    for k in 0..N {
        let (xx, yy) = (x[k], y[k]);
        x[k] = xx * cc - yy * sc;
        y[k] = xx * sc + yy * cc;
    }
    (x, y)
}

/// A clothoid arc: curvature varies linearly with arc length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clothoid {
    pub x0: f64,
    pub y0: f64,
    pub theta0: f64,
    pub kappa: f64,
    pub kappa_prime: f64,
    pub length: f64,
}

/// Position, heading and curvature at one arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClothoidPoint {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub kappa: f64,
}

impl Clothoid {
    pub fn eval(&self, s: f64) -> Result<ClothoidPoint> {
        if !(0.0..=self.length).contains(&s) {
            return Err(Error::ArcOutOfRange {
                s,
                length: self.length,
            });
        }
        Ok(self.eval_unchecked(s))
    }

    fn eval_unchecked(&self, s: f64) -> ClothoidPoint {
        let (cx, sy) =
            generalized_fresnel::<1>(self.kappa_prime * s * s, self.kappa * s, self.theta0);
        ClothoidPoint {
            x: self.x0 + s * cx[0],
            y: self.y0 + s * sy[0],
            theta: self.theta0 + self.kappa * s + 0.5 * self.kappa_prime * s * s,
            kappa: self.kappa + self.kappa_prime * s,
        }
    }

    pub fn end(&self) -> ClothoidPoint {
        self.eval_unchecked(self.length)
    }
}

/// A planar pose: position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }
}

const G1_MAX_ITER: usize = 100;
const G1_TOL: f64 = 1e-13;
/// Below this chord length a straight segment is returned.
pub const MIN_CHORD: f64 = 0.01;

fn guess_a(phi0: f64, phi1: f64) -> f64 {
    const CF: [f64; 6] = [
        2.989696028701907,
        0.716228953608281,
        -0.458969738821509,
        -0.502821153340377,
        0.261062141752652,
        -0.045854475238709,
    ];
    let x = phi0 / PI;
    let y = phi1 / PI;
    let xy = x * y;
    let (x2, y2) = (x * x, y * y);
    (phi0 + phi1)
        * (CF[0] + xy * (CF[1] + xy * CF[2]) + (CF[3] + CF[4] * xy) * (x2 + y2) + CF[5] * (x2 * x2 + y2 * y2))
}

/// G1 Hermite interpolation: the clothoid from `start` to `end` matching both
/// positions and headings.
pub fn fit_g1(start: Pose, end: Pose) -> Result<Clothoid> {
    let dx = end.x - start.x;
    let dy = end.y - start.y;
    let r = dx.hypot(dy);
    if !r.is_finite() || !start.theta.is_finite() || !end.theta.is_finite() {
        return Err(Error::Invalid("non-finite pose".into()));
    }
    if r < MIN_CHORD {
        return Ok(Clothoid {
            x0: start.x,
            y0: start.y,
            theta0: dy.atan2(dx),
            kappa: 0.0,
            kappa_prime: 0.0,
            length: r.max(f64::MIN_POSITIVE),
        });
    }
    let phi = dy.atan2(dx);
    let phi0 = wrap_angle(start.theta - phi);
    let phi1 = wrap_angle(end.theta - phi);
    let delta = phi1 - phi0;

    let mut a = guess_a(phi0, phi1);
    let mut converged = false;
    for _ in 0..G1_MAX_ITER {
        let (c, s) = generalized_fresnel::<3>(2.0 * a, delta - a, phi0);
        let f = s[0];
        let df = c[2] - c[1];
        let da = f / df;
        if !da.is_finite() {
            break;
        }
        a -= da;
        if da.abs() < G1_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ClothoidNoConvergence {
            iterations: G1_MAX_ITER,
        });
    }
    let (x, _) = generalized_fresnel::<1>(2.0 * a, delta - a, phi0);
    let length = r / x[0];
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::ClothoidNoConvergence {
            iterations: G1_MAX_ITER,
        });
    }
    Ok(Clothoid {
        x0: start.x,
        y0: start.y,
        theta0: start.theta,
        kappa: (delta - a) / length,
        kappa_prime: 2.0 * a / (length * length),
        length,
    })
}

/// The six-parameter two-clothoid local path descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalPathFeatures {
    pub kappa1: f64,
    pub kappa_prime1: f64,
    pub length1: f64,
    pub kappa2: f64,
    pub kappa_prime2: f64,
    pub length2: f64,
}

impl LocalPathFeatures {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.kappa1,
            self.kappa_prime1,
            self.length1,
            self.kappa2,
            self.kappa_prime2,
            self.length2,
        ]
    }
}

/// Below this speed the car's heading replaces its velocity direction.
pub const MIN_TANGENT_SPEED: f64 = 0.1;

/// Start pose of the first clothoid: the centre of gravity, oriented along
/// the velocity vector.
pub fn vehicle_pose(state: &VehicleState) -> Pose {
    let theta = if state.speed() > MIN_TANGENT_SPEED {
        let (vx, vy) = state.world_velocity();
        vy.atan2(vx)
    } else {
        state.psi
    };
    Pose::new(state.x, state.y, theta)
}

/// Fits both clothoids: vehicle → `first`, then `first` → `second`.
pub fn local_path_from_poses(start: Pose, first: Pose, second: Pose) -> Result<LocalPathFeatures> {
    let c1 = fit_g1(start, first).map_err(|e| Error::LocalPath {
        which: 1,
        source: Box::new(e),
    })?;
    let c2 = fit_g1(first, second).map_err(|e| Error::LocalPath {
        which: 2,
        source: Box::new(e),
    })?;
    Ok(LocalPathFeatures {
        kappa1: c1.kappa,
        kappa_prime1: c1.kappa_prime,
        length1: c1.length,
        kappa2: c2.kappa,
        kappa_prime2: c2.kappa_prime,
        length2: c2.length,
    })
}

/// Local path features against a sampled target trajectory. `phase` is the
/// matched phase of the car; previews are `p1`, `p2` seconds of trajectory
/// time ahead and wrap around the lap.
pub fn local_path_features(
    state: &VehicleState,
    target: &SampledTrajectory,
    phase: f64,
    p1: f64,
    p2: f64,
) -> Result<LocalPathFeatures> {
    let first = target.pose_at_phase(phase + p1 * target.zdot);
    let second = target.pose_at_phase(phase + p2 * target.zdot);
    local_path_from_poses(vehicle_pose(state), first, second)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fresnel_at_zero_and_symmetry() {
        assert_eq!(fresnel(0.0), (0.0, 0.0));
        for s in [0.3, 1.2, 1.6, 4.0, 9.5] {
            let (c, sn) = fresnel(s);
            let (cm, sm) = fresnel(-s);
            assert_eq!((c, sn), (-cm, -sm));
        }
    }

    #[test]
    fn fresnel_small_argument_series() {
        let s: f64 = 1e-3;
        let (c, sn) = fresnel(s);
        assert!(close(sn, PI * s.powi(3) / 6.0, 1e-20));
        assert!(close(c, s, 1e-15));
    }

    #[test]
    fn fresnel_known_values() {
        let (c, s) = fresnel(1.0);
        assert!(close(c, 0.779_893_400_376_822_8, 1e-14));
        assert!(close(s, 0.438_259_147_390_354_8, 1e-14));
    }

    #[test]
    fn straight_and_quarter_circle() {
        let c = fit_g1(Pose::new(0.0, 0.0, 0.0), Pose::new(1.0, 0.0, 0.0)).unwrap();
        assert!(c.kappa.abs() < 1e-12 && c.kappa_prime.abs() < 1e-12);
        assert!(close(c.length, 1.0, 1e-12));

        let c = fit_g1(Pose::new(0.0, 0.0, 0.0), Pose::new(1.0, 1.0, FRAC_PI_2)).unwrap();
        assert!(close(c.kappa, 1.0, 1e-9), "{c:?}");
        assert!(c.kappa_prime.abs() < 1e-9);
        assert!(close(c.length, FRAC_PI_2, 1e-9));
    }

    #[test]
    fn eval_straight_and_circle() {
        let line = Clothoid { x0: 1.0, y0: 2.0, theta0: 0.5, kappa: 0.0, kappa_prime: 0.0, length: 10.0 };
        let p = line.eval(4.0).unwrap();
        assert!(close(p.x, 1.0 + 4.0 * 0.5f64.cos(), 1e-14));
        assert!(close(p.y, 2.0 + 4.0 * 0.5f64.sin(), 1e-14));

        let r = 20.0;
        let arc = Clothoid { x0: 0.0, y0: 0.0, theta0: 0.0, kappa: 1.0 / r, kappa_prime: 0.0, length: PI * r };
        let p = arc.eval(PI * r / 2.0).unwrap();
        assert!(close(p.theta, FRAC_PI_2, 1e-14));
        assert!(close(p.x, r, 1e-10) && close(p.y, r, 1e-10));
        assert!(arc.eval(-0.1).is_err());
        assert!(arc.eval(PI * r + 1e-6).is_err());
    }

    #[test]
    fn degenerate_chord_is_straight() {
        let c = fit_g1(Pose::new(0.0, 0.0, 1.0), Pose::new(0.005, 0.0, -1.0)).unwrap();
        assert_eq!((c.kappa, c.kappa_prime), (0.0, 0.0));
        assert!(close(c.length, 0.005, 1e-15));
    }

    #[test]
    fn mirror_negates_curvature() {
        let a = fit_g1(Pose::new(0.0, 0.0, 0.2), Pose::new(5.0, 2.0, 1.1)).unwrap();
        let b = fit_g1(Pose::new(0.0, 0.0, -0.2), Pose::new(5.0, -2.0, -1.1)).unwrap();
        assert!(close(a.kappa, -b.kappa, 1e-12));
        assert!(close(a.kappa_prime, -b.kappa_prime, 1e-12));
        assert!(close(a.length, b.length, 1e-12));
    }
}
