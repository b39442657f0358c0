//! Probabilistic movement primitives over lap trajectories.
//!
//! Each lap is mapped onto a normalized phase `z ∈ [0, 1]` and resampled to
//! a uniform grid (positions and world-frame velocities). Ridge regression on
//! Gaussian radial basis functions projects every lap to a weight vector and
//! a Gaussian is fitted over the weights. Sampling a weight vector yields a
//! full target trajectory; the phase rate sets its execution speed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clothoid::Pose;
use crate::demo::Demonstration;
use crate::error::{Error, Result};
use crate::interp::CubicSpline;
use crate::linalg::{Cholesky, Mat};

pub const PROMP_SCHEMA: &str = "promp/1";
/// Output channels in weight-vector order: x, ẋ, y, ẏ.
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProMpConfig {
    pub n_basis: usize,
    pub n_samples: usize,
    pub epsilon: f64,
    /// Centers span `[-margin, 1 + margin]`.
    pub center_margin: f64,
    /// Sampling variance floor as a fraction of the mean weight variance.
    pub reg_factor: f64,
}

impl Default for ProMpConfig {
    fn default() -> Self {
        Self {
            n_basis: 38,
            n_samples: 1000,
            epsilon: 1e-6,
            center_margin: 0.02,
            reg_factor: 1e-6,
        }
    }
}

impl ProMpConfig {
    pub fn centers(&self) -> Vec<f64> {
        let lo = -self.center_margin;
        let hi = 1.0 + self.center_margin;
        let n = self.n_basis;
        if n == 1 {
            return vec![0.5];
        }
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    /// Bandwidth equal to the center spacing.
    pub fn bandwidth(&self) -> f64 {
        if self.n_basis < 2 {
            return 1.0;
        }
        (1.0 + 2.0 * self.center_margin) / (self.n_basis - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub z: Vec<f64>,
    pub zdot_mean: f64,
}

impl PhaseGrid {
    pub fn uniform(n_samples: usize, zdot_mean: f64) -> Self {
        let n = n_samples.max(2);
        Self {
            z: (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
            zdot_mean,
        }
    }
}

/// Phase-normalized lap: `rows[i] = [x, ẋ, y, ẏ]` at `z = i / (n - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub rows: Vec<[f64; CHANNELS]>,
    pub zdot: f64,
}

impl TargetMatrix {
    pub fn to_mat(&self) -> Mat {
        Mat {
            rows: self.rows.len(),
            cols: CHANNELS,
            data: self.rows.iter().flatten().copied().collect(),
        }
    }
}

/// Resamples a lap onto `n_samples` uniform phase points with cubic splines.
pub fn temporal_modulation(demo: &Demonstration, n_samples: usize) -> Result<TargetMatrix> {
    let n = demo.rows.len();
    if n < 4 {
        return Err(Error::DemoTooShort { len: n, min: 4 });
    }
    let t0 = demo.rows[0].t;
    let t: Vec<f64> = demo.rows.iter().map(|r| r.t - t0).collect();
    if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotoneTime { row: i + 1 });
    }
    let t_end = t[n - 1];
    let mut channels: [Vec<f64>; CHANNELS] = Default::default();
    for r in &demo.rows {
        let (vx, vy) = r.world_velocity();
        channels[0].push(r.x);
        channels[1].push(vx);
        channels[2].push(r.y);
        channels[3].push(vy);
    }
    let splines = channels
        .iter()
        .map(|c| CubicSpline::natural(&t, c))
        .collect::<Result<Vec<_>>>()?;
    let grid = PhaseGrid::uniform(n_samples, 1.0 / t_end);
    let rows = grid
        .z
        .iter()
        .map(|&z| {
            let time = z * t_end;
            [
                splines[0].eval(time),
                splines[1].eval(time),
                splines[2].eval(time),
                splines[3].eval(time),
            ]
        })
        .collect();
    Ok(TargetMatrix {
        rows,
        zdot: 1.0 / t_end,
    })
}

#[inline]
pub fn rbf(z: f64, center: f64, bandwidth: f64) -> f64 {
    let u = (z - center) / bandwidth;
    (-0.5 * u * u).exp()
}

/// `Φ[k][i] = exp(−(z_i − c_k)² / (2 h²))`, one row per basis function.
pub fn basis_matrix(grid: &PhaseGrid, centers: &[f64], bandwidth: f64) -> Result<Mat> {
    if !(bandwidth > 0.0) {
        return Err(Error::Invalid(format!("bandwidth {bandwidth} must be positive")));
    }
    let mut phi = Mat::zeros(centers.len(), grid.z.len());
    for (k, &c) in centers.iter().enumerate() {
        for (i, &z) in grid.z.iter().enumerate() {
            phi[(k, i)] = rbf(z, c, bandwidth);
        }
    }
    Ok(phi)
}

/// Ridge regression `w = (Φ Φᵀ + ε I)⁻¹ Φ T`; returns `n_basis × 4`.
pub fn fit_weights(target: &Mat, phi: &Mat, epsilon: f64) -> Result<Mat> {
    if epsilon < 0.0 {
        return Err(Error::Invalid("epsilon must be >= 0".into()));
    }
    if phi.cols != target.rows {
        return Err(Error::Shape(format!(
            "basis has {} grid points, targets have {}",
            phi.cols, target.rows
        )));
    }
    let mut a = phi.gram();
    for k in 0..a.rows {
        a[(k, k)] += epsilon;
    }
    let rhs = phi.matmul(target)?;
    let chol = Cholesky::new(&a, 1e-15).ok_or(Error::SingularSystem)?;
    Ok(chol.solve(&rhs))
}

/// Flattens `n_basis × 4` weights channel by channel (x, ẋ, y, ẏ).
pub fn flatten_weights(w: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.rows * w.cols);
    for c in 0..w.cols {
        for k in 0..w.rows {
            out.push(w[(k, c)]);
        }
    }
    out
}

/// Maximum-likelihood Gaussian over weight vectors (divisor N). Vectors are
/// summed in a canonical order so the result does not depend on input order.
pub fn fit_gaussian(weights: &[Vec<f64>]) -> Result<(Vec<f64>, Mat)> {
    let Some(first) = weights.first() else {
        return Err(Error::Invalid("need at least one weight vector".into()));
    };
    let dim = first.len();
    if weights.iter().any(|w| w.len() != dim) {
        return Err(Error::Shape("weight vectors differ in length".into()));
    }
    let mut order: Vec<&Vec<f64>> = weights.iter().collect();
    order.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = order.len() as f64;
    let mut mu = vec![0.0; dim];
    for w in &order {
        for (m, v) in mu.iter_mut().zip(w.iter()) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);

    let centered: Vec<Vec<f64>> = order
        .iter()
        .map(|w| w.iter().zip(&mu).map(|(v, m)| v - m).collect())
        .collect();
    let mut sigma = Mat::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let v: f64 = centered.iter().map(|c| c[i] * c[j]).sum::<f64>() / n;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok((mu, sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProMp {
    pub n_basis: usize,
    pub centers: Vec<f64>,
    pub bandwidth: f64,
    pub mu_w: Vec<f64>,
    pub sigma_w: Mat,
    pub zdot_mean: f64,
    pub epsilon: f64,
    pub n_laps_fitted: usize,
    pub n_samples: usize,
}

/// Fits one ProMP to a set of laps on the same track.
pub fn fit_promp(demos: &[&Demonstration], config: &ProMpConfig) -> Result<ProMp> {
    let Some(first) = demos.first() else {
        return Err(Error::Invalid("fit_promp needs at least one demonstration".into()));
    };
    if demos.iter().any(|d| d.track_id != first.track_id) {
        return Err(Error::Invalid("demonstrations span several tracks".into()));
    }
    let centers = config.centers();
    let bandwidth = config.bandwidth();
    let grid = PhaseGrid::uniform(config.n_samples, 1.0);
    let phi = basis_matrix(&grid, &centers, bandwidth)?;

    let mut weights = Vec::with_capacity(demos.len());
    let mut zdots = Vec::with_capacity(demos.len());
    for demo in demos {
        let target = temporal_modulation(demo, config.n_samples)?;
        let w = fit_weights(&target.to_mat(), &phi, config.epsilon)?;
        weights.push(flatten_weights(&w));
        zdots.push(target.zdot);
    }
    let (mu_w, sigma_w) = fit_gaussian(&weights)?;
    zdots.sort_by(f64::total_cmp);
    let zdot_mean = zdots.iter().sum::<f64>() / zdots.len() as f64;
    Ok(ProMp {
        n_basis: config.n_basis,
        centers,
        bandwidth,
        mu_w,
        sigma_w,
        zdot_mean,
        epsilon: config.epsilon,
        n_laps_fitted: demos.len(),
        n_samples: config.n_samples,
    })
}

/// A target trajectory drawn from a ProMP.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub bandwidth: f64,
    /// Phase rate used for execution (1/s).
    pub zdot: f64,
    pub speed_scale: f64,
    /// Grid values `[x, ẋ, y, ẏ]`; velocities include `speed_scale`.
    pub grid: Vec<[f64; CHANNELS]>,
}

/// Below this target speed the tangent comes from neighbouring positions.
const MIN_TANGENT_SPEED: f64 = 1.0;
const TANGENT_PHASE_STEP: f64 = 2e-3;

impl SampledTrajectory {
    pub fn from_weights(
        promp: &ProMp,
        weights: Vec<f64>,
        speed_scale: f64,
        n_samples: usize,
    ) -> Self {
        let mut traj = Self {
            weights,
            centers: promp.centers.clone(),
            bandwidth: promp.bandwidth,
            zdot: speed_scale * promp.zdot_mean,
            speed_scale,
            grid: Vec::new(),
        };
        let grid = PhaseGrid::uniform(n_samples, promp.zdot_mean);
        traj.grid = grid.z.iter().map(|&z| traj.eval(z)).collect();
        traj
    }

    /// `[x, ẋ, y, ẏ]` at phase `z` (not wrapped).
    pub fn eval(&self, z: f64) -> [f64; CHANNELS] {
        let nb = self.centers.len();
        let mut out = [0.0; CHANNELS];
        for (k, &c) in self.centers.iter().enumerate() {
            let b = rbf(z, c, self.bandwidth);
            for (ch, o) in out.iter_mut().enumerate() {
                *o += b * self.weights[ch * nb + k];
            }
        }
        out[1] *= self.speed_scale;
        out[3] *= self.speed_scale;
        out
    }

    pub fn grid_phase(&self, i: usize) -> f64 {
        i as f64 / (self.grid.len() - 1) as f64
    }

    /// Position and tangent heading at a phase wrapped into `[0, 1)`.
    pub fn pose_at_phase(&self, z: f64) -> Pose {
        let z = z.rem_euclid(1.0);
        let [x, vx, y, vy] = self.eval(z);
        let theta = if vx.hypot(vy) > MIN_TANGENT_SPEED * self.speed_scale {
            vy.atan2(vx)
        } else {
            let a = self.eval((z - TANGENT_PHASE_STEP).rem_euclid(1.0));
            let b = self.eval((z + TANGENT_PHASE_STEP).rem_euclid(1.0));
            (b[2] - a[2]).atan2(b[0] - a[0])
        };
        Pose::new(x, y, theta)
    }
}

impl ProMp {
    pub fn mean_trajectory(&self) -> SampledTrajectory {
        SampledTrajectory::from_weights(self, self.mu_w.clone(), 1.0, self.n_samples)
    }

    /// Default variance floor: `reg_factor` times the mean weight variance.
    pub fn default_reg(&self, reg_factor: f64) -> f64 {
        let n = self.sigma_w.rows;
        let mean_diag = (0..n).map(|i| self.sigma_w[(i, i)]).sum::<f64>() / n as f64;
        (reg_factor * mean_diag).max(1e-12)
    }

    /// Draws `w* ~ N(μ_w, Σ_w + reg·I)` and reconstructs the trajectory.
    pub fn sample_trajectory(&self, seed: u64, speed_scale: f64, reg: f64) -> Result<SampledTrajectory> {
        let w = self.sample_weights(&mut ChaCha8Rng::seed_from_u64(seed), reg)?;
        Ok(SampledTrajectory::from_weights(self, w, speed_scale, self.n_samples))
    }

    pub fn sampling_factor(&self, reg: f64) -> Result<Cholesky> {
        let mut cov = self.sigma_w.clone();
        for i in 0..cov.rows {
            cov[(i, i)] += reg;
        }
        Cholesky::new(&cov, 0.0).ok_or(Error::NotPositiveDefinite)
    }

    pub fn sample_weights(&self, rng: &mut ChaCha8Rng, reg: f64) -> Result<Vec<f64>> {
        let chol = self.sampling_factor(reg)?;
        Ok(self.sample_with(&chol, rng))
    }

    pub fn sample_with(&self, chol: &Cholesky, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mu_w.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        chol.mul_lower(&z)
            .iter()
            .zip(&self.mu_w)
            .map(|(d, m)| m + d)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProMpFile {
    schema: String,
    n_basis: usize,
    centers: Vec<f64>,
    bandwidth: f64,
    mu_w: Vec<f64>,
    sigma_w: Vec<f64>,
    zdot_mean: f64,
    epsilon: f64,
    #[serde(default)]
    n_laps: usize,
    #[serde(default = "default_samples")]
    n_samples: usize,
}

fn default_samples() -> usize {
    ProMpConfig::default().n_samples
}

impl ProMp {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ProMpFile {
            schema: PROMP_SCHEMA.into(),
            n_basis: self.n_basis,
            centers: self.centers.clone(),
            bandwidth: self.bandwidth,
            mu_w: self.mu_w.clone(),
            sigma_w: self.sigma_w.data.clone(),
            zdot_mean: self.zdot_mean,
            epsilon: self.epsilon,
            n_laps: self.n_laps_fitted,
            n_samples: self.n_samples,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ProMpFile = serde_json::from_str(text)?;
        if f.schema != PROMP_SCHEMA {
            return Err(Error::Invalid(format!(
                "expected schema {PROMP_SCHEMA}, found {}",
                f.schema
            )));
        }
        let dim = CHANNELS * f.n_basis;
        if f.centers.len() != f.n_basis || f.mu_w.len() != dim {
            return Err(Error::Shape("ProMP dimensions disagree with n_basis".into()));
        }
        Ok(Self {
            n_basis: f.n_basis,
            centers: f.centers,
            bandwidth: f.bandwidth,
            mu_w: f.mu_w,
            sigma_w: Mat::from_rows(dim, dim, f.sigma_w)?,
            zdot_mean: f.zdot_mean,
            epsilon: f.epsilon,
            n_laps_fitted: f.n_laps,
            n_samples: f.n_samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{Agent, DemoRow, LapOutcome};
    use crate::vehicle::{Action, VehicleState};

    pub(crate) fn demo_from(points: impl Iterator<Item = (f64, f64, f64, f64, f64)>) -> Demonstration {
        // (t, x, y, world vx, world vy) with psi aligned to the velocity
        let rows = points
            .map(|(t, x, y, vx, vy)| {
                let psi = vy.atan2(vx);
                let s = VehicleState {
                    x,
                    y,
                    psi,
                    vx: vx.hypot(vy),
                    ..Default::default()
                };
                DemoRow::new(t, &s, &Action::default())
            })
            .collect();
        Demonstration {
            driver_id: "test".into(),
            agent: Agent::Synthetic,
            track_id: 0,
            lap_index: 0,
            outcome: LapOutcome::Finished,
            dt: 0.01,
            rows,
        }
    }

    #[test]
    fn constant_velocity_is_linear_in_phase() {
        let demo = demo_from((0..101).map(|i| {
            let t = i as f64 * 0.01;
            (t, 3.0 * t, 1.0, 3.0, 0.0)
        }));
        let tm = temporal_modulation(&demo, 50).unwrap();
        assert!((tm.zdot - 1.0).abs() < 1e-12);
        for (i, r) in tm.rows.iter().enumerate() {
            let z = i as f64 / 49.0;
            assert!((r[0] - 3.0 * z).abs() < 1e-12);
            assert!((r[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn on_grid_demo_is_reproduced() {
        let demo = demo_from((0..11).map(|i| {
            let t = i as f64 * 0.1;
            (t, t.sin() * 4.0, t * t, 2.0 + t, 0.5 * t)
        }));
        let tm = temporal_modulation(&demo, 11).unwrap();
        for (r, row) in tm.rows.iter().zip(&demo.rows) {
            let (vx, vy) = row.world_velocity();
            assert!((r[0] - row.x).abs() < 1e-12);
            assert!((r[2] - row.y).abs() < 1e-12);
            assert!((r[1] - vx).abs() < 1e-12 && (r[3] - vy).abs() < 1e-12);
        }
    }

    #[test]
    fn short_demo_rejected() {
        let demo = demo_from((0..3).map(|i| (i as f64, 0.0, 0.0, 1.0, 0.0)));
        assert!(matches!(temporal_modulation(&demo, 10), Err(Error::DemoTooShort { .. })));
    }

    #[test]
    fn basis_entries() {
        let grid = PhaseGrid { z: vec![0.25, 0.5, 0.75], zdot_mean: 1.0 };
        let phi = basis_matrix(&grid, &[0.5], 0.25).unwrap();
        assert_eq!(phi[(0, 1)], 1.0);
        assert!((phi[(0, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!(basis_matrix(&grid, &[0.5], 0.0).is_err());
    }

    #[test]
    fn heavy_shrinkage() {
        let cfg = ProMpConfig::default();
        let grid = PhaseGrid::uniform(200, 1.0);
        let phi = basis_matrix(&grid, &cfg.centers(), cfg.bandwidth()).unwrap();
        let t = Mat { rows: 200, cols: 4, data: (0..800).map(|i| (i as f64 * 0.37).sin()).collect() };
        let w = fit_weights(&t, &phi, 1e9).unwrap();
        let phit = phi.matmul(&t).unwrap();
        let norm = |m: &Mat| m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm(&w) < 1e-6 * norm(&phit));
    }

    #[test]
    fn singular_without_ridge() {
        let grid = PhaseGrid::uniform(3, 1.0);
        let phi = basis_matrix(&grid, &[0.1, 0.2, 0.3, 0.4, 0.5], 0.1).unwrap();
        let t = Mat::zeros(3, 4);
        assert!(matches!(fit_weights(&t, &phi, 0.0), Err(Error::SingularSystem)));
    }

    #[test]
    fn gaussian_of_one_and_two() {
        let (mu, sig) = fit_gaussian(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(mu, vec![1.0, 2.0]);
        assert!(sig.data.iter().all(|v| *v == 0.0));

        let (mu, sig) = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(mu[0], 1.0);
        assert_eq!(sig[(0, 0)], 1.0);
    }

    #[test]
    fn zero_covariance_sample_is_mean() {
        let demo = demo_from((0..200).map(|i| {
            let t = i as f64 * 0.05;
            (t, 10.0 * (0.3 * t).cos(), 10.0 * (0.3 * t).sin(), -3.0 * (0.3 * t).sin(), 3.0 * (0.3 * t).cos())
        }));
        let promp = fit_promp(&[&demo], &ProMpConfig::default()).unwrap();
        let mean = promp.mean_trajectory();
        let s = promp.sample_trajectory(4, 1.0, promp.default_reg(1e-6)).unwrap();
        for (a, b) in mean.grid.iter().zip(&s.grid) {
            for c in 0..4 {
                assert!((a[c] - b[c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn speed_scale_doubles_velocities_only() {
        let demo = demo_from((0..200).map(|i| {
            let t = i as f64 * 0.05;
            (t, 2.0 * t, 0.1 * t * t, 2.0, 0.2 * t)
        }));
        let promp = fit_promp(&[&demo], &ProMpConfig::default()).unwrap();
        let a = promp.sample_trajectory(9, 1.0, 1e-9).unwrap();
        let b = promp.sample_trajectory(9, 2.0, 1e-9).unwrap();
        assert_eq!(b.zdot, 2.0 * a.zdot);
        for (p, q) in a.grid.iter().zip(&b.grid) {
            assert_eq!(p[0], q[0]);
            assert_eq!(p[2], q[2]);
            assert!((2.0 * p[1] - q[1]).abs() < 1e-12);
            assert!((2.0 * p[3] - q[3]).abs() < 1e-12);
        }
    }
}
