//! The ProMoD policy: perception and local-path features, training-set
//! construction from demonstrations, and closed-loop rollout against a
//! sampled target trajectory.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clothoid::{local_path_features, local_path_from_poses, Pose, MIN_TANGENT_SPEED};
use crate::demo::{DemoRow, Demonstration};
use crate::error::{Error, Result};
use crate::nn::{self, Architecture, NetworkModel, NormStats, Sample, TrainConfig};
use crate::promp::{fit_promp, ProMp, ProMpConfig, SampledTrajectory};
use crate::sim::{drive_lap, Driver, LapRun};
use crate::track::TrackSpec;
use crate::vehicle::{Action, VehicleParams, VehicleState};

/// `[vx, vy, psidot]` followed by the six local-path parameters.
pub const FEATURE_DIM: usize = 9;
pub type FeatureVector = [f64; FEATURE_DIM];

/// Half-width, in grid points, of the forward search window used by the
/// closest-point matcher after the first step.
pub const MATCH_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Preview times in seconds.
    pub p1: f64,
    pub p2: f64,
    /// Number of past steps fed to the network besides the current one.
    pub history: usize,
    /// Keep every `stride`-th sample when building the training set.
    pub stride: usize,
    pub max_drop_fraction: f64,
    /// Scales the sampled trajectory's phase rate during rollout.
    pub speed_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            p1: 0.25,
            p2: 0.5,
            history: 4,
            stride: 1,
            max_drop_fraction: 0.05,
            speed_scale: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn sequence_len(&self) -> usize {
        self.history + 1
    }

    /// Steps of future log needed for the second preview point.
    pub fn horizon(&self, dt: f64) -> usize {
        (self.p2 / dt - 1e-9).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p1 > 0.0 && self.p2 > self.p1 && self.p2.is_finite()) {
            return Err(Error::Invalid(format!(
                "preview times must satisfy 0 < p1 < p2, got {} and {}",
                self.p1, self.p2
            )));
        }
        if self.stride == 0 || !(self.speed_scale > 0.0) {
            return Err(Error::Invalid("stride and speed_scale must be positive".into()));
        }
        Ok(())
    }
}

pub fn perception_features(state: &VehicleState) -> [f64; 3] {
    [state.vx, state.vy, state.psidot]
}

fn join(xp: [f64; 3], xlp: [f64; 6]) -> FeatureVector {
    let mut f = [0.0; FEATURE_DIM];
    f[..3].copy_from_slice(&xp);
    f[3..].copy_from_slice(&xlp);
    f
}

/// Position and velocity-tangent pose of a log at fractional step `k`.
fn log_pose(rows: &[DemoRow], k: f64) -> Pose {
    let i = (k.floor() as usize).min(rows.len() - 1);
    let j = (i + 1).min(rows.len() - 1);
    let a = k - i as f64;
    let (r0, r1) = (&rows[i], &rows[j]);
    let lerp = |u: f64, v: f64| u + a * (v - u);
    let (vx0, vy0) = r0.world_velocity();
    let (vx1, vy1) = r1.world_velocity();
    let (vx, vy) = (lerp(vx0, vx1), lerp(vy0, vy1));
    let theta = if vx.hypot(vy) > MIN_TANGENT_SPEED {
        vy.atan2(vx)
    } else {
        r0.psi
    };
    Pose::new(lerp(r0.x, r1.x), lerp(r0.y, r1.y), theta)
}

/// Training features at step `t` of a log, using the log's own future as the
/// target path.
pub fn demo_features(rows: &[DemoRow], t: usize, dt: f64, cfg: &PolicyConfig) -> Result<FeatureVector> {
    let state = rows[t].state();
    let first = log_pose(rows, t as f64 + cfg.p1 / dt);
    let second = log_pose(rows, t as f64 + cfg.p2 / dt);
    let xlp = local_path_from_poses(crate::clothoid::vehicle_pose(&state), first, second)?;
    Ok(join(perception_features(&state), xlp.to_array()))
}

/// Monotone closest-point matching against the grid of a sampled trajectory.
/// Tracks an unwrapped fractional grid index.
#[derive(Debug, Clone, Default)]
pub struct PhaseMatcher {
    index: Option<f64>,
}

impl PhaseMatcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unwrapped fractional grid index of the last match.
    pub fn index(&self) -> Option<f64> {
        self.index
    }

    /// Matches `p` and returns the unwrapped phase (grid index / cycle).
    pub fn update(&mut self, target: &SampledTrajectory, p: [f64; 2]) -> f64 {
        let n = target.grid.len() - 1;
        let at = |k: i64| {
            let g = target.grid[k.rem_euclid(n as i64) as usize];
            [g[0], g[2]]
        };
        let dist2 = |q: [f64; 2]| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        let (lo, hi) = match self.index {
            None => (0i64, n as i64 - 1),
            Some(u) => {
                let base = u.floor() as i64;
                (base, base + MATCH_WINDOW as i64)
            }
        };
        let mut best = lo;
        let mut best_d = f64::INFINITY;
        for k in lo..=hi {
            let d = dist2(at(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        // Refine on the neighbouring segments.
        let mut u_new = best as f64;
        let mut refined_d = best_d;
        for k0 in [best - 1, best] {
            let (a, b) = (at(k0), at(k0 + 1));
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len2 = ex * ex + ey * ey;
            if len2 <= 0.0 {
                continue;
            }
            let s = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
            let d = dist2([a[0] + s * ex, a[1] + s * ey]);
            if d < refined_d {
                refined_d = d;
                u_new = k0 as f64 + s;
            }
        }
        if let Some(u) = self.index {
            u_new = u_new.max(u);
        }
        self.index = Some(u_new);
        u_new / n as f64
    }
}

/// Online features for `state` against `target`, advancing the matcher.
pub fn online_features(
    state: &VehicleState,
    target: &SampledTrajectory,
    matcher: &mut PhaseMatcher,
    cfg: &PolicyConfig,
) -> Result<(f64, FeatureVector)> {
    let phase = matcher.update(target, [state.x, state.y]);
    let xlp = local_path_features(state, target, phase, cfg.p1, cfg.p2)?;
    Ok((phase, join(perception_features(state), xlp.to_array())))
}

/// Recomputes rollout features from a log and the trajectory that drove it.
pub fn features_from_log(
    rows: &[DemoRow],
    target: &SampledTrajectory,
    cfg: &PolicyConfig,
) -> Vec<Result<FeatureVector>> {
    let mut matcher = PhaseMatcher::new();
    rows.iter()
        .map(|r| online_features(&r.state(), target, &mut matcher, cfg).map(|(_, f)| f))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub norm: NormStats,
    pub dropped: usize,
    pub total: usize,
}

/// Turns per-step features and actions into windowed, normalized samples.
/// A sample at step `t` uses features `t - history ..= t` and the action at
/// `t`; windows touching a missing feature are dropped.
pub fn windowed_dataset(
    logs: &[(Vec<Option<Vec<f64>>>, Vec<Action>)],
    history: usize,
    stride: usize,
    max_drop_fraction: f64,
    dim: usize,
) -> Result<Dataset> {
    let mut kept: Vec<(usize, usize)> = Vec::new();
    let mut total = 0usize;
    let mut dropped = 0usize;
    for (li, (feats, _)) in logs.iter().enumerate() {
        for t in history..feats.len() {
            if !(t - history).is_multiple_of(stride) {
                continue;
            }
            total += 1;
            if feats[t - history..=t].iter().all(Option::is_some) {
                kept.push((li, t));
            } else {
                dropped += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::DemoTooShort {
            len: logs.iter().map(|l| l.0.len()).max().unwrap_or(0),
            min: history + 1,
        });
    }
    if dropped as f64 > max_drop_fraction * total as f64 {
        return Err(Error::TooManyDrops { dropped, total });
    }
    let norm = NormStats::fit(
        kept.iter().map(|&(li, t)| logs[li].0[t].as_deref().unwrap()),
        dim,
    );
    let samples = kept
        .iter()
        .map(|&(li, t)| {
            let inputs = (t - history..=t)
                .map(|k| {
                    let raw = logs[li].0[k].as_deref().unwrap();
                    let mut out = vec![0.0; dim];
                    norm.apply(raw, &mut out);
                    out
                })
                .collect();
            Sample {
                inputs,
                target: Sample::target_from_action(&logs[li].1[t]),
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        norm,
        dropped,
        total,
    })
}

/// Per-step features of one demonstration over the usable range
/// `0..len - horizon`, with clothoid failures as `None`.
pub fn demo_feature_log(demo: &Demonstration, cfg: &PolicyConfig) -> (Vec<Option<Vec<f64>>>, Vec<Action>) {
    let horizon = cfg.horizon(demo.dt);
    let usable = demo.rows.len().saturating_sub(horizon);
    let feats = (0..usable)
        .map(|t| demo_features(&demo.rows, t, demo.dt, cfg).ok().map(|f| f.to_vec()))
        .collect();
    let actions = demo.rows[..usable].iter().map(DemoRow::action).collect();
    (feats, actions)
}

/// Aggregated ProMoD training set over all demonstrations.
pub fn build_dataset(demos: &[&Demonstration], cfg: &PolicyConfig) -> Result<Dataset> {
    cfg.validate()?;
    let logs: Vec<_> = demos.par_iter().map(|d| demo_feature_log(d, cfg)).collect();
    windowed_dataset(&logs, cfg.history, cfg.stride, cfg.max_drop_fraction, FEATURE_DIM)
}

/// Number of training windows `build_dataset` visits, counted without
/// computing any features.
pub fn dataset_size(demos: &[&Demonstration], cfg: &PolicyConfig) -> usize {
    let stride = cfg.stride.max(1);
    demos
        .iter()
        .map(|d| {
            let usable = d.rows.len().saturating_sub(cfg.horizon(d.dt));
            usable.saturating_sub(cfg.history).div_ceil(stride)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProMoDConfig {
    pub promp: ProMpConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProMoDModel {
    /// Target-trajectory distribution per track id.
    pub promps: BTreeMap<u64, ProMp>,
    pub network: NetworkModel,
    pub config: ProMoDConfig,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub diverged_at: Option<usize>,
    pub samples: usize,
    pub dropped: usize,
}

/// Fits one ProMP per track, then the network on the aggregated features of
/// all finished laps.
pub fn train_promod(demos: &[Demonstration], cfg: &ProMoDConfig) -> Result<(ProMoDModel, TrainReport)> {
    let finished: Vec<&Demonstration> = demos.iter().filter(|d| d.finished()).collect();
    if finished.is_empty() {
        return Err(Error::Invalid("no finished laps to train on".into()));
    }
    let mut by_track: BTreeMap<u64, Vec<&Demonstration>> = BTreeMap::new();
    for d in &finished {
        by_track.entry(d.track_id).or_default().push(d);
    }
    let promps = by_track
        .par_iter()
        .map(|(id, ds)| fit_promp(ds, &cfg.promp).map(|p| (*id, p)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let data = build_dataset(&finished, &cfg.policy)?;
    let mut net = NetworkModel::init(Architecture::default(), cfg.policy.sequence_len(), cfg.train.seed);
    net.norm = data.norm.clone();
    let out = nn::train(net, &data.samples, &cfg.train)?;
    let report = TrainReport {
        loss_history: out.loss_history,
        diverged_at: out.diverged_at,
        samples: data.samples.len(),
        dropped: data.dropped,
    };
    Ok((
        ProMoDModel {
            promps,
            network: out.model,
            config: cfg.clone(),
        },
        report,
    ))
}

/// Network driver following one sampled target trajectory.
pub struct ProMoDDriver<'a> {
    network: &'a NetworkModel,
    cfg: &'a PolicyConfig,
    pub target: SampledTrajectory,
    matcher: PhaseMatcher,
    history: VecDeque<FeatureVector>,
    reused: bool,
    /// Unwrapped fractional grid index matched at every step.
    pub matched: Vec<f64>,
}

impl<'a> ProMoDDriver<'a> {
    pub fn new(network: &'a NetworkModel, cfg: &'a PolicyConfig, target: SampledTrajectory) -> Self {
        Self {
            network,
            cfg,
            target,
            matcher: PhaseMatcher::new(),
            history: VecDeque::new(),
            reused: false,
            matched: Vec::new(),
        }
    }
}

impl Driver for ProMoDDriver<'_> {
    fn act(&mut self, state: &VehicleState, _track: &TrackSpec) -> Result<Action> {
        let features = match online_features(state, &self.target, &mut self.matcher, self.cfg) {
            Ok((_, f)) => {
                self.reused = false;
                f
            }
            Err(e) => match self.history.back() {
                Some(prev) if !self.reused => {
                    self.reused = true;
                    *prev
                }
                _ => return Err(e),
            },
        };
        self.matched.push(self.matcher.index().unwrap_or(0.0));
        let len = self.cfg.sequence_len();
        if self.history.is_empty() {
            self.history.extend(std::iter::repeat_n(features, len));
        } else {
            self.history.pop_front();
            self.history.push_back(features);
        }
        let seq: Vec<&[f64]> = self.history.iter().map(|f| f.as_slice()).collect();
        self.network.forward(&seq)
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub run: LapRun,
    pub target: SampledTrajectory,
    pub matched: Vec<f64>,
}

impl ProMoDModel {
    pub fn promp_for(&self, track_id: u64) -> Result<&ProMp> {
        self.promps.get(&track_id).ok_or(Error::UnknownTrack(track_id))
    }

    /// Samples the target trajectory for attempt `seed` on a track.
    pub fn sample_target(&self, track_id: u64, seed: u64) -> Result<SampledTrajectory> {
        let promp = self.promp_for(track_id)?;
        let reg = promp.default_reg(self.config.promp.reg_factor);
        promp.sample_trajectory(seed, self.config.policy.speed_scale, reg)
    }

    /// One lap from a standing start with a freshly sampled target.
    pub fn rollout(&self, track: &TrackSpec, params: &VehicleParams, seed: u64, max_time: f64) -> Result<Rollout> {
        let target = self.sample_target(track.seed, seed)?;
        Ok(self.rollout_with(track, params, target, max_time))
    }

    pub fn rollout_with(
        &self,
        track: &TrackSpec,
        params: &VehicleParams,
        target: SampledTrajectory,
        max_time: f64,
    ) -> Rollout {
        let mut driver = ProMoDDriver::new(&self.network, &self.config.policy, target);
        let run = drive_lap(track, params, &mut driver, max_time);
        Rollout {
            run,
            target: driver.target,
            matched: driver.matched,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{Agent, LapOutcome};
    use crate::vehicle::VehicleState;

    fn straight_demo(v: f64, steps: usize, dt: f64) -> Demonstration {
        let rows = (0..steps)
            .map(|k| {
                let s = VehicleState {
                    x: v * k as f64 * dt,
                    vx: v,
                    ..Default::default()
                };
                DemoRow::new(k as f64 * dt, &s, &Action::new(0.0, 0.1, 0.0))
            })
            .collect();
        Demonstration {
            driver_id: "t".into(),
            agent: Agent::Synthetic,
            track_id: 0,
            lap_index: 0,
            outcome: LapOutcome::Finished,
            dt,
            rows,
        }
    }

    #[test]
    fn perception_projection() {
        assert_eq!(perception_features(&VehicleState::default()), [0.0; 3]);
        let s = VehicleState { vx: 10.0, ..Default::default() };
        assert_eq!(perception_features(&s), [10.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_constant_speed_features() {
        let dt = 1.0 / 150.0;
        let d = straight_demo(12.0, 300, dt);
        let cfg = PolicyConfig::default();
        for t in [0, 50, 200] {
            let f = demo_features(&d.rows, t, dt, &cfg).unwrap();
            let want = [12.0, 0.0, 0.0, 0.0, 0.0, 12.0 * 0.25, 0.0, 0.0, 12.0 * 0.25];
            for (a, b) in f.iter().zip(want) {
                assert!((a - b).abs() < 1e-9, "{f:?}");
            }
        }
    }

    #[test]
    fn sample_count_bookkeeping() {
        let dt = 1.0 / 150.0;
        let cfg = PolicyConfig::default();
        let a = straight_demo(10.0, 300, dt);
        let b = straight_demo(8.0, 200, dt);
        let data = build_dataset(&[&a, &b], &cfg).unwrap();
        let h = cfg.horizon(dt);
        assert_eq!(h, 75);
        assert_eq!(data.samples.len(), (300 - h - 4) + (200 - h - 4));
        assert_eq!(data.dropped, 0);
        assert!(data.samples.iter().all(|s| s.inputs.len() == 5));
    }

    #[test]
    fn stride_thins_samples() {
        let dt = 1.0 / 150.0;
        let d = straight_demo(10.0, 300, dt);
        let cfg = PolicyConfig { stride: 4, ..Default::default() };
        let n = build_dataset(&[&d], &cfg).unwrap().samples.len();
        assert_eq!(n, (300 - 75 - 4 + 3) / 4);
        let e = straight_demo(9.0, 231, dt);
        for stride in 1..6 {
            let cfg = PolicyConfig { stride, ..Default::default() };
            let data = build_dataset(&[&d, &e], &cfg).unwrap();
            assert_eq!(dataset_size(&[&d, &e], &cfg), data.total);
        }
    }

    #[test]
    fn too_many_drops_is_an_error() {
        let logs = vec![(
            (0..20).map(|i| (i % 3 != 0).then(|| vec![0.0])).collect::<Vec<_>>(),
            vec![Action::new(0.0, 0.0, 0.0); 20],
        )];
        assert!(matches!(
            windowed_dataset(&logs, 1, 1, 0.05, 1),
            Err(Error::TooManyDrops { .. })
        ));
    }
}
