//! End-to-end baselines: behavior cloning and DAgger on track-relative
//! features, using the same network and training code as ProMoD.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::Demonstration;
use crate::error::{Error, Result};
use crate::expert::{PidDriver, PidExpert};
use crate::nn::{self, Architecture, NetworkModel, TrainConfig};
use crate::policy::{perception_features, windowed_dataset, Dataset};
use crate::sim::{drive_lap, Driver, LapRun};
use crate::track::{wrap_angle, TrackSpec};
use crate::vehicle::{Action, VehicleParams, VehicleState};

/// Upcoming segment curvatures in the feature vector, current one first.
pub const PREVIEW_SEGMENTS: usize = 15;
pub const BASELINE_DIM: usize = 5 + PREVIEW_SEGMENTS;
pub const BASELINE_FEATURES_TAG: &str = "baseline/20";

/// `[vx, vy, psidot, d, psi_err, κ_0 .. κ_14]`.
pub fn baseline_features(state: &VehicleState, track: &TrackSpec) -> Vec<f64> {
    let loc = track.localize([state.x, state.y]);
    let mut f = Vec::with_capacity(BASELINE_DIM);
    f.extend_from_slice(&perception_features(state));
    f.push(loc.d);
    f.push(wrap_angle(state.psi - loc.heading));
    let kappas = track.segment_curvatures();
    let seg = track.segment_at(loc.s);
    f.extend((0..PREVIEW_SEGMENTS).map(|k| kappas[(seg + k) % kappas.len()]));
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Bc,
    Dagger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub network: NetworkModel,
    pub history: usize,
}

fn fresh_network(history: usize, seed: u64) -> NetworkModel {
    NetworkModel::init(Architecture::with_input(BASELINE_DIM), history + 1, seed)
}

fn train_on(dataset: &Dataset, history: usize, cfg: &TrainConfig) -> Result<(NetworkModel, Vec<f64>)> {
    let mut net = fresh_network(history, cfg.seed);
    net.norm = dataset.norm.clone();
    let out = nn::train(net, &dataset.samples, cfg)?;
    if let Some(epoch) = out.diverged_at {
        log::warn!("baseline training diverged at epoch {epoch}; keeping last finite weights");
    }
    Ok((out.model, out.loss_history))
}

/// Per-step features and logged actions of one demonstration.
fn demo_log(demo: &Demonstration, track: &TrackSpec) -> (Vec<Option<Vec<f64>>>, Vec<Action>) {
    let feats = demo
        .rows
        .iter()
        .map(|r| Some(baseline_features(&r.state(), track)))
        .collect();
    (feats, demo.rows.iter().map(|r| r.action()).collect())
}

/// Behavior-cloning training set over all finished laps.
pub fn supervised_dataset(
    demos: &[&Demonstration],
    tracks: &BTreeMap<u64, TrackSpec>,
    history: usize,
    stride: usize,
) -> Result<Dataset> {
    let logs = demos
        .par_iter()
        .map(|d| {
            let track = tracks.get(&d.track_id).ok_or(Error::UnknownTrack(d.track_id))?;
            Ok(demo_log(d, track))
        })
        .collect::<Result<Vec<_>>>()?;
    windowed_dataset(&logs, history, stride, 0.0, BASELINE_DIM)
}

/// Behavior cloning on the finished laps of `demos`.
pub fn train_supervised(
    demos: &[Demonstration],
    tracks: &BTreeMap<u64, TrackSpec>,
    history: usize,
    stride: usize,
    cfg: &TrainConfig,
) -> Result<(BaselineModel, Vec<f64>)> {
    let finished: Vec<&Demonstration> = demos.iter().filter(|d| d.finished()).collect();
    if finished.is_empty() {
        return Err(Error::Invalid("no finished laps to train on".into()));
    }
    let data = supervised_dataset(&finished, tracks, history, stride)?;
    let (network, loss) = train_on(&data, history, cfg)?;
    Ok((
        BaselineModel {
            kind: BaselineKind::Bc,
            network,
            history,
        },
        loss,
    ))
}

/// Deterministic network driver on baseline features.
pub struct BaselineDriver<'a> {
    network: &'a NetworkModel,
    history: VecDeque<Vec<f64>>,
}

impl<'a> BaselineDriver<'a> {
    pub fn new(network: &'a NetworkModel) -> Self {
        Self {
            network,
            history: VecDeque::new(),
        }
    }

    fn push(&mut self, f: Vec<f64>) {
        if self.history.is_empty() {
            for _ in 1..self.network.sequence_len {
                self.history.push_back(f.clone());
            }
        } else {
            self.history.pop_front();
        }
        self.history.push_back(f);
    }

    fn forward(&self) -> Result<Action> {
        let seq: Vec<&[f64]> = self.history.iter().map(Vec::as_slice).collect();
        self.network.forward(&seq)
    }
}

impl Driver for BaselineDriver<'_> {
    fn act(&mut self, state: &VehicleState, track: &TrackSpec) -> Result<Action> {
        self.push(baseline_features(state, track));
        self.forward()
    }
}

impl BaselineModel {
    pub fn rollout(&self, track: &TrackSpec, params: &VehicleParams, max_time: f64) -> LapRun {
        drive_lap(track, params, &mut BaselineDriver::new(&self.network), max_time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaggerConfig {
    pub iterations: usize,
    /// β_i = beta_decay^(i-1).
    pub beta_decay: f64,
    /// Total number of collected steps over all iterations.
    pub cap: usize,
    /// A lap ending before this many steps is retried once.
    pub min_steps: usize,
    pub max_time: f64,
    pub history: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            beta_decay: 0.5,
            cap: 50_000,
            min_steps: 150,
            max_time: 120.0,
            history: 4,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl DaggerConfig {
    pub fn beta(&self, iteration: usize) -> f64 {
        self.beta_decay.powi(iteration as i32 - 1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DaggerReport {
    /// Steps collected in each iteration.
    pub collected: Vec<usize>,
    /// Laps that crashed early twice in a row, per iteration.
    pub failed_laps: Vec<usize>,
    pub loss_histories: Vec<Vec<f64>>,
    /// Training-set size after each iteration.
    pub dataset_sizes: Vec<usize>,
}

/// Mixture of expert and learner; every visited state is labelled with the
/// noise-free expert action.
struct MixtureDriver<'a> {
    expert: PidDriver,
    learner: Option<BaselineDriver<'a>>,
    beta: f64,
    rng: ChaCha8Rng,
    budget: usize,
    features: Vec<Option<Vec<f64>>>,
    labels: Vec<Action>,
}

impl Driver for MixtureDriver<'_> {
    fn act(&mut self, state: &VehicleState, track: &TrackSpec) -> Result<Action> {
        if self.labels.len() >= self.budget {
            return Err(Error::Invalid("collection budget reached".into()));
        }
        let label = self.expert.pid_action(state, track)?;
        let f = baseline_features(state, track);
        let use_expert = self.rng.gen::<f64>() < self.beta;
        let action = match &mut self.learner {
            Some(l) => {
                l.push(f.clone());
                let a = l.forward()?;
                if use_expert {
                    label
                } else {
                    a
                }
            }
            None => label,
        };
        self.features.push(Some(f));
        self.labels.push(label);
        Ok(action)
    }
}

/// Rolls out one mixture lap, keeping at most `budget` labelled steps.
fn collect_lap(
    expert: &PidExpert,
    learner: Option<&NetworkModel>,
    track: &TrackSpec,
    params: &VehicleParams,
    beta: f64,
    seed: u64,
    budget: usize,
    max_time: f64,
) -> (LapRun, Vec<Option<Vec<f64>>>, Vec<Action>) {
    let mut drv = MixtureDriver {
        expert: PidDriver::new(expert.clone(), params, seed),
        learner: learner.map(BaselineDriver::new),
        beta,
        rng: ChaCha8Rng::seed_from_u64(seed),
        budget,
        features: Vec::new(),
        labels: Vec::new(),
    };
    let run = drive_lap(track, params, &mut drv, max_time);
    (run, drv.features, drv.labels)
}

/// DAgger with a programmatic expert. Iteration `i` collects `cap /
/// iterations` steps round-robin over `tracks`, aggregates them and retrains
/// from scratch.
pub fn train_dagger(
    expert: &PidExpert,
    tracks: &[TrackSpec],
    params: &VehicleParams,
    cfg: &DaggerConfig,
) -> Result<(BaselineModel, DaggerReport)> {
    if tracks.is_empty() || cfg.iterations == 0 {
        return Err(Error::Invalid("DAgger needs tracks and at least one iteration".into()));
    }
    let per_iter = cfg.cap / cfg.iterations;
    let mut logs: Vec<(Vec<Option<Vec<f64>>>, Vec<Action>)> = Vec::new();
    let mut report = DaggerReport::default();
    let mut learner: Option<NetworkModel> = None;
    let mut lap_counter = 0u64;
    for it in 1..=cfg.iterations {
        let beta = cfg.beta(it);
        let mut collected = 0usize;
        let mut failed = 0usize;
        let mut track_idx = 0usize;
        while collected < per_iter {
            let track = &tracks[track_idx % tracks.len()];
            track_idx += 1;
            let budget = per_iter - collected;
            let mut attempt = 0;
            let (feats, labels) = loop {
                lap_counter += 1;
                let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(lap_counter);
                let (run, feats, labels) =
                    collect_lap(expert, learner.as_ref(), track, params, beta, seed, budget, cfg.max_time);
                let early = labels.len() < cfg.min_steps.min(budget) && run.lap_time.is_none();
                attempt += 1;
                if !early || attempt == 2 {
                    if early {
                        failed += 1;
                    }
                    break (feats, labels);
                }
            };
            collected += labels.len();
            if !labels.is_empty() {
                logs.push((feats, labels));
            }
        }
        let data = windowed_dataset(&logs, cfg.history, 1, 0.0, BASELINE_DIM)?;
        let (net, loss) = train_on(&data, cfg.history, &cfg.train)?;
        log::info!(
            "dagger iteration {it}: beta {beta}, {collected} steps, dataset {}",
            data.samples.len()
        );
        report.collected.push(collected);
        report.failed_laps.push(failed);
        report.loss_histories.push(loss);
        report.dataset_sizes.push(data.samples.len());
        learner = Some(net);
    }
    Ok((
        BaselineModel {
            kind: BaselineKind::Dagger,
            network: learner.expect("at least one iteration"),
            history: cfg.history,
        },
        report,
    ))
}
