//! Experiment configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::DaggerConfig;
use crate::error::{Error, Result};
use crate::eval::{MetricConfig, RobustnessConfig};
use crate::expert::{OuNoise, PidExpert};
use crate::io::read_text;
use crate::nn::TrainConfig;
use crate::policy::ProMoDConfig;
use crate::track::TrackParams;
use crate::vehicle::VehicleParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub history: usize,
    pub stride: usize,
    pub train: TrainConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            history: 4,
            stride: 1,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds of the tracks used for demonstrations and evaluation.
    pub tracks: Vec<u64>,
    pub track: TrackParams,
    pub vehicle: VehicleParams,
    pub laps_per_track: usize,
    pub noise_seed: u64,
    /// Time limit of a single lap in seconds.
    pub max_lap_time: f64,
    pub expert: PidExpert,
    pub noise: OuNoise,
    pub promod: ProMoDConfig,
    pub baseline: BaselineConfig,
    pub dagger: DaggerConfig,
    pub metrics: MetricConfig,
    pub robustness: RobustnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tracks: vec![1, 2, 3, 4, 5],
            track: TrackParams::default(),
            vehicle: VehicleParams::default(),
            laps_per_track: 10,
            noise_seed: 0,
            max_lap_time: 120.0,
            expert: PidExpert::default(),
            noise: OuNoise::default(),
            promod: ProMoDConfig::default(),
            baseline: BaselineConfig::default(),
            dagger: DaggerConfig::default(),
            metrics: MetricConfig::default(),
            robustness: RobustnessConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?).map_err(|e| match e {
            Error::Json(j) => Error::Malformed {
                path: path.into(),
                reason: j.to_string(),
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.promod.policy.validate()?;
        self.metrics.validate()?;
        if self.noise.tau <= 0.0 || self.noise.std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Invalid("noise needs tau > 0 and std >= 0".into()));
        }
        if !(self.max_lap_time > 0.0) {
            return Err(Error::Invalid("max_lap_time must be positive".into()));
        }
        Ok(())
    }
}
