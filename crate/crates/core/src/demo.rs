//! Lap logs: timestamped state/action rows plus driver and track metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{self, Action, VehicleParams, VehicleState};

/// One logged step: the state at `t` and the action applied from `t` to
/// `t + dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub psidot: f64,
    pub w_fl: f64,
    pub w_fr: f64,
    pub w_rl: f64,
    pub w_rr: f64,
    pub delta: f64,
    pub gas: f64,
    pub brake: f64,
}

pub const DEMO_COLUMNS: [&str; 14] = [
    "t", "x", "y", "psi", "vx", "vy", "psidot", "w_fl", "w_fr", "w_rl", "w_rr", "delta", "gas",
    "brake",
];

impl DemoRow {
    pub fn new(t: f64, state: &VehicleState, action: &Action) -> Self {
        Self {
            t,
            x: state.x,
            y: state.y,
            psi: state.psi,
            vx: state.vx,
            vy: state.vy,
            psidot: state.psidot,
            w_fl: state.omega[0],
            w_fr: state.omega[1],
            w_rl: state.omega[2],
            w_rr: state.omega[3],
            delta: action.delta,
            gas: action.gas,
            brake: action.brake,
        }
    }

    pub fn state(&self) -> VehicleState {
        VehicleState {
            x: self.x,
            y: self.y,
            psi: self.psi,
            vx: self.vx,
            vy: self.vy,
            psidot: self.psidot,
            omega: [self.w_fl, self.w_fr, self.w_rl, self.w_rr],
        }
    }

    pub fn action(&self) -> Action {
        Action::new(self.delta, self.gas, self.brake)
    }

    /// World-frame velocity.
    pub fn world_velocity(&self) -> (f64, f64) {
        let (s, c) = self.psi.sin_cos();
        (c * self.vx - s * self.vy, s * self.vx + c * self.vy)
    }
}

/// Who produced a lap; drives the answer key of the judging protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Human,
    Synthetic,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LapOutcome {
    Finished,
    OffTrack,
    Timeout,
    Error,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub driver_id: String,
    pub agent: Agent,
    pub track_id: u64,
    pub lap_index: usize,
    pub outcome: LapOutcome,
    pub dt: f64,
    pub rows: Vec<DemoRow>,
}

impl Demonstration {
    pub fn finished(&self) -> bool {
        self.outcome == LapOutcome::Finished
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Lap time of a finished lap: number of steps times `dt`.
    pub fn lap_time(&self) -> Option<f64> {
        self.finished().then_some(self.rows.len() as f64 * self.dt)
    }

    /// Checks that replaying the logged actions from row 0 reproduces every
    /// logged state bit for bit.
    pub fn verify_replay(&self, params: &VehicleParams) -> Result<()> {
        if (params.dt - self.dt).abs() > 0.0 {
            return Err(Error::Invalid(format!(
                "log dt {} differs from vehicle dt {}",
                self.dt, params.dt
            )));
        }
        let Some(first) = self.rows.first() else {
            return Ok(());
        };
        let mut state = first.state();
        for (i, pair) in self.rows.windows(2).enumerate() {
            state = vehicle::step(&state, &pair[0].action(), params)?;
            if state != pair[1].state() {
                return Err(Error::Invalid(format!(
                    "replay diverges at row {} of lap {}",
                    i + 1,
                    self.lap_index
                )));
            }
        }
        Ok(())
    }
}
