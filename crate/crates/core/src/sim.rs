//! Closed-loop lap execution shared by the expert, the learned policies and
//! the interactive session.

use crate::demo::{Agent, DemoRow, Demonstration, LapOutcome};
use crate::error::Result;
use crate::track::TrackSpec;
use crate::vehicle::{self, Action, LapProgress, LapStatus, VehicleParams, VehicleState};

/// Anything that maps the current state to an action, one step at a time.
pub trait Driver {
    fn act(&mut self, state: &VehicleState, track: &TrackSpec) -> Result<Action>;
}

/// State at rest on the start line, facing the driving direction.
pub fn start_state(track: &TrackSpec) -> VehicleState {
    let (x, y, psi) = track.start_pose();
    VehicleState::at_rest(x, y, psi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LapRun {
    pub rows: Vec<DemoRow>,
    pub outcome: LapOutcome,
    pub lap_time: Option<f64>,
    pub error: Option<String>,
}

impl LapRun {
    pub fn into_demo(self, driver_id: &str, agent: Agent, track_id: u64, lap_index: usize, dt: f64) -> Demonstration {
        Demonstration {
            driver_id: driver_id.into(),
            agent,
            track_id,
            lap_index,
            outcome: self.outcome,
            dt,
            rows: self.rows,
        }
    }
}

/// Drives one lap from a standing start until the lap is finished, the car
/// leaves the track, the driver fails, or `max_time` elapses.
pub fn drive_lap(
    track: &TrackSpec,
    params: &VehicleParams,
    driver: &mut dyn Driver,
    max_time: f64,
) -> LapRun {
    let mut state = start_state(track);
    let mut progress = LapProgress::new();
    let max_steps = (max_time / params.dt).ceil() as usize;
    let mut rows = Vec::new();
    for k in 0..max_steps {
        let action = match driver.act(&state, track) {
            Ok(a) => a.clamped(params.delta_hw_max),
            Err(e) => {
                return LapRun {
                    rows,
                    outcome: LapOutcome::Error,
                    lap_time: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(DemoRow::new(k as f64 * params.dt, &state, &action));
        let next = match vehicle::step(&state, &action, params) {
            Ok(s) => s,
            Err(e) => {
                return LapRun {
                    rows,
                    outcome: LapOutcome::Error,
                    lap_time: None,
                    error: Some(e.to_string()),
                }
            }
        };
        match vehicle::lap_status(track, &state, &next, &mut progress, params.dt) {
            LapStatus::Running => state = next,
            LapStatus::Finished { lap_time } => {
                return LapRun {
                    rows,
                    outcome: LapOutcome::Finished,
                    lap_time: Some(lap_time),
                    error: None,
                }
            }
            LapStatus::OffTrack => {
                return LapRun {
                    rows,
                    outcome: LapOutcome::OffTrack,
                    lap_time: None,
                    error: None,
                }
            }
        }
    }
    LapRun {
        rows,
        outcome: LapOutcome::Timeout,
        lap_time: None,
        error: None,
    }
}
