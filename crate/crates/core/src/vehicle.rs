//! Planar two-track vehicle model with per-tire friction-circle limits.
//!
//! Each tire gets a slip-proportional lateral force and a commanded
//! longitudinal force (rear-wheel drive, four-wheel brake, contact-patch
//! resistance). The combined force vector is clamped to `mu * grip * Fz`
//! with static axle loads. Integration is semi-implicit Euler in the world
//! frame at a fixed step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::TrackSpec;

pub const GRAVITY: f64 = 9.81;

/// Below this forward speed the slip ratio denominator is held constant.
const SLIP_SPEED_FLOOR: f64 = 5.0;
/// Brake force fades linearly to zero below this wheel speed.
const BRAKE_FADE_SPEED: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub half_track: f64,
    pub max_engine_force: f64,
    pub max_brake_force: f64,
    pub mu: f64,
    pub steering_ratio: f64,
    /// Road-wheel angle limit in radians.
    pub max_wheel_angle: f64,
    /// Steering-wheel angle limit in degrees.
    pub delta_hw_max: f64,
    pub tire_stiffness: f64,
    /// Quadratic resistance coefficient, N per (m/s)^2.
    pub drag: f64,
    pub wheel_radius: f64,
    pub dt: f64,
    pub grip_scale: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1100.0,
            yaw_inertia: 1500.0,
            lf: 1.2,
            lr: 1.3,
            half_track: 0.8,
            max_engine_force: 4000.0,
            max_brake_force: 1500.0,
            mu: 0.7,
            steering_ratio: 8.0,
            max_wheel_angle: 30f64.to_radians(),
            delta_hw_max: 240.0,
            tire_stiffness: 40_000.0,
            drag: 0.45,
            wheel_radius: 0.3,
            dt: 1.0 / 150.0,
            grip_scale: 1.0,
        }
    }
}

impl VehicleParams {
    pub fn with_grip(mut self, grip_scale: f64) -> Self {
        self.grip_scale = grip_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mass,
            self.yaw_inertia,
            self.lf,
            self.lr,
            self.half_track,
            self.max_engine_force,
            self.max_brake_force,
            self.mu,
            self.steering_ratio,
            self.max_wheel_angle,
            self.delta_hw_max,
            self.tire_stiffness,
            self.wheel_radius,
            self.dt,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.drag >= 0.0) {
            return Err(Error::Invalid("vehicle parameters must be positive".into()));
        }
        if !(self.grip_scale > 0.0 && self.grip_scale <= 1.5) {
            return Err(Error::Invalid(format!(
                "grip_scale {} outside (0, 1.5]",
                self.grip_scale
            )));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    /// Static vertical load of one front and one rear tire.
    pub fn tire_loads(&self) -> (f64, f64) {
        let w = self.mass * GRAVITY / self.wheelbase();
        (0.5 * w * self.lr, 0.5 * w * self.lf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub psidot: f64,
    /// Wheel spin FL, FR, RL, RR.
    pub omega: [f64; 4],
}

impl VehicleState {
    pub fn at_rest(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi,
            ..Self::default()
        }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn world_velocity(&self) -> (f64, f64) {
        let (s, c) = self.psi.sin_cos();
        (c * self.vx - s * self.vy, s * self.vx + c * self.vy)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.psi, self.vx, self.vy, self.psidot]
            .iter()
            .chain(self.omega.iter())
            .all(|v| v.is_finite())
    }
}

/// Steering-wheel angle in degrees, pedals in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub delta: f64,
    pub gas: f64,
    pub brake: f64,
}

impl Action {
    pub fn new(delta: f64, gas: f64, brake: f64) -> Self {
        Self { delta, gas, brake }
    }

    pub fn clamped(self, delta_max: f64) -> Self {
        Self {
            delta: self.delta.clamp(-delta_max, delta_max),
            gas: self.gas.clamp(0.0, 1.0),
            brake: self.brake.clamp(0.0, 1.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.delta.is_finite() && self.gas.is_finite() && self.brake.is_finite()
    }
}

/// Body-frame tire positions FL, FR, RL, RR.
fn tire_positions(p: &VehicleParams) -> [(f64, f64); 4] {
    [
        (p.lf, p.half_track),
        (p.lf, -p.half_track),
        (-p.lr, p.half_track),
        (-p.lr, -p.half_track),
    ]
}

/// Body-frame forces and yaw moment acting on the chassis.
fn chassis_forces(state: &VehicleState, action: &Action, p: &VehicleParams) -> (f64, f64, f64) {
    let wheel_angle = (action.delta.to_radians() / p.steering_ratio)
        .clamp(-p.max_wheel_angle, p.max_wheel_angle);
    let (fz_front, fz_rear) = p.tire_loads();
    let grip = p.mu * p.grip_scale;
    let speed2 = state.vx * state.vx + state.vy * state.vy;
    let resistance = 0.25 * p.drag * speed2;

    let (mut fx, mut fy, mut mz) = (0.0, 0.0, 0.0);
    for (i, &(px, py)) in tire_positions(p).iter().enumerate() {
        let front = i < 2;
        let steer = if front { wheel_angle } else { 0.0 };
        let (ss, cs) = steer.sin_cos();
        let vwx = state.vx - state.psidot * py;
        let vwy = state.vy + state.psidot * px;
        let vlon = cs * vwx + ss * vwy;
        let vlat = -ss * vwx + cs * vwy;

        let slip = vlat / vlon.abs().max(SLIP_SPEED_FLOOR);
        let mut f_lat = -p.tire_stiffness * slip;
        let fade = (vlon / BRAKE_FADE_SPEED).clamp(-1.0, 1.0);
        let drive = if front {
            0.0
        } else {
            0.5 * action.gas * p.max_engine_force
        };
        let mut f_lon = drive - (0.25 * action.brake * p.max_brake_force + resistance) * fade;

        let limit = grip * if front { fz_front } else { fz_rear };
        let mag = f_lon.hypot(f_lat);
        if mag > limit {
            let k = limit / mag;
            f_lon *= k;
            f_lat *= k;
        }

        let bx = cs * f_lon - ss * f_lat;
        let by = ss * f_lon + cs * f_lat;
        fx += bx;
        fy += by;
        mz += px * by - py * bx;
    }
    (fx, fy, mz)
}

/// Advances the state by one fixed step `p.dt`.
pub fn step(state: &VehicleState, action: &Action, p: &VehicleParams) -> Result<VehicleState> {
    if !state.is_finite() {
        return Err(Error::NonFinite { what: "state" });
    }
    if !action.is_finite() {
        return Err(Error::NonFinite { what: "action" });
    }
    let action = action.clamped(p.delta_hw_max);
    let (fx, fy, mz) = chassis_forces(state, &action, p);

    let (s, c) = state.psi.sin_cos();
    let mut vwx = c * state.vx - s * state.vy;
    let mut vwy = s * state.vx + c * state.vy;
    vwx += (c * fx - s * fy) / p.mass * p.dt;
    vwy += (s * fx + c * fy) / p.mass * p.dt;
    let psidot = state.psidot + mz / p.yaw_inertia * p.dt;
    let psi = state.psi + psidot * p.dt;
    let (s, c) = psi.sin_cos();

    let mut next = VehicleState {
        x: state.x + vwx * p.dt,
        y: state.y + vwy * p.dt,
        psi,
        vx: c * vwx + s * vwy,
        vy: -s * vwx + c * vwy,
        psidot,
        omega: [0.0; 4],
    };
    next.omega = wheel_spin(&next, &action, p);
    if !next.is_finite() {
        return Err(Error::NonFinite {
            what: "integrated state",
        });
    }
    Ok(next)
}

/// Rolling wheel speeds (no longitudinal slip is modelled).
fn wheel_spin(state: &VehicleState, action: &Action, p: &VehicleParams) -> [f64; 4] {
    let wheel_angle = (action.delta.to_radians() / p.steering_ratio)
        .clamp(-p.max_wheel_angle, p.max_wheel_angle);
    let mut omega = [0.0; 4];
    for (i, &(px, py)) in tire_positions(p).iter().enumerate() {
        let steer = if i < 2 { wheel_angle } else { 0.0 };
        let (ss, cs) = steer.sin_cos();
        let vwx = state.vx - state.psidot * py;
        let vwy = state.vy + state.psidot * px;
        omega[i] = (cs * vwx + ss * vwy) / p.wheel_radius;
    }
    omega
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LapStatus {
    Running,
    Finished { lap_time: f64 },
    OffTrack,
}

/// Signed arc-length progress since the lap started.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LapProgress {
    pub net: f64,
    pub steps: usize,
    last_s: Option<f64>,
}

impl LapProgress {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Margin beyond the track half-width before a car counts as off track.
pub const OFF_TRACK_MARGIN: f64 = 1.0;

pub fn lap_status(
    track: &TrackSpec,
    prev: &VehicleState,
    cur: &VehicleState,
    progress: &mut LapProgress,
    dt: f64,
) -> LapStatus {
    let total = track.total_length();
    let s_prev = match progress.last_s {
        Some(s) => s,
        None => track.localize([prev.x, prev.y]).s,
    };
    let loc = track.localize([cur.x, cur.y]);
    progress.steps += 1;
    progress.last_s = Some(loc.s);
    if loc.d.abs() > track.width / 2.0 + OFF_TRACK_MARGIN {
        return LapStatus::OffTrack;
    }
    let mut ds = loc.s - s_prev;
    if ds > total / 2.0 {
        ds -= total;
    } else if ds < -total / 2.0 {
        ds += total;
    }
    progress.net += ds;
    let crossed = loc.s < s_prev && ds > 0.0;
    if crossed && progress.net >= 0.95 * total {
        LapStatus::Finished {
            lap_time: progress.steps as f64 * dt,
        }
    } else {
        LapStatus::Running
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{generate_track, TrackParams};

    #[test]
    fn rest_stays_at_rest() {
        let p = VehicleParams::default();
        let s0 = VehicleState::at_rest(3.0, -2.0, 0.4);
        let s1 = step(&s0, &Action::default(), &p).unwrap();
        assert_eq!(s0, s1);
    }

    #[test]
    fn partial_gas_matches_newton() {
        // 2000 N on the rear axle stays inside the friction circle.
        let p = VehicleParams::default();
        let mut s = VehicleState::default();
        let a = Action::new(0.0, 0.5, 0.0);
        let n = (1.0 / p.dt).round() as usize;
        for _ in 0..n {
            s = step(&s, &a, &p).unwrap();
        }
        let expected = 0.5 * p.max_engine_force / p.mass * 1.0;
        assert!((s.vx - expected).abs() / expected < 0.01, "{} vs {expected}", s.vx);
        assert!(s.vy.abs() < 1e-12 && s.psidot.abs() < 1e-12);
    }

    #[test]
    fn low_speed_yaw_rate_matches_kinematic_bicycle() {
        let p = VehicleParams::default();
        let delta = 24.0; // 3 degrees at the road wheel
        let mut s = VehicleState {
            vx: 5.0,
            ..Default::default()
        };
        let a = Action::new(delta, 0.0, 0.0);
        for _ in 0..600 {
            s = step(&s, &a, &p).unwrap();
            // hold speed
            let k = 5.0 / s.speed();
            s.vx *= k;
            s.vy *= k;
        }
        let radius = p.wheelbase() / (delta.to_radians() / p.steering_ratio).tan();
        let kin = s.vx / radius;
        assert!((s.psidot - kin).abs() / kin < 0.05, "{} vs {kin}", s.psidot);
    }

    #[test]
    fn acceleration_bounded_by_friction_circle() {
        let p = VehicleParams::default().with_grip(0.9);
        let cases = [
            (VehicleState { vx: 30.0, ..Default::default() }, Action::new(240.0, 1.0, 1.0)),
            (VehicleState { vx: 10.0, vy: 3.0, psidot: 1.0, ..Default::default() }, Action::new(-240.0, 1.0, 0.0)),
            (VehicleState::default(), Action::new(0.0, 1.0, 0.0)),
        ];
        for (s0, a) in cases {
            let s1 = step(&s0, &a, &p).unwrap();
            let v0 = s0.world_velocity();
            let v1 = s1.world_velocity();
            let acc = (v1.0 - v0.0).hypot(v1.1 - v0.1) / p.dt;
            assert!(acc <= p.mu * p.grip_scale * GRAVITY + 1e-6, "{acc}");
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = VehicleParams::default();
        let s = VehicleState { vx: f64::NAN, ..Default::default() };
        assert!(step(&s, &Action::default(), &p).is_err());
        let a = Action::new(f64::INFINITY, 0.0, 0.0);
        assert!(step(&VehicleState::default(), &a, &p).is_err());
    }

    #[test]
    fn coasting_never_gains_energy() {
        let p = VehicleParams::default();
        let mut s = VehicleState { vx: 25.0, ..Default::default() };
        let mut e = s.speed().powi(2);
        for _ in 0..2000 {
            s = step(&s, &Action::default(), &p).unwrap();
            let e1 = s.speed().powi(2);
            assert!(e1 <= e);
            e = e1;
        }
    }

    #[test]
    fn glued_lap_finishes_and_offset_goes_off_track() {
        let track = generate_track(2, &TrackParams::default()).unwrap();
        let dt = 1.0 / 150.0;
        let mut progress = LapProgress::new();
        let (x, y, psi) = track.start_pose();
        let mut prev = VehicleState::at_rest(x, y, psi);
        let n = (track.total_length() / 0.2).ceil() as usize;
        let mut finished = None;
        for k in 1..=n + 5 {
            let (x, y, psi) = track.pose_at(k as f64 * 0.2);
            let cur = VehicleState::at_rest(x, y, psi);
            if let LapStatus::Finished { lap_time } = lap_status(&track, &prev, &cur, &mut progress, dt) {
                finished = Some((k, lap_time));
                break;
            }
            prev = cur;
        }
        let (k, lap_time) = finished.expect("lap should finish");
        assert_eq!(lap_time, k as f64 * dt);

        let mut progress = LapProgress::new();
        let (x, y, psi) = track.pose_at(100.0);
        let far = VehicleState::at_rest(x - 10.0 * psi.sin(), y + 10.0 * psi.cos(), psi);
        assert_eq!(lap_status(&track, &far, &far, &mut progress, dt), LapStatus::OffTrack);
    }

    #[test]
    fn reverse_past_start_keeps_running() {
        let track = generate_track(2, &TrackParams::default()).unwrap();
        let mut progress = LapProgress::new();
        let total = track.total_length();
        let pose = |s: f64| {
            let (x, y, psi) = track.pose_at(s);
            VehicleState::at_rest(x, y, psi)
        };
        let mut prev = pose(20.0);
        // Drive backward across the start line and on around.
        for k in 1..200 {
            let cur = pose(20.0 - k as f64 * 0.5);
            assert_eq!(lap_status(&track, &prev, &cur, &mut progress, 0.01), LapStatus::Running);
            prev = cur;
        }
        // Then forward across the start again: net progress is negative.
        for k in 1..200 {
            let cur = pose(total - 79.5 + k as f64 * 0.5);
            assert_eq!(lap_status(&track, &prev, &cur, &mut progress, 0.01), LapStatus::Running);
            prev = cur;
        }
        assert!(progress.net < 0.95 * total);
    }
}
