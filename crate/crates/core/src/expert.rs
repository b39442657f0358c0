//! Synthetic PID driver: the demonstration source and the DAgger oracle.
//!
//! Steering is a PID on the lateral offset of a look-ahead point (plus a
//! heading term) around a curvature feed-forward. Speed follows a
//! friction-limited profile over the curvature preview and is tracked by a
//! second PID on gas/brake. Optional Ornstein–Uhlenbeck noise perturbs the
//! pedals and steering to give lap-to-lap variance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Driver;
use crate::track::{wrap_angle, TrackSpec};
use crate::vehicle::{Action, VehicleParams, VehicleState, GRAVITY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuNoise {
    /// Correlation time in seconds.
    pub tau: f64,
    /// Stationary std per channel: steering (deg), gas, brake.
    pub std: [f64; 3],
}

impl Default for OuNoise {
    fn default() -> Self {
        Self {
            tau: 0.5,
            std: [2.0, 0.03, 0.01],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidExpert {
    pub lookahead_time: f64,
    pub min_lookahead: f64,
    /// Steering-wheel degrees per meter of look-ahead offset.
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Meters of equivalent offset per radian of heading error.
    pub heading_weight: f64,
    pub integral_limit: f64,
    /// Lateral-acceleration margin of the speed law.
    pub lat_factor: f64,
    /// Friction coefficient the speed law plans with.
    pub mu_plan: f64,
    /// Deceleration the speed law plans with (m/s²).
    pub decel_plan: f64,
    pub v_max: f64,
    /// Number of track segments previewed by the speed law.
    pub preview_segments: usize,
    pub speed_kp: f64,
    pub speed_ki: f64,
    pub noise: Option<OuNoise>,
}

impl Default for PidExpert {
    fn default() -> Self {
        Self {
            lookahead_time: 0.4,
            min_lookahead: 4.0,
            kp: 20.0,
            ki: 2.0,
            kd: 3.0,
            heading_weight: 2.0,
            integral_limit: 3.0,
            lat_factor: 0.9,
            mu_plan: 0.7,
            decel_plan: 1.2,
            v_max: 40.0,
            preview_segments: 15,
            speed_kp: 0.5,
            speed_ki: 0.1,
            noise: None,
        }
    }
}

impl PidExpert {
    pub fn noisy(mut self, noise: OuNoise) -> Self {
        self.noise = Some(noise);
        self
    }

    /// Friction-limited target speed at arc length `s`, looking
    /// `preview_segments` segments ahead.
    pub fn target_speed(&self, track: &TrackSpec, s: f64) -> f64 {
        let horizon = self.preview_segments as f64 * track.total_length() / track.segment_count() as f64;
        let a_lat = self.lat_factor * self.lat_factor * self.mu_plan * GRAVITY;
        let mut v = self.v_max;
        let mut dist = 0.0;
        while dist <= horizon {
            let k = track.curvature_at(s + dist).abs();
            if k > 1e-9 {
                let v_curve = (a_lat / k).sqrt();
                let reachable = (v_curve * v_curve + 2.0 * self.decel_plan * dist).sqrt();
                v = v.min(reachable);
            }
            dist += 2.0;
        }
        v
    }
}

/// A PID expert with its integrator, differentiator and noise state.
#[derive(Debug, Clone)]
pub struct PidDriver {
    pub expert: PidExpert,
    params: VehicleParams,
    integral: f64,
    prev_error: Option<f64>,
    speed_integral: f64,
    noise_state: [f64; 3],
    rng: ChaCha8Rng,
}

impl PidDriver {
    pub fn new(expert: PidExpert, params: &VehicleParams, noise_seed: u64) -> Self {
        Self {
            expert,
            params: params.clone(),
            integral: 0.0,
            prev_error: None,
            speed_integral: 0.0,
            noise_state: [0.0; 3],
            rng: ChaCha8Rng::seed_from_u64(noise_seed),
        }
    }

    /// Noise-free expert action for `state`; updates the controller memory.
    pub fn pid_action(&mut self, state: &VehicleState, track: &TrackSpec) -> Result<Action> {
        let e = &self.expert;
        let p = &self.params;
        let dt = p.dt;
        let loc = track.localize([state.x, state.y]);
        if loc.d.abs() > 3.0 * track.width {
            return Err(Error::ExpertUndefined {
                distance: loc.d.abs(),
            });
        }
        let speed = state.speed();
        let lookahead = (e.lookahead_time * speed).max(e.min_lookahead);
        let (sp, cp) = state.psi.sin_cos();
        let ahead = track.localize([state.x + lookahead * cp, state.y + lookahead * sp]);
        let heading_err = wrap_angle(state.psi - loc.heading);
        let error = ahead.d + e.heading_weight * heading_err;

        let deriv = match self.prev_error {
            Some(prev) => (error - prev) / dt,
            None => 0.0,
        };
        self.prev_error = Some(error);
        self.integral = (self.integral + error * dt).clamp(-e.integral_limit, e.integral_limit);

        let kappa_ff = track.curvature_at(loc.s + 0.5 * lookahead);
        let feed_forward = p.steering_ratio * (p.wheelbase() * kappa_ff).atan().to_degrees();
        let delta = feed_forward - (e.kp * error + e.ki * self.integral + e.kd * deriv);

        let v_target = e.target_speed(track, loc.s);
        let v_err = v_target - state.vx;
        self.speed_integral = (self.speed_integral + v_err * dt).clamp(-5.0, 5.0);
        let resist = p.drag * state.vx * state.vx.abs() / p.max_engine_force;
        let u = resist + e.speed_kp * v_err + e.speed_ki * self.speed_integral;
        let (gas, brake) = if u >= 0.0 {
            (u, 0.0)
        } else {
            (0.0, -u * p.max_engine_force / p.max_brake_force)
        };
        Ok(Action::new(delta, gas, brake).clamped(p.delta_hw_max))
    }

    fn noise_step(&mut self) -> [f64; 3] {
        let Some(noise) = &self.expert.noise else {
            return [0.0; 3];
        };
        let dt = self.params.dt;
        for (i, x) in self.noise_state.iter_mut().enumerate() {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            *x += -*x / noise.tau * dt + noise.std[i] * (2.0 * dt / noise.tau).sqrt() * n;
        }
        self.noise_state
    }
}

impl Driver for PidDriver {
    fn act(&mut self, state: &VehicleState, track: &TrackSpec) -> Result<Action> {
        let a = self.pid_action(state, track)?;
        let n = self.noise_step();
        Ok(Action::new(a.delta + n[0], a.gas + n[1], a.brake + n[2]).clamped(self.params.delta_hw_max))
    }
}
