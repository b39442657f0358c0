//! C ABI over the promod simulator, target-trajectory distributions and
//! trained driver models.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load`/`*_generate` function and released by the matching
//! `*_free`. Fallible functions return a [`PromodStatus`]; on failure the
//! message is available from [`promod_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use promod::demo::LapOutcome;
use promod::io::{self, LoadedModel};
use promod::promp::{ProMp, CHANNELS};
use promod::sim::start_state;
use promod::track::{generate_track, TrackParams, TrackSpec};
use promod::vehicle::{lap_status, step, Action, LapProgress, LapStatus, VehicleParams, VehicleState};
use promod::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    Numerical = 5,
    UnknownTrack = 6,
    Panic = 7,
}

/// Lap state reported by the simulator.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromodLapState {
    Running = 0,
    Finished = 1,
    OffTrack = 2,
    Timeout = 3,
    Failed = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PromodVehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub psidot: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PromodLocalization {
    pub s: f64,
    pub d: f64,
    pub heading: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromodLapResult {
    pub state: PromodLapState,
    /// Lap time in seconds, NaN unless finished.
    pub lap_time: f64,
    pub steps: usize,
}

pub struct PromodTrack(TrackSpec);

pub struct PromodSim {
    track: TrackSpec,
    params: VehicleParams,
    state: VehicleState,
    progress: LapProgress,
    lap: PromodLapState,
    lap_time: f64,
}

pub struct PromodProMp(ProMp);

pub struct PromodModel(LoadedModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PromodStatus {
    match e {
        Error::Io { .. } => PromodStatus::Io,
        Error::Malformed { .. } | Error::Schema { .. } | Error::Json(_) => PromodStatus::Malformed,
        Error::UnknownTrack(_) => PromodStatus::UnknownTrack,
        Error::Invalid(_) | Error::Shape(_) | Error::DemoTooShort { .. } | Error::NonMonotoneTime { .. } => {
            PromodStatus::InvalidArgument
        }
        _ => PromodStatus::Numerical,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (PromodStatus, String)>) -> PromodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PromodStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PromodStatus::Panic
        }
    }
}

fn lib<T>(r: promod::Result<T>) -> Result<T, (PromodStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PromodStatus, String) {
    (PromodStatus::NullPointer, format!("{what} is null"))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PromodStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (PromodStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (PromodStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (PromodStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

fn grip_params(grip: f64) -> Result<VehicleParams, (PromodStatus, String)> {
    if !(grip > 0.0 && grip.is_finite()) {
        return Err((PromodStatus::InvalidArgument, format!("grip must be positive, got {grip}")));
    }
    let p = VehicleParams::default().with_grip(grip);
    lib(p.validate())?;
    Ok(p)
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (PromodStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn promod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

// ---- tracks ----

/// Generates a track from `seed` with default parameters.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn promod_track_generate(seed: u64, out: *mut *mut PromodTrack) -> PromodStatus {
    guard(|| {
        let t = lib(generate_track(seed, &TrackParams::default()))?;
        put(out, PromodTrack(t))
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn promod_track_load(path: *const c_char, out: *mut *mut PromodTrack) -> PromodStatus {
    guard(|| {
        let t = lib(io::read_track(&path_arg(path)?))?;
        put(out, PromodTrack(t))
    })
}

/// # Safety
/// `track` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn promod_track_free(track: *mut PromodTrack) {
    if !track.is_null() {
        drop(Box::from_raw(track));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_track_length(track: *const PromodTrack, out: *mut f64) -> PromodStatus {
    guard(|| {
        let t = get(track, "track")?;
        *get_mut(out, "out")? = t.0.total_length();
        Ok(())
    })
}

/// Projects a world point onto the centerline.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_track_localize(
    track: *const PromodTrack,
    x: f64,
    y: f64,
    out: *mut PromodLocalization,
) -> PromodStatus {
    guard(|| {
        let t = get(track, "track")?;
        if !(x.is_finite() && y.is_finite()) {
            return Err((PromodStatus::InvalidArgument, "point must be finite".into()));
        }
        let l = t.0.localize([x, y]);
        *get_mut(out, "out")? = PromodLocalization {
            s: l.s,
            d: l.d,
            heading: l.heading,
        };
        Ok(())
    })
}

// ---- simulator ----

fn export_state(s: &VehicleState) -> PromodVehicleState {
    PromodVehicleState {
        x: s.x,
        y: s.y,
        psi: s.psi,
        vx: s.vx,
        vy: s.vy,
        psidot: s.psidot,
    }
}

/// Creates a simulator at the start line of `track` with the grip scaled by
/// `grip`. The track is copied.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_sim_new(track: *const PromodTrack, grip: f64, out: *mut *mut PromodSim) -> PromodStatus {
    guard(|| {
        let t = get(track, "track")?.0.clone();
        let params = grip_params(grip)?;
        let state = start_state(&t);
        put(
            out,
            PromodSim {
                track: t,
                params,
                state,
                progress: LapProgress::new(),
                lap: PromodLapState::Running,
                lap_time: f64::NAN,
            },
        )
    })
}

/// # Safety
/// `sim` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn promod_sim_free(sim: *mut PromodSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Puts the car back at rest on the start line.
///
/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_sim_reset(sim: *mut PromodSim) -> PromodStatus {
    guard(|| {
        let s = get_mut(sim, "sim")?;
        s.state = start_state(&s.track);
        s.progress = LapProgress::new();
        s.lap = PromodLapState::Running;
        s.lap_time = f64::NAN;
        Ok(())
    })
}

/// Fixed simulation step in seconds.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_sim_dt(sim: *const PromodSim, out: *mut f64) -> PromodStatus {
    guard(|| {
        *get_mut(out, "out")? = get(sim, "sim")?.params.dt;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_sim_state(sim: *const PromodSim, out: *mut PromodVehicleState) -> PromodStatus {
    guard(|| {
        *get_mut(out, "out")? = export_state(&get(sim, "sim")?.state);
        Ok(())
    })
}

/// Advances one step with handwheel angle `delta` (degrees), throttle and
/// brake in `[0, 1]`. Inputs are clamped to the vehicle limits. After the lap
/// ends the state is frozen and further steps only report the lap state.
///
/// # Safety
/// `sim` must be valid; `lap` may be null.
#[no_mangle]
pub unsafe extern "C" fn promod_sim_step(
    sim: *mut PromodSim,
    delta: f64,
    gas: f64,
    brake: f64,
    lap: *mut PromodLapState,
) -> PromodStatus {
    guard(|| {
        let s = get_mut(sim, "sim")?;
        if s.lap == PromodLapState::Running {
            let action = Action::new(delta, gas, brake);
            if !action.is_finite() {
                return Err((PromodStatus::InvalidArgument, "action must be finite".into()));
            }
            let next = match step(&s.state, &action, &s.params) {
                Ok(n) => n,
                Err(e) => {
                    s.lap = PromodLapState::Failed;
                    return Err((status_of(&e), e.to_string()));
                }
            };
            let dt = s.params.dt;
            s.lap = match lap_status(&s.track, &s.state, &next, &mut s.progress, dt) {
                LapStatus::Running => PromodLapState::Running,
                LapStatus::Finished { lap_time } => {
                    s.lap_time = lap_time;
                    PromodLapState::Finished
                }
                LapStatus::OffTrack => PromodLapState::OffTrack,
            };
            s.state = next;
        }
        if let Some(l) = lap.as_mut() {
            *l = s.lap;
        }
        Ok(())
    })
}

/// Lap time of a finished lap, NaN otherwise.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_sim_lap_time(sim: *const PromodSim, out: *mut f64) -> PromodStatus {
    guard(|| {
        *get_mut(out, "out")? = get(sim, "sim")?.lap_time;
        Ok(())
    })
}

// ---- target-trajectory distributions ----

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn promod_promp_load(path: *const c_char, out: *mut *mut PromodProMp) -> PromodStatus {
    guard(|| {
        let p = lib(io::read_promp(&path_arg(path)?))?;
        put(out, PromodProMp(p))
    })
}

/// # Safety
/// `promp` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn promod_promp_free(promp: *mut PromodProMp) {
    if !promp.is_null() {
        drop(Box::from_raw(promp));
    }
}

/// Number of output channels (x, ẋ, y, ẏ).
#[no_mangle]
pub extern "C" fn promod_promp_channels() -> usize {
    CHANNELS
}

/// Mean trajectory at phase `z ∈ [0, 1]`; writes `promod_promp_channels()`
/// values to `out`.
///
/// # Safety
/// `out` must hold `promod_promp_channels()` doubles.
#[no_mangle]
pub unsafe extern "C" fn promod_promp_mean(promp: *const PromodProMp, z: f64, out: *mut f64) -> PromodStatus {
    guard(|| {
        let p = get(promp, "promp")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !(0.0..=1.0).contains(&z) {
            return Err((PromodStatus::InvalidArgument, format!("phase {z} outside [0, 1]")));
        }
        let v = p.0.mean_trajectory().eval(z);
        std::slice::from_raw_parts_mut(out, CHANNELS).copy_from_slice(&v);
        Ok(())
    })
}

/// Draws one trajectory with `seed` and evaluates it at `n` phases `zs`;
/// writes `n * promod_promp_channels()` values, row-major, to `out`.
///
/// # Safety
/// `zs` must hold `n` doubles and `out` `n * promod_promp_channels()`.
#[no_mangle]
pub unsafe extern "C" fn promod_promp_sample(
    promp: *const PromodProMp,
    seed: u64,
    zs: *const f64,
    n: usize,
    out: *mut f64,
) -> PromodStatus {
    guard(|| {
        let p = get(promp, "promp")?;
        if n > 0 && (zs.is_null() || out.is_null()) {
            return Err(null("buffer"));
        }
        if n == 0 {
            return Ok(());
        }
        let zs = std::slice::from_raw_parts(zs, n);
        if let Some(z) = zs.iter().find(|z| !(0.0..=1.0).contains(*z)) {
            return Err((PromodStatus::InvalidArgument, format!("phase {z} outside [0, 1]")));
        }
        let reg = p.0.default_reg(promod::promp::ProMpConfig::default().reg_factor);
        let traj = lib(p.0.sample_trajectory(seed, 1.0, reg))?;
        let out = std::slice::from_raw_parts_mut(out, n * CHANNELS);
        for (row, z) in out.chunks_exact_mut(CHANNELS).zip(zs) {
            row.copy_from_slice(&traj.eval(*z));
        }
        Ok(())
    })
}

// ---- trained models ----

/// Loads a model bundle directory (ProMoD or baseline).
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn promod_model_load(dir: *const c_char, out: *mut *mut PromodModel) -> PromodStatus {
    guard(|| {
        let m = lib(io::read_bundle(&path_arg(dir)?))?;
        put(out, PromodModel(m))
    })
}

/// # Safety
/// `model` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn promod_model_free(model: *mut PromodModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Drives one closed-loop lap. `seed` selects the sampled target trajectory
/// and is ignored by baseline models.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn promod_model_rollout(
    model: *const PromodModel,
    track: *const PromodTrack,
    grip: f64,
    seed: u64,
    max_time: f64,
    out: *mut PromodLapResult,
) -> PromodStatus {
    guard(|| {
        let m = get(model, "model")?;
        let t = &get(track, "track")?.0;
        let out = get_mut(out, "out")?;
        let params = grip_params(grip)?;
        if !(max_time > 0.0) {
            return Err((PromodStatus::InvalidArgument, "max_time must be positive".into()));
        }
        let run = match &m.0 {
            LoadedModel::ProMoD(p) => lib(p.rollout(t, &params, seed, max_time))?.run,
            LoadedModel::Baseline(b) => b.rollout(t, &params, max_time),
        };
        *out = PromodLapResult {
            state: match run.outcome {
                LapOutcome::Finished => PromodLapState::Finished,
                LapOutcome::OffTrack => PromodLapState::OffTrack,
                LapOutcome::Timeout => PromodLapState::Timeout,
                LapOutcome::Incomplete => PromodLapState::Running,
                LapOutcome::Error => PromodLapState::Failed,
            },
            lap_time: run.lap_time.unwrap_or(f64::NAN),
            steps: run.rows.len(),
        };
        Ok(())
    })
}
