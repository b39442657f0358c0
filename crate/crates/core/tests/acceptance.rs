//! Acceptance suite: one PASS/FAIL line per criterion, thresholds pinned
//! below. Runs without the libtest harness so the lines are always shown.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use promod::baselines::{train_dagger, train_supervised, DaggerConfig};
use promod::clothoid::{fit_g1, fresnel, Pose};
use promod::demo::{Agent, Demonstration};
use promod::eval::{self, band_aggressiveness, kruskal_wallis, Candidate, RobustnessConfig};
use promod::expert::{OuNoise, PidDriver, PidExpert};
use promod::linalg::Mat;
use promod::nn::{gradient_check, Architecture, NetworkModel, Sample};
use promod::policy::{dataset_size, train_promod, ProMoDConfig};
use promod::promp::{basis_matrix, fit_gaussian, fit_promp, fit_weights, temporal_modulation, PhaseGrid, ProMpConfig};
use promod::sim::drive_lap;
use promod::track::{generate_track, TrackParams, TrackSpec};
use promod::vehicle::VehicleParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const FRESNEL_TOL: f64 = 1e-10;
const G1_TOL: f64 = 1e-8;
const G1_PAIRS: usize = 1000;
const RIDGE_TOL: f64 = 1e-9;
const GAUSS_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const NUMERICS_LIMIT: Duration = Duration::from_secs(60);

const FIDELITY_LAPS: u64 = 10;
const RECON_TOL: f64 = 0.01;
const MC_SAMPLES: usize = 10_000;
const MC_TOL: f64 = 0.05;
const FIDELITY_LIMIT: Duration = Duration::from_secs(120);

const E2E_TRACKS: [u64; 5] = [1, 2, 3, 4, 5];
const E2E_LAPS: u64 = 10;
const E2E_ATTEMPTS: usize = 10;
const E2E_STRIDE: usize = 2;
const E2E_EPOCHS: usize = 20;
const MAX_LAP_TIME: f64 = 120.0;
const E2E_LIMIT: Duration = Duration::from_secs(30 * 60);

const METRIC_TOL: f64 = 1e-12;
const KW_H: f64 = 3.857;
const KW_P: f64 = 0.0495;
const KW_TOL: f64 = 1e-3;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn numerics(r: &mut Report) {
    let t0 = Instant::now();
    let mut fresnel_err: f64 = 0.0;
    for i in 0..=160 {
        let s = -6.0 + 0.075 * i as f64;
        let (c, sn) = fresnel(s);
        let (qc, qs) = fresnel_quadrature(s);
        fresnel_err = fresnel_err.max((c - qc).abs()).max((sn - qs).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut g1_err: f64 = 0.0;
    let mut g1_fail = 0;
    for _ in 0..G1_PAIRS {
        let a = Pose::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), 0.0);
        let dist = rng.gen_range(0.5..40.0);
        let dir = rng.gen_range(-3.1..3.1f64);
        let b = Pose::new(a.x + dist * dir.cos(), a.y + dist * dir.sin(), dir + rng.gen_range(-2.5..2.5));
        let a = Pose::new(a.x, a.y, dir + rng.gen_range(-2.5..2.5));
        match fit_g1(a, b) {
            Ok(c) => g1_err = g1_err.max(endpoint_residual(&c, b)),
            Err(_) => g1_fail += 1,
        }
    }

    let cfg = ProMpConfig::default();
    let phi = basis_matrix(&PhaseGrid::uniform(cfg.n_samples, 1.0), &cfg.centers(), cfg.bandwidth()).unwrap();
    let data: Vec<f64> = (0..cfg.n_samples * 4).map(|_| rng.gen_range(-100.0..100.0)).collect();
    let target = Mat::from_rows(cfg.n_samples, 4, data).unwrap();
    let w = fit_weights(&target, &phi, cfg.epsilon).unwrap();
    let oracle = ridge_oracle(&target, &phi, cfg.epsilon);
    let ridge_err = (to_na(&w) - &oracle).amax() / oracle.amax().max(1.0);

    let ws: Vec<Vec<f64>> = (0..10).map(|_| (0..152).map(|_| rng.gen_range(-50.0..50.0)).collect()).collect();
    let (mu, sigma) = fit_gaussian(&ws).unwrap();
    let (m0, s0) = gaussian_oracle(&ws);
    let gauss_err = (0..152)
        .map(|i| (mu[i] - m0[i]).abs())
        .chain((0..152 * 152).map(|k| (sigma[(k / 152, k % 152)] - s0[(k / 152, k % 152)]).abs()))
        .fold(0.0, f64::max);

    let model = NetworkModel::init(Architecture::default(), 5, 1);
    let batch: Vec<Sample> = (0..6)
        .map(|_| Sample {
            inputs: (0..5).map(|_| (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
            target: [rng.gen_range(-0.5..0.5), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        })
        .collect();
    let grad_err = gradient_check(&model, &batch, 0.02, 3);

    let elapsed = t0.elapsed();
    let ok = fresnel_err < FRESNEL_TOL
        && g1_fail == 0
        && g1_err < G1_TOL
        && ridge_err < RIDGE_TOL
        && gauss_err < GAUSS_TOL
        && grad_err < GRAD_TOL
        && elapsed < NUMERICS_LIMIT;
    r.line(
        "numerics",
        ok,
        format!(
            "fresnel {fresnel_err:.1e}, fit_g1 {g1_err:.1e} over {G1_PAIRS} pairs ({g1_fail} failed), ridge {ridge_err:.1e}, \
             gaussian {gauss_err:.1e}, gradient {grad_err:.1e}, {}",
            secs(elapsed)
        ),
    );
}

fn expert_laps(track: &TrackSpec, params: &VehicleParams, laps: u64) -> Vec<Demonstration> {
    let expert = PidExpert::default().noisy(OuNoise::default());
    (0..laps)
        .map(|k| {
            let mut d = PidDriver::new(expert.clone(), params, track.seed * 100 + k);
            drive_lap(track, params, &mut d, MAX_LAP_TIME).into_demo("pid", Agent::Synthetic, track.seed, k as usize, params.dt)
        })
        .collect()
}

fn promp_fidelity(r: &mut Report) {
    let t0 = Instant::now();
    let params = VehicleParams::default();
    let track = generate_track(1, &TrackParams::default()).unwrap();
    let laps = expert_laps(&track, &params, FIDELITY_LAPS);
    let finished: Vec<&Demonstration> = laps.iter().filter(|l| l.finished()).collect();
    let cfg = ProMpConfig::default();
    let phi = basis_matrix(&PhaseGrid::uniform(cfg.n_samples, 1.0), &cfg.centers(), cfg.bandwidth()).unwrap();

    // Worst per-channel relative RMSE of the single-lap reconstruction Φᵀw.
    let mut recon: f64 = 0.0;
    for lap in &finished {
        let t = temporal_modulation(lap, cfg.n_samples).unwrap().to_mat();
        let w = fit_weights(&t, &phi, cfg.epsilon).unwrap();
        let fit = phi.transpose().matmul(&w).unwrap();
        for ch in 0..4 {
            let (mut se, mut ss) = (0.0, 0.0);
            for i in 0..t.rows {
                se += (fit[(i, ch)] - t[(i, ch)]).powi(2);
                ss += t[(i, ch)].powi(2);
            }
            recon = recon.max((se / ss).sqrt());
        }
    }

    let promp = fit_promp(&finished, &cfg).unwrap();
    let reg = promp.default_reg(cfg.reg_factor);
    let chol = promp.sampling_factor(reg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dim = promp.mu_w.len();
    let mut acc = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for _ in 0..MC_SAMPLES {
        let w = promp.sample_with(&chol, &mut rng);
        let d = nalgebra::DVector::from_iterator(dim, w.iter().zip(&promp.mu_w).map(|(a, m)| a - m));
        acc.syger(1.0, &d, &d, 1.0);
    }
    let sample_cov = acc / MC_SAMPLES as f64;
    let mut expected = to_na(&promp.sigma_w);
    for i in 0..dim {
        expected[(i, i)] += reg;
    }
    // syger fills the lower triangle only.
    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    for i in 0..dim {
        for j in 0..=i {
            let f = if i == j { 1.0 } else { 2.0 };
            diff2 += f * (sample_cov[(i, j)] - expected[(i, j)]).powi(2);
            norm2 += f * expected[(i, j)].powi(2);
        }
    }
    let mc = (diff2 / norm2).sqrt();
    let elapsed = t0.elapsed();
    r.line(
        "promp fidelity",
        finished.len() == FIDELITY_LAPS as usize && recon < RECON_TOL && mc < MC_TOL && elapsed < FIDELITY_LIMIT,
        format!(
            "{} laps fitted, reconstruction rel. RMSE {recon:.2e}, MC covariance error {:.2}% at {MC_SAMPLES} samples, {}",
            finished.len(),
            100.0 * mc,
            secs(elapsed)
        ),
    );
}

fn end_to_end(r: &mut Report) {
    let t0 = Instant::now();
    let params = VehicleParams::default();
    let tracks: Vec<TrackSpec> = E2E_TRACKS.iter().map(|&s| generate_track(s, &TrackParams::default()).unwrap()).collect();
    let demos: Vec<Demonstration> = tracks.iter().flat_map(|t| expert_laps(t, &params, E2E_LAPS)).collect();
    let finished: Vec<&Demonstration> = demos.iter().filter(|d| d.finished()).collect();
    println!("  e2e: {} of {} expert laps finished ({})", finished.len(), demos.len(), secs(t0.elapsed()));

    let mut pcfg = ProMoDConfig::default();
    pcfg.policy.stride = E2E_STRIDE;
    pcfg.train.epochs = E2E_EPOCHS;
    let (promod, rep) = train_promod(&demos, &pcfg).unwrap();
    println!("  e2e: ProMoD trained on {} samples ({})", rep.samples, secs(t0.elapsed()));

    let mut train = pcfg.train.clone();
    train.seed = 1;
    let map: BTreeMap<u64, TrackSpec> = tracks.iter().map(|t| (t.seed, t.clone())).collect();
    let (bc, _) = train_supervised(&demos, &map, 4, E2E_STRIDE, &train).unwrap();
    println!("  e2e: BC trained ({})", secs(t0.elapsed()));

    let dcfg = DaggerConfig {
        cap: dataset_size(&finished, &pcfg.policy),
        max_time: MAX_LAP_TIME,
        train: train.clone(),
        ..DaggerConfig::default()
    };
    let (dagger, drep) = train_dagger(&PidExpert::default(), &tracks, &params, &dcfg).unwrap();
    println!(
        "  e2e: DAgger trained, collected {:?} of cap {} ({})",
        drep.collected,
        dcfg.cap,
        secs(t0.elapsed())
    );

    let rcfg = RobustnessConfig {
        grips: vec![1.0, 0.9],
        attempts: E2E_ATTEMPTS,
        seed: 0,
        max_time: MAX_LAP_TIME,
    };
    let candidates = vec![
        ("promod".to_string(), Candidate::ProMoD(&promod)),
        ("bc".to_string(), Candidate::Baseline(&bc)),
        ("dagger".to_string(), Candidate::Baseline(&dagger)),
    ];
    let rows = eval::robustness_suite(&candidates, &tracks, &params, &rcfg);
    let elapsed = t0.elapsed();
    let rows = match rows {
        Ok(rows) => {
            r.line("e2e (c) baselines deterministic", true, format!("{E2E_ATTEMPTS} identical rollouts per track and grip"));
            rows
        }
        Err(e) => {
            r.line("e2e (c) baselines deterministic", false, e.to_string());
            return;
        }
    };
    for row in &rows {
        println!("  e2e: {} track {} grip {}: {}/{}", row.model, row.track, row.grip, row.finished, row.attempts);
    }
    let at1 = eval::finished_tracks(&rows, 1.0);
    let at09 = eval::finished_tracks(&rows, 0.9);
    r.line(
        "e2e (a) ProMoD finishes every track at grip 1.0",
        at1["promod"] == tracks.len(),
        format!("{}/{} tracks within {E2E_ATTEMPTS} attempts", at1["promod"], tracks.len()),
    );
    r.line(
        "e2e (b) ProMoD finishes at least as many tracks at grip 0.9 as each baseline",
        at09["promod"] >= at09["bc"] && at09["promod"] >= at09["dagger"],
        format!("promod {}, bc {}, dagger {}", at09["promod"], at09["bc"], at09["dagger"]),
    );
    r.line("e2e runtime", elapsed < E2E_LIMIT, format!("{} (limit {})", secs(elapsed), secs(E2E_LIMIT)));

    // ProMoD against its teacher on lap time; reported, not thresholded.
    let expert_times: Vec<f64> = finished.iter().filter_map(|d| d.lap_time()).collect();
    let promod_times: Vec<f64> = tracks
        .iter()
        .flat_map(|t| {
            (0..E2E_ATTEMPTS).filter_map(|k| {
                promod
                    .rollout(t, &params, eval::attempt_seed(0, t.seed, k), MAX_LAP_TIME)
                    .ok()
                    .and_then(|ro| ro.run.lap_time)
            })
        })
        .collect();
    match kruskal_wallis(&promod_times, &expert_times) {
        Ok((h, p)) => r.line(
            "metrics: ProMoD vs expert lap time",
            p.is_finite(),
            format!("H = {h:.3}, p = {p:.3e} ({} vs {} laps)", promod_times.len(), expert_times.len()),
        ),
        Err(e) => r.line("metrics: ProMoD vs expert lap time", false, e.to_string()),
    }
}

fn metrics(r: &mut Report) {
    let cases: [(&[f64], f64, f64, f64, f64); 4] = [
        (&[0.0, 10.0, 20.0, 30.0], 0.1, 5.0, 216.0, 100.0),
        (&[6.0, 8.0, 4.0, 100.0, 300.0], 0.5, 5.0, 216.0, 302.0 / 3.0),
        (&[-6.0, -8.0, -4.0, -100.0, -300.0], 0.5, 5.0, 216.0, 302.0 / 3.0),
        (&[0.0, 0.1, 0.5, 1.0, 0.5], 1.0 / 150.0, 0.05, 0.95, (0.25 + 0.45 + 0.5) * 150.0 / 3.0),
    ];
    let mut worst: f64 = 0.0;
    for (x, dt, lo, hi, want) in cases {
        let got = band_aggressiveness(x, dt, lo, hi).unwrap();
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    let empty = band_aggressiveness(&[0.0, 1.0, 2.0], 0.1, 5.0, 216.0).is_err();
    r.line(
        "metrics: aggressiveness hand cases",
        worst < METRIC_TOL && empty,
        format!("max rel. error {worst:.1e}, empty band rejected: {empty}"),
    );

    let (h, p) = kruskal_wallis(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    r.line(
        "metrics: Kruskal-Wallis {1,2,3} vs {4,5,6}",
        (h - KW_H).abs() < KW_TOL && (p - KW_P).abs() < KW_TOL,
        format!("H = {h:.4}, p = {p:.4}"),
    );
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const PIPELINE_CONFIG: &str = r#"{
  "promod": {"policy": {"stride": 8}, "train": {"epochs": 2}},
  "baseline": {"stride": 8, "train": {"epochs": 2}},
  "dagger": {"iterations": 2, "train": {"epochs": 2}},
  "robustness": {"attempts": 2}
}"#;

fn run_pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("config.json"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["gen-track", "--seed", "1", "--out", "t1.json"],
        &["expert", "--track", "t1.json", "--laps", "3", "--noise-seed", "4", "--out", "demos.csv"],
        &["train", "--mode", "promod", "--demos", "demos.csv", "--out", "promod"],
        &["train", "--mode", "bc", "--demos", "demos.csv", "--track", "t1.json", "--out", "bc"],
        &["train", "--mode", "dagger", "--demos", "demos.csv", "--track", "t1.json", "--out", "dagger"],
        &["rollout", "--model", "promod", "--track", "t1.json", "--attempts", "2", "--out", "r_promod.csv"],
        &["rollout", "--model", "bc", "--track", "t1.json", "--out", "r_bc.csv"],
        &["eval", "--demos", "demos.csv", "--rollouts", "r_promod.csv", "r_bc.csv", "--track", "t1.json", "--out", "report"],
        &["robustness", "--models", "promod", "bc", "dagger", "--track", "t1.json", "--out", "report"],
        &["export-turing", "--laps", "demos.csv", "r_promod.csv", "--count", "3", "--seed", "2", "--out", "turing"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_promod"))
            .current_dir(dir)
            .args(["--config", "config.json"])
            .args(*args)
            .env("RUST_LOG", "warn")
            .env_remove("PROMOD_DATA_DIR")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism(r: &mut Report) {
    let t0 = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = run_pipeline(a.path()).and_then(|_| run_pipeline(b.path())) {
        r.line("determinism", false, e);
        return;
    }
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    let differing: Vec<_> = fa
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    r.line(
        "determinism",
        fa == fb && differing.is_empty() && fa.len() > 10,
        format!(
            "{} files from two pipeline runs, {} differ {:?}, {}",
            fa.len(),
            differing.len(),
            differing,
            secs(t0.elapsed())
        ),
    );
}

fn main() {
    // libtest-style filtering is not supported; `--list` prints nothing so
    // tooling that enumerates tests keeps working.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut r = Report { failed: 0 };
    numerics(&mut r);
    promp_fidelity(&mut r);
    metrics(&mut r);
    determinism(&mut r);
    end_to_end(&mut r);
    if r.failed > 0 {
        println!("{} acceptance criteria failed", r.failed);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
