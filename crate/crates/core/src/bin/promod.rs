use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use promod::baselines::{train_dagger, train_supervised};
use promod::config::ExperimentConfig;
use promod::demo::{Agent, Demonstration};
use promod::eval::{self, Candidate, RobustnessConfig};
use promod::expert::PidDriver;
use promod::io::{self, data_path, LoadedModel};
use promod::policy::{dataset_size, train_promod};
use promod::promp::fit_promp;
use promod::serve::{load_playback, serve, Session};
use promod::sim::drive_lap;
use promod::track::{generate_track, TrackSpec};
use promod::turing::{self, Verdicts};
use promod::Error;

#[derive(Parser)]
#[command(name = "promod", version, about = "Driver-style imitation toolkit")]
struct Cli {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Promod,
    Bc,
    Dagger,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a track from a seed.
    GenTrack {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive laps with the PID expert.
    Expert {
        #[arg(long)]
        track: PathBuf,
        #[arg(long, default_value_t = 10)]
        laps: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Drive without action noise.
        #[arg(long)]
        no_noise: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the target-trajectory distribution of one track.
    FitPromp {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train ProMoD or a baseline.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, num_args = 1..)]
        demos: Vec<PathBuf>,
        /// Track files; tracks missing here are regenerated from their seed.
        #[arg(long = "track", num_args = 1..)]
        tracks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a trained model.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long, default_value_t = 1)]
        attempts: usize,
        #[arg(long, default_value_t = 1.0)]
        grip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics and significance tests for demonstrations and rollouts.
    Eval {
        #[arg(long, num_args = 1..)]
        demos: Vec<PathBuf>,
        #[arg(long, num_args = 0..)]
        rollouts: Vec<PathBuf>,
        #[arg(long = "track", num_args = 0..)]
        tracks: Vec<PathBuf>,
        /// Driver all others are compared with; defaults to the first lap's.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finish counts at normal and reduced grip.
    Robustness {
        #[arg(long, num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long = "track", num_args = 1..)]
        tracks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shuffled, anonymized playback bundle plus a separate answer key.
    ExportTuring {
        #[arg(long, num_args = 1..)]
        laps: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score collected verdicts against the answer key.
    TuringScore {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// WebSocket backend for the browser front end.
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long)]
        track: PathBuf,
        /// Playback bundle directory for judging.
        #[arg(long)]
        playback: Option<PathBuf>,
        /// Where recorded laps and verdicts go.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn read_all_demos(paths: &[PathBuf]) -> promod::Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(io::read_demos(&data_path(p))?);
    }
    Ok(out)
}

/// Tracks by id: loaded files first, then any id in `ids` regenerated from
/// its seed with the configured parameters.
fn track_map(files: &[PathBuf], ids: impl IntoIterator<Item = u64>, cfg: &ExperimentConfig) -> promod::Result<BTreeMap<u64, TrackSpec>> {
    let mut map = BTreeMap::new();
    for f in files {
        let t = io::read_track(&data_path(f))?;
        map.insert(t.seed, t);
    }
    for id in ids {
        if let std::collections::btree_map::Entry::Vacant(e) = map.entry(id) {
            e.insert(generate_track(id, &cfg.track)?);
        }
    }
    Ok(map)
}

fn run(cli: Cli) -> promod::Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(&data_path(p))?,
        None => ExperimentConfig::default(),
    };
    let dt = cfg.vehicle.dt;
    match cli.cmd {
        Cmd::GenTrack { seed, out } => {
            let track = generate_track(seed, &cfg.track)?;
            io::write_track(&data_path(out), &track)?;
        }
        Cmd::Expert {
            track,
            laps,
            noise_seed,
            no_noise,
            out,
        } => {
            let track = io::read_track(&data_path(track))?;
            let mut expert = cfg.expert.clone();
            if !no_noise {
                expert.noise = Some(cfg.noise.clone());
            }
            let mut demos = Vec::with_capacity(laps);
            for lap in 0..laps {
                let seed = noise_seed.wrapping_mul(1_000_003).wrapping_add(lap as u64);
                let mut driver = PidDriver::new(expert.clone(), &cfg.vehicle, seed);
                let run = drive_lap(&track, &cfg.vehicle, &mut driver, cfg.max_lap_time);
                log::info!("lap {lap}: {:?} {:?}", run.outcome, run.lap_time);
                demos.push(run.into_demo("pid", Agent::Synthetic, track.seed, lap, dt));
            }
            io::write_demos(&data_path(out), &demos)?;
        }
        Cmd::FitPromp { demos, out } => {
            let demos = io::read_demos(&data_path(demos))?;
            let finished: Vec<&Demonstration> = demos.iter().filter(|d| d.finished()).collect();
            let p = fit_promp(&finished, &cfg.promod.promp)?;
            io::write_promp(&data_path(out), &p)?;
        }
        Cmd::Train {
            mode,
            demos,
            tracks,
            out,
        } => {
            let demos = read_all_demos(&demos)?;
            let out = data_path(out);
            match mode {
                Mode::Promod => {
                    let (model, report) = train_promod(&demos, &cfg.promod)?;
                    log::info!(
                        "trained on {} samples ({} dropped), final loss {:?}",
                        report.samples,
                        report.dropped,
                        report.loss_history.last()
                    );
                    io::write_promod_bundle(&out, &model)?;
                }
                Mode::Bc => {
                    let map = track_map(&tracks, demos.iter().map(|d| d.track_id), &cfg)?;
                    let b = &cfg.baseline;
                    let (model, _) = train_supervised(&demos, &map, b.history, b.stride, &b.train)?;
                    io::write_baseline_bundle(&out, &model, &map.keys().copied().collect::<Vec<_>>())?;
                }
                Mode::Dagger => {
                    let map = track_map(&tracks, demos.iter().map(|d| d.track_id), &cfg)?;
                    let mut dcfg = cfg.dagger.clone();
                    let finished: Vec<&Demonstration> = demos.iter().filter(|d| d.finished()).collect();
                    if !finished.is_empty() {
                        dcfg.cap = dataset_size(&finished, &cfg.promod.policy);
                    }
                    let tracks: Vec<TrackSpec> = map.values().cloned().collect();
                    let (model, report) = train_dagger(&cfg.expert, &tracks, &cfg.vehicle, &dcfg)?;
                    log::info!("dagger collected {:?}", report.collected);
                    io::write_baseline_bundle(&out, &model, &map.keys().copied().collect::<Vec<_>>())?;
                }
            }
        }
        Cmd::Rollout {
            model,
            track,
            attempts,
            grip,
            seed,
            out,
        } => {
            let model = io::read_bundle(&data_path(model))?;
            let track = io::read_track(&data_path(track))?;
            let params = cfg.vehicle.clone().with_grip(grip);
            let mut laps = Vec::with_capacity(attempts);
            for k in 0..attempts {
                let run = match &model {
                    LoadedModel::ProMoD(m) => {
                        m.rollout(&track, &params, eval::attempt_seed(seed, track.seed, k), cfg.max_lap_time)?
                            .run
                    }
                    LoadedModel::Baseline(b) => b.rollout(&track, &params, cfg.max_lap_time),
                };
                log::info!("attempt {k}: {:?} {:?}", run.outcome, run.lap_time);
                laps.push(run.into_demo(model.name(), Agent::Model, track.seed, k, dt));
            }
            io::write_demos(&data_path(out), &laps)?;
        }
        Cmd::Eval {
            demos,
            rollouts,
            tracks,
            reference,
            out,
        } => {
            let mut laps = read_all_demos(&demos)?;
            laps.extend(read_all_demos(&rollouts)?);
            let map = track_map(&tracks, laps.iter().map(|d| d.track_id), &cfg)?;
            let reference = reference
                .or_else(|| laps.first().map(|l| l.driver_id.clone()))
                .unwrap_or_default();
            eval::export_report(&data_path(out), &laps, &map, &cfg.metrics, &reference)?;
        }
        Cmd::Robustness { models, tracks, out } => {
            let loaded = models
                .iter()
                .map(|m| io::read_bundle(&data_path(m)))
                .collect::<promod::Result<Vec<_>>>()?;
            let candidates: Vec<(String, Candidate)> = loaded
                .iter()
                .zip(&models)
                .map(|(m, path)| {
                    let name = format!("{}:{}", m.name(), path.display());
                    match m {
                        LoadedModel::ProMoD(p) => (name, Candidate::ProMoD(p)),
                        LoadedModel::Baseline(b) => (name, Candidate::Baseline(b)),
                    }
                })
                .collect();
            let tracks: Vec<TrackSpec> = track_map(&tracks, [], &cfg)?.into_values().collect();
            let rcfg = RobustnessConfig {
                max_time: cfg.max_lap_time,
                ..cfg.robustness.clone()
            };
            let rows = eval::robustness_suite(&candidates, &tracks, &cfg.vehicle, &rcfg)?;
            let out = data_path(out);
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            eval::write_robustness(&out.join("robustness.csv"), &rows)?;
        }
        Cmd::ExportTuring { laps, count, seed, out } => {
            let laps = read_all_demos(&laps)?;
            let key = turing::export_turing(&laps, count, seed, &data_path(out))?;
            println!("answer key written to {}", key.display());
        }
        Cmd::TuringScore { key, verdicts, out } => {
            let key = turing::read_key(&data_path(key))?;
            let v: Verdicts = serde_json::from_str(&io::read_text(&data_path(verdicts))?)?;
            let score = turing::score(&key, &v.verdicts)?;
            let text = serde_json::to_string_pretty(&score)?;
            match out {
                Some(p) => io::write_text(&data_path(p), &text)?,
                None => println!("{text}"),
            }
        }
        Cmd::Serve {
            port,
            track,
            playback,
            data_dir,
        } => {
            let track = io::read_track(&data_path(track))?;
            let playback = load_playback(playback.map(data_path).as_deref())?;
            let dir = data_dir.unwrap_or_else(|| data_path("."));
            let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| Error::Io {
                path: PathBuf::from(format!("127.0.0.1:{port}")),
                source: e,
            })?;
            log::info!("listening on ws://127.0.0.1:{port}");
            serve(listener, Session::new(track, cfg.vehicle.clone(), dir, playback))?;
        }
    }
    Ok(())
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
