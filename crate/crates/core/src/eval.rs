//! Driving-style metrics, the two-group Kruskal–Wallis test, the reduced-grip
//! robustness harness and report export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::statistics::{Data, Max, Min, OrderStatistics};

use crate::baselines::BaselineModel;
use crate::demo::{Demonstration, LapOutcome};
use crate::error::{Error, Result};
use crate::policy::ProMoDModel;
use crate::sim::LapRun;
use crate::track::TrackSpec;
use crate::vehicle::VehicleParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Steering band in steering-wheel degrees.
    pub delta_min: f64,
    pub delta_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            delta_min: 5.0,
            delta_max: 216.0,
            b_min: 0.05,
            b_max: 0.95,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.delta_min
            && self.delta_min < self.delta_max
            && 0.0 <= self.b_min
            && self.b_min < self.b_max
            && self.b_max <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad metric bands: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Steer,
    Brake,
}

pub fn laptime(lap: &Demonstration) -> Result<f64> {
    lap.lap_time().ok_or(Error::Unfinished)
}

/// Mean of `|ẋ|` over the steps whose `|x|` lies strictly inside
/// `(lo, hi)`. The derivative uses central differences, one-sided at the
/// ends.
pub fn band_aggressiveness(x: &[f64], dt: f64, lo: f64, hi: f64) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DemoTooShort { len: n, min: 2 });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..n {
        let m = x[k].abs();
        if !(lo < m && m < hi) {
            continue;
        }
        let d = if k == 0 {
            (x[1] - x[0]) / dt
        } else if k == n - 1 {
            (x[n - 1] - x[n - 2]) / dt
        } else {
            (x[k + 1] - x[k - 1]) / (2.0 * dt)
        };
        sum += d.abs();
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoQualifyingInterval);
    }
    Ok(sum / count as f64)
}

pub fn aggressiveness(lap: &Demonstration, signal: Signal, cfg: &MetricConfig) -> Result<f64> {
    let (values, lo, hi): (Vec<f64>, _, _) = match signal {
        Signal::Steer => (lap.rows.iter().map(|r| r.delta).collect(), cfg.delta_min, cfg.delta_max),
        Signal::Brake => (lap.rows.iter().map(|r| r.brake).collect(), cfg.b_min, cfg.b_max),
    };
    band_aggressiveness(&values, lap.dt, lo, hi)
}

/// Two-group Kruskal–Wallis test with average ranks and tie correction.
/// Returns `(H, p)` with `p` from the chi-square(1) upper tail.
pub fn kruskal_wallis(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Undefined("each group needs at least two values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "sample" });
    }
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    let n = all.len() as f64;
    // Average rank of each distinct value, plus the tie term Σ(t³ - t).
    let mut ranks: Vec<(f64, f64)> = Vec::new();
    let mut ties = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1] == all[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ranks.push((all[i], (i + j) as f64 / 2.0 + 1.0));
        ties += t * t * t - t;
        i = j + 1;
    }
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Err(Error::Undefined("all values are identical"));
    }
    let rank_of = |v: f64| {
        let k = ranks.partition_point(|(x, _)| x.total_cmp(&v).is_lt());
        ranks[k].1
    };
    let term = |g: &[f64]| {
        let r: f64 = g.iter().map(|&v| rank_of(v)).sum();
        r * r / g.len() as f64
    };
    let raw = 12.0 / (n * (n + 1.0)) * (term(a) + term(b)) - 3.0 * (n + 1.0);
    let h = (raw / correction).max(0.0);
    let chi2 = ChiSquared::new(1.0).expect("one degree of freedom");
    Ok((h, chi2.sf(h).clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut d = Data::new(values.to_vec());
    Some(Summary {
        n: values.len(),
        min: d.min(),
        q1: d.lower_quartile(),
        median: d.median(),
        q3: d.upper_quartile(),
        max: d.max(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LapMetrics {
    pub driver: String,
    pub track: u64,
    pub lap: usize,
    pub t_end: Option<f64>,
    pub m_steer: Option<f64>,
    pub m_brake: Option<f64>,
    pub finished: bool,
}

pub fn lap_metrics(lap: &Demonstration, cfg: &MetricConfig) -> LapMetrics {
    LapMetrics {
        driver: lap.driver_id.clone(),
        track: lap.track_id,
        lap: lap.lap_index,
        t_end: laptime(lap).ok(),
        m_steer: aggressiveness(lap, Signal::Steer, cfg).ok(),
        m_brake: aggressiveness(lap, Signal::Brake, cfg).ok(),
        finished: lap.finished(),
    }
}

// Robustness -------------------------------------------------------------

pub enum Candidate<'a> {
    ProMoD(&'a ProMoDModel),
    Baseline(&'a BaselineModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub model: String,
    pub track: u64,
    pub grip: f64,
    /// Effective attempts; deterministic policies collapse to one.
    pub attempts: usize,
    pub finished: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub grips: Vec<f64>,
    pub attempts: usize,
    pub seed: u64,
    pub max_time: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            grips: vec![1.0, 0.9],
            attempts: 10,
            seed: 0,
            max_time: 120.0,
        }
    }
}

/// Seed of ProMoD attempt `k` for a track.
pub fn attempt_seed(base: u64, track: u64, k: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(track.wrapping_mul(1000))
        .wrapping_add(k as u64)
}

/// Finish counts per model, track and grip level.
pub fn robustness_suite(
    models: &[(String, Candidate<'_>)],
    tracks: &[TrackSpec],
    base: &VehicleParams,
    cfg: &RobustnessConfig,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();
    for (name, model) in models {
        for track in tracks {
            for &grip in &cfg.grips {
                let params = base.clone().with_grip(grip);
                let (attempts, finished) = match model {
                    Candidate::ProMoD(m) => {
                        let mut finished = 0;
                        for k in 0..cfg.attempts {
                            let seed = attempt_seed(cfg.seed, track.seed, k);
                            let r = m.rollout(track, &params, seed, cfg.max_time)?;
                            finished += r.run.lap_time.is_some() as usize;
                        }
                        (cfg.attempts, finished)
                    }
                    Candidate::Baseline(m) => {
                        let first: LapRun = m.rollout(track, &params, cfg.max_time);
                        for _ in 1..cfg.attempts {
                            if m.rollout(track, &params, cfg.max_time) != first {
                                return Err(Error::Invalid(format!(
                                    "baseline {name} is not deterministic on track {}",
                                    track.seed
                                )));
                            }
                        }
                        (1, first.lap_time.is_some() as usize)
                    }
                };
                rows.push(RobustnessRow {
                    model: name.clone(),
                    track: track.seed,
                    grip,
                    attempts,
                    finished,
                });
            }
        }
    }
    Ok(rows)
}

/// Tracks with at least one finished attempt, per model, at one grip level.
pub fn finished_tracks(rows: &[RobustnessRow], grip: f64) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in rows {
        let e = out.entry(r.model.clone()).or_insert(0);
        if r.grip == grip && r.finished > 0 {
            *e += 1;
        }
    }
    out
}

// Report export ----------------------------------------------------------

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub driver: String,
    pub metric: &'static str,
    pub h: Option<f64>,
    pub p: Option<f64>,
}

/// Compares every driver against `reference` on each metric.
pub fn compare_drivers(metrics: &[LapMetrics], reference: &str) -> Vec<StatRow> {
    let mut by_driver: BTreeMap<&str, Vec<&LapMetrics>> = BTreeMap::new();
    for m in metrics {
        by_driver.entry(&m.driver).or_default().push(m);
    }
    let pick = |ms: &[&LapMetrics], f: fn(&LapMetrics) -> Option<f64>| -> Vec<f64> {
        ms.iter().filter_map(|m| f(m)).collect()
    };
    let fields: [(&'static str, fn(&LapMetrics) -> Option<f64>); 3] = [
        ("t_end", |m| m.t_end),
        ("m_steer", |m| m.m_steer),
        ("m_brake", |m| m.m_brake),
    ];
    let Some(reference_laps) = by_driver.get(reference) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (driver, laps) in &by_driver {
        if *driver == reference {
            continue;
        }
        for (name, f) in fields {
            let res = kruskal_wallis(&pick(reference_laps, f), &pick(laps, f)).ok();
            out.push(StatRow {
                driver: driver.to_string(),
                metric: name,
                h: res.map(|r| r.0),
                p: res.map(|r| r.1),
            });
        }
    }
    out
}

/// Distance-indexed steering trace: unwrapped arc length along the track,
/// kept strictly increasing.
pub fn steering_overlay(lap: &Demonstration, track: &TrackSpec) -> Vec<(f64, f64)> {
    let total = track.total_length();
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut prev_raw: Option<f64> = None;
    let mut unwrapped = 0.0;
    for r in &lap.rows {
        let s = track.localize([r.x, r.y]).s;
        if let Some(p) = prev_raw {
            let mut ds = s - p;
            if ds < -0.5 * total {
                ds += total;
            } else if ds > 0.5 * total {
                ds -= total;
            }
            unwrapped += ds;
        }
        prev_raw = Some(s);
        if out.last().is_none_or(|&(last, _)| unwrapped > last) {
            out.push((unwrapped, r.delta));
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn polyline(points: impl Iterator<Item = (f64, f64)>, color: &str, width: f64) -> String {
    let mut s = String::from("<polyline fill=\"none\" points=\"");
    for (x, y) in points {
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    let _ = writeln!(s, "\" stroke=\"{color}\" stroke-width=\"{width}\"/>");
    s
}

/// Plan view of a track's boundaries with the driven lines on top.
pub fn trajectory_svg(track: &TrackSpec, laps: &[&Demonstration]) -> String {
    let half = track.width / 2.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &track.centerline {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k] - track.width);
            hi[k] = hi[k].max(p[k] + track.width);
        }
    }
    let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
    // Flip y so the plot matches the usual map orientation.
    let tf = |x: f64, y: f64| (x - lo[0], hi[1] - y);
    let border = |side: f64| {
        polyline(
            track.arc_length.iter().map(|&s| {
                let (x, y, th) = track.pose_at(s);
                tf(x - side * half * th.sin(), y + side * half * th.cos())
            }),
            "#555",
            0.4,
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.2} {h:.2}\" width=\"{:.0}\" height=\"{:.0}\">\n",
        w * 4.0,
        h * 4.0
    );
    svg.push_str(&border(1.0));
    svg.push_str(&border(-1.0));
    for (i, lap) in laps.iter().enumerate() {
        svg.push_str(&polyline(lap.rows.iter().map(|r| tf(r.x, r.y)), PALETTE[i % PALETTE.len()], 0.25));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Steering angle over distance for several laps.
pub fn overlay_svg(traces: &[(String, Vec<(f64, f64)>)]) -> String {
    let smax = traces
        .iter()
        .flat_map(|(_, t)| t.last().map(|p| p.0))
        .fold(1.0, f64::max);
    let dmax = traces
        .iter()
        .flat_map(|(_, t)| t.iter().map(|p| p.1.abs()))
        .fold(10.0, f64::max);
    let (w, h) = (1000.0, 400.0);
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(svg, "<line x1=\"0\" y1=\"{}\" x2=\"{w}\" y2=\"{}\" stroke=\"#aaa\"/>", h / 2.0, h / 2.0);
    for (i, (name, t)) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, "<text x=\"5\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>", 15 + 15 * i);
        svg.push_str(&polyline(
            t.iter().map(|&(s, d)| (s / smax * w, h / 2.0 - d / dmax * (h / 2.0 - 5.0))),
            color,
            1.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes metrics.csv, summary.csv, stats.csv, overlay.csv and the plots.
/// `reference` names the driver all others are tested against.
pub fn export_report(
    dir: &Path,
    laps: &[Demonstration],
    tracks: &BTreeMap<u64, TrackSpec>,
    cfg: &MetricConfig,
    reference: &str,
) -> Result<Vec<LapMetrics>> {
    if laps.is_empty() {
        return Err(Error::Invalid("no laps to report".into()));
    }
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;

    let metrics: Vec<LapMetrics> = laps.iter().map(|l| lap_metrics(l, cfg)).collect();
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["driver", "track", "lap", "t_end", "m_steer", "m_brake", "finished"])?;
    for m in &metrics {
        w.write_record([
            m.driver.clone(),
            m.track.to_string(),
            m.lap.to_string(),
            opt(m.t_end),
            opt(m.m_steer),
            opt(m.m_brake),
            m.finished.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("metrics.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["driver", "metric", "n", "min", "q1", "median", "q3", "max"])?;
    let mut by_driver: BTreeMap<&str, Vec<&LapMetrics>> = BTreeMap::new();
    for m in &metrics {
        by_driver.entry(&m.driver).or_default().push(m);
    }
    for (driver, ms) in &by_driver {
        let cols: [(&str, Vec<f64>); 3] = [
            ("t_end", ms.iter().filter_map(|m| m.t_end).collect()),
            ("m_steer", ms.iter().filter_map(|m| m.m_steer).collect()),
            ("m_brake", ms.iter().filter_map(|m| m.m_brake).collect()),
        ];
        for (name, values) in cols {
            if let Some(s) = summarize(&values) {
                w.write_record([
                    driver.to_string(),
                    name.to_string(),
                    s.n.to_string(),
                    s.min.to_string(),
                    s.q1.to_string(),
                    s.median.to_string(),
                    s.q3.to_string(),
                    s.max.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("summary.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("stats.csv"))?;
    w.write_record(["driver", "metric", "H", "p"])?;
    for s in compare_drivers(&metrics, reference) {
        w.write_record([s.driver, s.metric.to_string(), opt(s.h), opt(s.p)])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("stats.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("overlay.csv"))?;
    w.write_record(["driver", "track", "lap", "s", "delta"])?;
    let mut per_track: BTreeMap<u64, Vec<(String, Vec<(f64, f64)>)>> = BTreeMap::new();
    for lap in laps.iter().filter(|l| l.outcome == LapOutcome::Finished) {
        let Some(track) = tracks.get(&lap.track_id) else {
            continue;
        };
        let trace = steering_overlay(lap, track);
        for &(s, d) in &trace {
            w.write_record([
                lap.driver_id.clone(),
                lap.track_id.to_string(),
                lap.lap_index.to_string(),
                s.to_string(),
                d.to_string(),
            ])?;
        }
        per_track
            .entry(lap.track_id)
            .or_default()
            .push((format!("{} lap {}", lap.driver_id, lap.lap_index), trace));
    }
    w.flush().map_err(|e| Error::io(dir.join("overlay.csv"), e))?;

    for (id, track) in tracks {
        let on_track: Vec<&Demonstration> = laps.iter().filter(|l| l.track_id == *id).collect();
        if on_track.is_empty() {
            continue;
        }
        write(&plots.join(format!("trajectories_{id}.svg")), &trajectory_svg(track, &on_track))?;
        if let Some(traces) = per_track.get(id) {
            write(&plots.join(format!("steering_{id}.svg")), &overlay_svg(traces))?;
        }
    }
    Ok(metrics)
}

pub fn write_robustness(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "track", "grip", "attempts", "finished"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.track.to_string(),
            r.grip.to_string(),
            r.attempts.to_string(),
            r.finished.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
