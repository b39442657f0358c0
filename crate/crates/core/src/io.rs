//! File persistence: lap logs (CSV plus a JSON sidecar), tracks, ProMPs,
//! networks and model bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, BaselineModel, BASELINE_FEATURES_TAG};
use crate::demo::{Agent, DemoRow, Demonstration, LapOutcome, DEMO_COLUMNS};
use crate::error::{Error, Result};
use crate::nn::{NetworkModel, NormStats};
use crate::policy::{ProMoDConfig, ProMoDModel};
use crate::promp::{ProMp, PROMP_SCHEMA};
use crate::track::{TrackSpec, TRACK_SCHEMA};
use crate::nn::NN_SCHEMA;

pub const DEMO_SCHEMA: &str = "demo/1";
pub const BUNDLE_SCHEMA: &str = "promod/1";
pub const STATS_SCHEMA: &str = "stats/1";
pub const DATA_DIR_ENV: &str = "PROMOD_DATA_DIR";

/// Resolves a relative path against `PROMOD_DATA_DIR` when it is set.
pub fn data_path(p: impl AsRef<Path>) -> PathBuf {
    let p = p.as_ref();
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct SchemaTag {
    schema: Option<String>,
}

/// Checks the `schema` tag of a JSON object before full parsing.
fn expect_schema(path: &Path, text: &str, expected: &str) -> Result<()> {
    let tag: SchemaTag = serde_json::from_str(text).map_err(|e| Error::Malformed {
        path: path.into(),
        reason: e.to_string(),
    })?;
    match tag.schema {
        Some(s) if s == expected => Ok(()),
        found => Err(Error::Schema {
            path: path.into(),
            expected: expected.into(),
            found: found.unwrap_or_default(),
        }),
    }
}

fn malformed(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Malformed {
        path: path.into(),
        reason: e.to_string(),
    }
}

// Lap logs ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LapMeta {
    pub driver_id: String,
    pub agent: Agent,
    pub track_id: u64,
    pub lap_index: usize,
    pub outcome: LapOutcome,
    /// Half-open row range in the CSV body.
    pub rows: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoMeta {
    pub schema: String,
    pub dt: f64,
    pub laps: Vec<LapMeta>,
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn row_fields(r: &DemoRow) -> [f64; 14] {
    [
        r.t, r.x, r.y, r.psi, r.vx, r.vy, r.psidot, r.w_fl, r.w_fr, r.w_rl, r.w_rr, r.delta, r.gas,
        r.brake,
    ]
}

/// CSV text of all laps plus the sidecar object.
pub fn demos_to_strings(laps: &[Demonstration]) -> Result<(String, String)> {
    let dt = laps.first().map_or(0.0, |l| l.dt);
    if laps.iter().any(|l| l.dt != dt) {
        return Err(Error::Invalid("laps in one file must share dt".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DEMO_COLUMNS)?;
    let mut metas = Vec::new();
    let mut row = 0;
    for lap in laps {
        for r in &lap.rows {
            w.write_record(row_fields(r).iter().map(f64::to_string))?;
        }
        metas.push(LapMeta {
            driver_id: lap.driver_id.clone(),
            agent: lap.agent,
            track_id: lap.track_id,
            lap_index: lap.lap_index,
            outcome: lap.outcome,
            rows: [row, row + lap.rows.len()],
        });
        row += lap.rows.len();
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
        .expect("csv output is utf-8");
    let meta = serde_json::to_string_pretty(&DemoMeta {
        schema: DEMO_SCHEMA.into(),
        dt,
        laps: metas,
    })?;
    Ok((body, meta))
}

pub fn write_demos(path: &Path, laps: &[Demonstration]) -> Result<()> {
    let (body, meta) = demos_to_strings(laps)?;
    write_text(path, &body)?;
    write_text(&meta_path(path), &meta)
}

pub fn demos_from_strings(path: &Path, body: &str, meta: &str) -> Result<Vec<Demonstration>> {
    let mpath = meta_path(path);
    expect_schema(&mpath, meta, DEMO_SCHEMA)?;
    let meta: DemoMeta = serde_json::from_str(meta).map_err(|e| malformed(&mpath, e))?;

    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != DEMO_COLUMNS {
        return Err(Error::Schema {
            path: path.into(),
            expected: DEMO_COLUMNS.join(","),
            found: header.join(","),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != DEMO_COLUMNS.len() {
            return Err(malformed(path, format!("row {i} has {} fields", rec.len())));
        }
        let mut v = [0.0; 14];
        for (k, field) in rec.iter().enumerate() {
            v[k] = field
                .parse()
                .map_err(|_| malformed(path, format!("row {i}, column {}: {field:?}", DEMO_COLUMNS[k])))?;
        }
        rows.push(DemoRow {
            t: v[0],
            x: v[1],
            y: v[2],
            psi: v[3],
            vx: v[4],
            vy: v[5],
            psidot: v[6],
            w_fl: v[7],
            w_fr: v[8],
            w_rl: v[9],
            w_rr: v[10],
            delta: v[11],
            gas: v[12],
            brake: v[13],
        });
    }
    let mut laps = Vec::with_capacity(meta.laps.len());
    let mut expected_start = 0;
    for m in &meta.laps {
        let [a, b] = m.rows;
        if a != expected_start || b < a || b > rows.len() {
            return Err(malformed(path, format!("lap {} row range {a}..{b} does not fit {} rows", m.lap_index, rows.len())));
        }
        expected_start = b;
        let lap_rows = rows[a..b].to_vec();
        if let Some(k) = lap_rows.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(Error::NonMonotoneTime { row: a + k + 1 });
        }
        laps.push(Demonstration {
            driver_id: m.driver_id.clone(),
            agent: m.agent,
            track_id: m.track_id,
            lap_index: m.lap_index,
            outcome: m.outcome,
            dt: meta.dt,
            rows: lap_rows,
        });
    }
    if expected_start != rows.len() {
        return Err(malformed(path, format!("{} rows not covered by any lap", rows.len() - expected_start)));
    }
    Ok(laps)
}

pub fn read_demos(path: &Path) -> Result<Vec<Demonstration>> {
    let body = read_text(path)?;
    let meta = read_text(&meta_path(path))?;
    demos_from_strings(path, &body, &meta)
}

// Single-object files ----------------------------------------------------

pub fn write_track(path: &Path, track: &TrackSpec) -> Result<()> {
    write_text(path, &track.to_json()?)
}

pub fn read_track(path: &Path) -> Result<TrackSpec> {
    let text = read_text(path)?;
    expect_schema(path, &text, TRACK_SCHEMA)?;
    TrackSpec::from_json(&text).map_err(|e| malformed(path, e))
}

pub fn write_promp(path: &Path, promp: &ProMp) -> Result<()> {
    write_text(path, &promp.to_json()?)
}

pub fn read_promp(path: &Path) -> Result<ProMp> {
    let text = read_text(path)?;
    expect_schema(path, &text, PROMP_SCHEMA)?;
    ProMp::from_json(&text).map_err(|e| malformed(path, e))
}

pub fn write_network(path: &Path, net: &NetworkModel) -> Result<()> {
    write_text(path, &net.to_json()?)
}

pub fn read_network(path: &Path) -> Result<NetworkModel> {
    let text = read_text(path)?;
    expect_schema(path, &text, NN_SCHEMA)?;
    NetworkModel::from_json(&text).map_err(|e| malformed(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    schema: String,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn write_stats(path: &Path, norm: &NormStats) -> Result<()> {
    let f = StatsFile {
        schema: STATS_SCHEMA.into(),
        mean: norm.mean.clone(),
        std: norm.std.clone(),
    };
    write_text(path, &serde_json::to_string(&f)?)
}

fn read_stats(path: &Path) -> Result<NormStats> {
    let text = read_text(path)?;
    expect_schema(path, &text, STATS_SCHEMA)?;
    let f: StatsFile = serde_json::from_str(&text).map_err(|e| malformed(path, e))?;
    if f.mean.len() != f.std.len() || f.std.iter().any(|s| !(*s > 0.0)) {
        return Err(malformed(path, "inconsistent normalization statistics"));
    }
    Ok(NormStats { mean: f.mean, std: f.std })
}

// Bundles ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleFiles {
    pub model: String,
    pub stats: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub promps: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub tracks: Vec<u64>,
    pub files: BundleFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<BaselineKind>,
    pub config: serde_json::Value,
}

const MANIFEST: &str = "manifest.json";
const NETWORK_FILE: &str = "network.json";
const STATS_FILE: &str = "stats.json";

pub fn write_promod_bundle(dir: &Path, model: &ProMoDModel) -> Result<()> {
    let mut promps = BTreeMap::new();
    for (id, p) in &model.promps {
        let name = format!("promp_{id}.json");
        write_promp(&dir.join(&name), p)?;
        promps.insert(id.to_string(), name);
    }
    write_network(&dir.join(NETWORK_FILE), &model.network)?;
    write_stats(&dir.join(STATS_FILE), &model.network.norm)?;
    let manifest = Manifest {
        schema: BUNDLE_SCHEMA.into(),
        tracks: model.promps.keys().copied().collect(),
        files: BundleFiles {
            model: NETWORK_FILE.into(),
            stats: STATS_FILE.into(),
            promps,
        },
        features: None,
        kind: None,
        config: serde_json::to_value(&model.config)?,
    };
    write_text(&dir.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineBundleConfig {
    history: usize,
}

pub fn write_baseline_bundle(dir: &Path, model: &BaselineModel, tracks: &[u64]) -> Result<()> {
    write_network(&dir.join(NETWORK_FILE), &model.network)?;
    write_stats(&dir.join(STATS_FILE), &model.network.norm)?;
    let manifest = Manifest {
        schema: BUNDLE_SCHEMA.into(),
        tracks: tracks.to_vec(),
        files: BundleFiles {
            model: NETWORK_FILE.into(),
            stats: STATS_FILE.into(),
            promps: BTreeMap::new(),
        },
        features: Some(BASELINE_FEATURES_TAG.into()),
        kind: Some(model.kind),
        config: serde_json::to_value(BaselineBundleConfig { history: model.history })?,
    };
    write_text(&dir.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    ProMoD(ProMoDModel),
    Baseline(BaselineModel),
}

impl LoadedModel {
    pub fn name(&self) -> &'static str {
        match self {
            LoadedModel::ProMoD(_) => "promod",
            LoadedModel::Baseline(b) => match b.kind {
                BaselineKind::Bc => "bc",
                BaselineKind::Dagger => "dagger",
            },
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = read_text(&path)?;
    expect_schema(&path, &text, BUNDLE_SCHEMA)?;
    serde_json::from_str(&text).map_err(|e| malformed(&path, e))
}

pub fn read_bundle(dir: &Path) -> Result<LoadedModel> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    let mut network = read_network(&dir.join(&manifest.files.model))?;
    network.norm = read_stats(&dir.join(&manifest.files.stats))?;
    match manifest.features.as_deref() {
        None => {
            let config: ProMoDConfig =
                serde_json::from_value(manifest.config).map_err(|e| malformed(&mpath, e))?;
            let mut promps = BTreeMap::new();
            for id in &manifest.tracks {
                let name = manifest
                    .files
                    .promps
                    .get(&id.to_string())
                    .ok_or_else(|| malformed(&mpath, format!("no ProMP file for track {id}")))?;
                promps.insert(*id, read_promp(&dir.join(name))?);
            }
            Ok(LoadedModel::ProMoD(ProMoDModel {
                promps,
                network,
                config,
            }))
        }
        Some(BASELINE_FEATURES_TAG) => {
            let config: BaselineBundleConfig =
                serde_json::from_value(manifest.config).map_err(|e| malformed(&mpath, e))?;
            Ok(LoadedModel::Baseline(BaselineModel {
                kind: manifest.kind.unwrap_or(BaselineKind::Bc),
                network,
                history: config.history,
            }))
        }
        Some(other) => Err(Error::Schema {
            path: mpath,
            expected: BASELINE_FEATURES_TAG.into(),
            found: other.into(),
        }),
    }
}
