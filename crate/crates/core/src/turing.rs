//! Blind judging protocol: an anonymized, shuffled playback bundle with a
//! separate answer key, and scoring of the collected verdicts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{Agent, Demonstration};
use crate::error::{Error, Result};
use crate::io::{read_text, write_text};

pub const PLAYBACK_SCHEMA: &str = "turing/1";
pub const KEY_SCHEMA: &str = "turing-key/1";
pub const VERDICTS_SCHEMA: &str = "verdicts/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clip {
    pub id: usize,
    pub track_id: u64,
    pub dt: f64,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybackBundle {
    pub schema: String,
    pub clips: Vec<Clip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyEntry {
    pub id: usize,
    pub driver_id: String,
    pub agent: Agent,
    pub lap_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerKey {
    pub schema: String,
    pub seed: u64,
    pub entries: Vec<KeyEntry>,
}

/// Picks `count` finished laps in a seeded random order and strips all
/// identifying metadata.
pub fn make_bundle(laps: &[Demonstration], count: usize, seed: u64) -> Result<(PlaybackBundle, AnswerKey)> {
    let mut pool: Vec<&Demonstration> = laps.iter().filter(|l| l.finished()).collect();
    if pool.len() < count {
        return Err(Error::Invalid(format!(
            "{count} clips requested but only {} finished laps available",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(count);
    let clips = pool
        .iter()
        .enumerate()
        .map(|(id, l)| Clip {
            id,
            track_id: l.track_id,
            dt: l.dt,
            frames: l
                .rows
                .iter()
                .map(|r| Frame {
                    t: r.t,
                    x: r.x,
                    y: r.y,
                    psi: r.psi,
                    delta: r.delta,
                })
                .collect(),
        })
        .collect();
    let entries = pool
        .iter()
        .enumerate()
        .map(|(id, l)| KeyEntry {
            id,
            driver_id: l.driver_id.clone(),
            agent: l.agent,
            lap_index: l.lap_index,
        })
        .collect();
    Ok((
        PlaybackBundle {
            schema: PLAYBACK_SCHEMA.into(),
            clips,
        },
        AnswerKey {
            schema: KEY_SCHEMA.into(),
            seed,
            entries,
        },
    ))
}

/// The key lives next to the bundle directory, not inside it, so serving the
/// bundle never exposes it.
pub fn key_path(bundle_dir: &Path) -> PathBuf {
    let mut s = bundle_dir.as_os_str().to_owned();
    s.push(".key.json");
    PathBuf::from(s)
}

pub fn export_turing(laps: &[Demonstration], count: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    let (bundle, key) = make_bundle(laps, count, seed)?;
    write_text(&out.join("playback.json"), &serde_json::to_string(&bundle)?)?;
    let kp = key_path(out);
    write_text(&kp, &serde_json::to_string_pretty(&key)?)?;
    Ok(kp)
}

pub fn read_playback(dir: &Path) -> Result<PlaybackBundle> {
    let path = dir.join("playback.json");
    let b: PlaybackBundle = serde_json::from_str(&read_text(&path)?)?;
    if b.schema != PLAYBACK_SCHEMA {
        return Err(Error::Schema {
            path,
            expected: PLAYBACK_SCHEMA.into(),
            found: b.schema,
        });
    }
    Ok(b)
}

pub fn read_key(path: &Path) -> Result<AnswerKey> {
    let k: AnswerKey = serde_json::from_str(&read_text(path)?)?;
    if k.schema != KEY_SCHEMA {
        return Err(Error::Schema {
            path: path.into(),
            expected: KEY_SCHEMA.into(),
            found: k.schema,
        });
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgement {
    Human,
    Robot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub clip: usize,
    pub judge: String,
    pub verdict: Judgement,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdicts {
    pub schema: String,
    pub verdicts: Vec<Verdict>,
}

impl Verdicts {
    pub fn new() -> Self {
        Self {
            schema: VERDICTS_SCHEMA.into(),
            verdicts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub agent: Agent,
    pub judged_human: usize,
    pub judged_robot: usize,
    /// Share of verdicts that called this agent human.
    pub human_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuringScore {
    pub rows: Vec<ScoreRow>,
    /// Verdicts that matched the truth (human vs. not human).
    pub accuracy: f64,
    pub total: usize,
}

/// Contingency table of true agent against verdict.
pub fn score(key: &AnswerKey, verdicts: &[Verdict]) -> Result<TuringScore> {
    let truth: BTreeMap<usize, Agent> = key.entries.iter().map(|e| (e.id, e.agent)).collect();
    let mut table: BTreeMap<Agent, [usize; 2]> = BTreeMap::new();
    let mut correct = 0;
    for v in verdicts {
        let agent = *truth
            .get(&v.clip)
            .ok_or_else(|| Error::Invalid(format!("verdict for unknown clip {}", v.clip)))?;
        let cell = table.entry(agent).or_default();
        match v.verdict {
            Judgement::Human => cell[0] += 1,
            Judgement::Robot => cell[1] += 1,
        }
        if (agent == Agent::Human) == (v.verdict == Judgement::Human) {
            correct += 1;
        }
    }
    if verdicts.is_empty() {
        return Err(Error::Undefined("no verdicts"));
    }
    let rows = table
        .into_iter()
        .map(|(agent, [h, r])| ScoreRow {
            agent,
            judged_human: h,
            judged_robot: r,
            human_rate: h as f64 / (h + r) as f64,
        })
        .collect();
    Ok(TuringScore {
        rows,
        accuracy: correct as f64 / verdicts.len() as f64,
        total: verdicts.len(),
    })
}
