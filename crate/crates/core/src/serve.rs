//! WebSocket backend for the browser front end: live driving with lap
//! recording, and blind playback with verdict collection.
//!
//! The simulation runs on one thread at the vehicle rate. Connection threads
//! only forward parsed messages into a queue and drain their own outgoing
//! queue, so the session state is never shared.

use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::demo::{Agent, DemoRow, Demonstration, LapOutcome};
use crate::error::{Error, Result};
use crate::io::{read_text, write_demos, write_text};
use crate::sim::start_state;
use crate::track::TrackSpec;
use crate::turing::{Judgement, PlaybackBundle, Verdict, Verdicts};
use crate::vehicle::{self, Action, LapProgress, LapStatus, VehicleParams, VehicleState};

/// Simulation steps between two state messages (150 Hz / 5 = 30 Hz).
pub const STATE_EVERY: u64 = 5;
/// Inputs older than this many steps start to decay towards neutral.
pub const STALE_STEPS: u64 = 30;
/// Per-step decay factor applied to a stale input.
pub const STALE_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Hello { driver_id: String },
    Input { delta: f64, gas: f64, brake: f64 },
    Restart,
    Save,
    Play { clip: usize },
    Judge { clip: usize, judge: String, verdict: Judgement },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Welcome {
        track_id: u64,
        width: f64,
        x: Vec<f64>,
        y: Vec<f64>,
        dt: f64,
        clips: usize,
    },
    State {
        t: f64,
        x: f64,
        y: f64,
        psi: f64,
        speed: f64,
        delta: f64,
        gas: f64,
        brake: f64,
        playback: bool,
    },
    Lap {
        index: usize,
        outcome: LapOutcome,
        lap_time: Option<f64>,
    },
    Saved { path: String, laps: usize },
    PlaybackDone { clip: usize },
    Judged { clip: usize },
    Error { message: String },
}

enum Mode {
    Drive,
    Playback { clip: usize, frame: usize },
}

/// All server-side state of one driving/judging session.
pub struct Session {
    track: TrackSpec,
    params: VehicleParams,
    data_dir: PathBuf,
    playback: Option<PlaybackBundle>,
    driver_id: String,
    state: VehicleState,
    progress: LapProgress,
    input: Action,
    input_age: u64,
    rows: Vec<DemoRow>,
    laps: Vec<Demonstration>,
    verdicts: Verdicts,
    mode: Mode,
    step: u64,
    connected: bool,
}

impl Session {
    pub fn new(track: TrackSpec, params: VehicleParams, data_dir: PathBuf, playback: Option<PlaybackBundle>) -> Self {
        let state = start_state(&track);
        Self {
            track,
            params,
            data_dir,
            playback,
            driver_id: "anonymous".into(),
            state,
            progress: LapProgress::new(),
            input: Action::new(0.0, 0.0, 0.0),
            input_age: 0,
            rows: Vec::new(),
            laps: Vec::new(),
            verdicts: Verdicts::new(),
            mode: Mode::Drive,
            step: 0,
            connected: false,
        }
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn laps(&self) -> &[Demonstration] {
        &self.laps
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts.verdicts
    }

    pub fn is_paused(&self) -> bool {
        !self.connected
    }

    /// Pauses the simulation while no client is attached.
    pub fn set_connected(&mut self, connected: bool) {
        self.connected = connected;
    }

    fn reset_lap(&mut self) {
        self.state = start_state(&self.track);
        self.progress = LapProgress::new();
        self.rows.clear();
        self.input = Action::new(0.0, 0.0, 0.0);
        self.input_age = 0;
    }

    fn welcome(&self) -> ServerMsg {
        ServerMsg::Welcome {
            track_id: self.track.seed,
            width: self.track.width,
            x: self.track.centerline.iter().map(|p| p[0]).collect(),
            y: self.track.centerline.iter().map(|p| p[1]).collect(),
            dt: self.params.dt,
            clips: self.playback.as_ref().map_or(0, |b| b.clips.len()),
        }
    }

    pub fn handle(&mut self, msg: ClientMsg) -> Vec<ServerMsg> {
        match msg {
            ClientMsg::Hello { driver_id } => {
                self.driver_id = driver_id;
                vec![self.welcome()]
            }
            ClientMsg::Input { delta, gas, brake } => {
                let a = Action::new(delta, gas, brake);
                if !a.is_finite() {
                    return vec![error("non-finite input")];
                }
                self.input = a.clamped(self.params.delta_hw_max);
                self.input_age = 0;
                Vec::new()
            }
            ClientMsg::Restart => {
                self.mode = Mode::Drive;
                self.reset_lap();
                Vec::new()
            }
            ClientMsg::Save => match self.save() {
                Ok(msg) => vec![msg],
                Err(e) => vec![error(&e.to_string())],
            },
            ClientMsg::Play { clip } => match &self.playback {
                Some(b) if clip < b.clips.len() => {
                    self.mode = Mode::Playback { clip, frame: 0 };
                    Vec::new()
                }
                _ => vec![error(&format!("no clip {clip}"))],
            },
            ClientMsg::Judge { clip, judge, verdict } => {
                if self.playback.as_ref().is_none_or(|b| clip >= b.clips.len()) {
                    return vec![error(&format!("no clip {clip}"))];
                }
                self.verdicts.verdicts.push(Verdict { clip, judge, verdict });
                let path = self.data_dir.join("verdicts.json");
                match serde_json::to_string_pretty(&self.verdicts)
                    .map_err(Error::from)
                    .and_then(|t| write_text(&path, &t))
                {
                    Ok(()) => vec![ServerMsg::Judged { clip }],
                    Err(e) => vec![error(&e.to_string())],
                }
            }
        }
    }

    fn save(&self) -> Result<ServerMsg> {
        if self.laps.is_empty() {
            return Err(Error::Invalid("no completed laps to save".into()));
        }
        let safe: String = self
            .driver_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        let path = self.data_dir.join(format!("human_{safe}_track{}.csv", self.track.seed));
        write_demos(&path, &self.laps)?;
        Ok(ServerMsg::Saved {
            path: path.display().to_string(),
            laps: self.laps.len(),
        })
    }

    /// The action actually applied this step; stale inputs fade out.
    fn applied_action(&mut self) -> Action {
        self.input_age += 1;
        if self.input_age > STALE_STEPS {
            self.input = Action::new(
                self.input.delta * STALE_DECAY,
                self.input.gas * STALE_DECAY,
                self.input.brake * STALE_DECAY,
            );
        }
        self.input
    }

    /// Advances one simulation step; returns messages due this step.
    pub fn tick(&mut self) -> Vec<ServerMsg> {
        if !self.connected {
            return Vec::new();
        }
        self.step += 1;
        let emit = self.step.is_multiple_of(STATE_EVERY);
        if let Mode::Playback { clip, frame } = self.mode {
            let clip_data = &self.playback.as_ref().expect("playback mode needs a bundle").clips[clip];
            if frame >= clip_data.frames.len() {
                self.mode = Mode::Drive;
                self.reset_lap();
                return vec![ServerMsg::PlaybackDone { clip }];
            }
            let f = clip_data.frames[frame];
            self.mode = Mode::Playback { clip, frame: frame + 1 };
            return if emit {
                vec![ServerMsg::State {
                    t: f.t,
                    x: f.x,
                    y: f.y,
                    psi: f.psi,
                    speed: 0.0,
                    delta: f.delta,
                    gas: 0.0,
                    brake: 0.0,
                    playback: true,
                }]
            } else {
                Vec::new()
            };
        }

        let action = self.applied_action();
        let t = self.rows.len() as f64 * self.params.dt;
        self.rows.push(DemoRow::new(t, &self.state, &action));
        let mut out = Vec::new();
        let next = match vehicle::step(&self.state, &action, &self.params) {
            Ok(s) => s,
            Err(e) => {
                self.reset_lap();
                return vec![error(&e.to_string())];
            }
        };
        let status = vehicle::lap_status(&self.track, &self.state, &next, &mut self.progress, self.params.dt);
        self.state = next;
        let ended = match status {
            LapStatus::Running => None,
            LapStatus::Finished { lap_time } => Some((LapOutcome::Finished, Some(lap_time))),
            LapStatus::OffTrack => Some((LapOutcome::OffTrack, None)),
        };
        if emit || ended.is_some() {
            out.push(ServerMsg::State {
                t: t + self.params.dt,
                x: self.state.x,
                y: self.state.y,
                psi: self.state.psi,
                speed: self.state.speed(),
                delta: action.delta,
                gas: action.gas,
                brake: action.brake,
                playback: false,
            });
        }
        if let Some((outcome, lap_time)) = ended {
            let index = self.laps.len();
            self.laps.push(Demonstration {
                driver_id: self.driver_id.clone(),
                agent: Agent::Human,
                track_id: self.track.seed,
                lap_index: index,
                outcome,
                dt: self.params.dt,
                rows: std::mem::take(&mut self.rows),
            });
            out.push(ServerMsg::Lap {
                index,
                outcome,
                lap_time,
            });
            self.reset_lap();
        }
        out
    }
}

fn error(message: &str) -> ServerMsg {
    ServerMsg::Error {
        message: message.into(),
    }
}

pub fn load_playback(dir: Option<&std::path::Path>) -> Result<Option<PlaybackBundle>> {
    match dir {
        None => Ok(None),
        Some(d) => {
            let text = read_text(&d.join("playback.json"))?;
            Ok(Some(serde_json::from_str(&text)?))
        }
    }
}

enum Event {
    Connected(usize, Sender<String>),
    Message(usize, ClientMsg),
    Malformed(String),
    Disconnected(usize),
}

fn connection(id: usize, stream: TcpStream, events: Sender<Event>) {
    let _ = stream.set_nodelay(true);
    let mut ws: WebSocket<TcpStream> = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("handshake failed: {e}");
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)));
    let (tx, rx): (Sender<String>, Receiver<String>) = mpsc::channel();
    if events.send(Event::Connected(id, tx)).is_err() {
        return;
    }
    loop {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let ev = match serde_json::from_str::<ClientMsg>(&text) {
                    Ok(m) => Event::Message(id, m),
                    Err(e) => Event::Malformed(e.to_string()),
                };
                if events.send(ev).is_err() {
                    break;
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        loop {
            match rx.try_recv() {
                Ok(text) => {
                    if ws.send(Message::Text(text)).is_err() {
                        let _ = events.send(Event::Disconnected(id));
                        return;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    return;
                }
            }
        }
    }
    let _ = events.send(Event::Disconnected(id));
}

/// Runs the backend until the process is stopped. Only the most recent
/// client drives; the simulation pauses while no client is connected.
pub fn serve(listener: TcpListener, mut session: Session) -> Result<()> {
    let (ev_tx, ev_rx) = mpsc::channel::<Event>();
    thread::spawn(move || {
        for (id, stream) in listener.incoming().enumerate() {
            match stream {
                Ok(s) => {
                    let tx = ev_tx.clone();
                    thread::spawn(move || connection(id, s, tx));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    let period = Duration::from_secs_f64(session.params.dt);
    let mut active: Option<(usize, Sender<String>)> = None;
    let mut next = Instant::now();
    loop {
        let mut replies = Vec::new();
        loop {
            match ev_rx.try_recv() {
                Ok(Event::Connected(id, tx)) => {
                    active = Some((id, tx));
                    session.set_connected(true);
                }
                Ok(Event::Disconnected(id)) => {
                    if active.as_ref().is_some_and(|(a, _)| *a == id) {
                        active = None;
                        session.set_connected(false);
                    }
                }
                Ok(Event::Message(id, m)) => {
                    if active.as_ref().is_some_and(|(a, _)| *a == id) {
                        replies.extend(session.handle(m));
                    }
                }
                Ok(Event::Malformed(reason)) => replies.push(error(&format!("bad message: {reason}"))),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
        replies.extend(session.tick());
        if let Some((_, tx)) = &active {
            for r in replies {
                let _ = tx.send(serde_json::to_string(&r)?);
            }
        }
        next += period;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{generate_track, TrackParams};
    use crate::turing::{Clip, Frame, PLAYBACK_SCHEMA};

    fn session(dir: &std::path::Path) -> Session {
        let track = generate_track(1, &TrackParams::default()).unwrap();
        let clip = Clip {
            id: 0,
            track_id: 1,
            dt: 1.0 / 150.0,
            frames: (0..12)
                .map(|k| Frame { t: k as f64, x: 0.0, y: 0.0, psi: 0.0, delta: 0.0 })
                .collect(),
        };
        let bundle = PlaybackBundle {
            schema: PLAYBACK_SCHEMA.into(),
            clips: vec![clip],
        };
        Session::new(track, VehicleParams::default(), dir.to_path_buf(), Some(bundle))
    }

    #[test]
    fn messages_parse() {
        let m: ClientMsg = serde_json::from_str(r#"{"type":"input","delta":10,"gas":0.5,"brake":0}"#).unwrap();
        assert_eq!(m, ClientMsg::Input { delta: 10.0, gas: 0.5, brake: 0.0 });
        let m: ClientMsg = serde_json::from_str(r#"{"type":"judge","clip":0,"judge":"a","verdict":"robot"}"#).unwrap();
        assert!(matches!(m, ClientMsg::Judge { verdict: Judgement::Robot, .. }));
    }

    #[test]
    fn paused_until_connected_and_state_at_30hz() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = session(dir.path());
        assert!(s.tick().is_empty());
        assert!(s.is_paused());
        s.set_connected(true);
        assert!(matches!(s.handle(ClientMsg::Hello { driver_id: "ann".into() })[0], ServerMsg::Welcome { .. }));
        let msgs: usize = (0..150)
            .map(|_| {
                s.handle(ClientMsg::Input { delta: 0.0, gas: 1.0, brake: 0.0 });
                s.tick().len()
            })
            .sum();
        assert_eq!(msgs, 30);
        assert!(s.state().vx > 1.0);
    }

    #[test]
    fn stale_input_decays() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = session(dir.path());
        s.set_connected(true);
        s.handle(ClientMsg::Input { delta: 0.0, gas: 1.0, brake: 0.0 });
        for _ in 0..STALE_STEPS + 200 {
            s.tick();
        }
        assert!(s.input.gas < 1e-6);
    }

    #[test]
    fn off_track_lap_is_recorded_and_saved() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = session(dir.path());
        s.set_connected(true);
        let mut lap_msgs = Vec::new();
        for _ in 0..3000 {
            s.handle(ClientMsg::Input { delta: 240.0, gas: 1.0, brake: 0.0 });
            lap_msgs.extend(s.tick().into_iter().filter(|m| matches!(m, ServerMsg::Lap { .. })));
            if !lap_msgs.is_empty() {
                break;
            }
        }
        assert!(matches!(lap_msgs[0], ServerMsg::Lap { outcome: LapOutcome::OffTrack, .. }));
        assert_eq!(s.laps().len(), 1);
        let ServerMsg::Saved { path, laps } = &s.handle(ClientMsg::Save)[0] else {
            panic!("save failed")
        };
        assert_eq!(*laps, 1);
        let back = crate::io::read_demos(std::path::Path::new(path)).unwrap();
        back[0].verify_replay(&VehicleParams::default()).unwrap();
    }

    #[test]
    fn playback_and_judging() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = session(dir.path());
        s.set_connected(true);
        s.handle(ClientMsg::Play { clip: 0 });
        let out: Vec<ServerMsg> = (0..13).flat_map(|_| s.tick()).collect();
        assert!(out.iter().any(|m| matches!(m, ServerMsg::State { playback: true, .. })));
        assert!(matches!(out.last(), Some(ServerMsg::PlaybackDone { clip: 0 })));
        assert!(matches!(s.handle(ClientMsg::Play { clip: 3 })[0], ServerMsg::Error { .. }));
        let r = s.handle(ClientMsg::Judge { clip: 0, judge: "j".into(), verdict: Judgement::Human });
        assert_eq!(r, vec![ServerMsg::Judged { clip: 0 }]);
        let saved: Verdicts = serde_json::from_str(&read_text(&dir.path().join("verdicts.json")).unwrap()).unwrap();
        assert_eq!(saved.verdicts.len(), 1);
    }
}
