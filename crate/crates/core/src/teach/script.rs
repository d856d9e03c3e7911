//! Headless driver: replays a teaching script against a service.
//!
//! One action per line, `#` starts a comment:
//!
//! ```text
//! gaze_at 2 0.005     # gaze on object 2 with 5 mm jitter
//! set_gaze 0.1 0.0 0.03
//! select
//! class stapler
//! cancel_at 0.5       # cancel the next recording at 50 %
//! cancel              # cancel the running recording now
//! wait                # until the recording ends
//! wait 2.5            # at most 2.5 s
//! ```
//!
//! Consecutive gaze actions are conflated: segmentation runs once, on the
//! last of them, before the next non-gaze action.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::protocol::{ClientMessage, Envelope, ErrorCode, ServerMessage};
use super::service::{SessionSummary, TeachService};
use crate::config::Config;
use crate::dataset::{DatasetError, DatasetWriter};
use crate::geometry::Point3;
use crate::pipeline::PipelineError;
use crate::scene::{sample_gaze, Scene};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: service answered {code}: {message}", code = code.as_str())]
    Action { line: usize, code: ErrorCode, message: String },
    #[error("line {line}: {reason}")]
    Gaze { line: usize, reason: String },
    #[error("cannot read script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SetGaze(Point3),
    GazeAt { object_id: i32, jitter_m: f64 },
    Select,
    Class(String),
    Cancel,
    CancelAt(f64),
    Wait(Option<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptLine {
    pub line: usize,
    pub action: Action,
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, ScriptError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |reason: String| ScriptError::Parse { line, reason };
        let mut parts = content.split_whitespace();
        let cmd = parts.next().expect("non-empty");
        let args: Vec<&str> = parts.collect();
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("{s:?} is not a finite number")));
        let arity = |lo: usize, hi: usize| {
            if args.len() < lo || args.len() > hi {
                Err(err(format!("{cmd} takes {} argument(s), got {}", if lo == hi { lo.to_string() } else { format!("{lo}-{hi}") }, args.len())))
            } else {
                Ok(())
            }
        };
        let action = match cmd {
            "set_gaze" => {
                arity(3, 3)?;
                Action::SetGaze(Point3::new(num(args[0])?, num(args[1])?, num(args[2])?))
            }
            "gaze_at" => {
                arity(1, 2)?;
                let object_id = args[0].parse::<i32>().map_err(|_| err(format!("{:?} is not an object id", args[0])))?;
                let jitter_m = args.get(1).map(|s| num(s)).transpose()?.unwrap_or(0.0);
                if jitter_m < 0.0 {
                    return Err(err("jitter must be non-negative".into()));
                }
                Action::GazeAt { object_id, jitter_m }
            }
            "select" => {
                arity(0, 0)?;
                Action::Select
            }
            "class" => {
                if args.is_empty() {
                    return Err(err("class needs a name".into()));
                }
                Action::Class(args.join(" "))
            }
            "cancel" => {
                arity(0, 0)?;
                Action::Cancel
            }
            "cancel_at" => {
                arity(1, 1)?;
                let f = num(args[0])?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(err("cancel_at fraction must be within [0, 1]".into()));
                }
                Action::CancelAt(f)
            }
            "wait" => {
                arity(0, 1)?;
                let s = args.first().map(|s| num(s)).transpose()?;
                if s.is_some_and(|s| s < 0.0) {
                    return Err(err("wait time must be non-negative".into()));
                }
                Action::Wait(s)
            }
            other => return Err(err(format!("unknown action {other:?}"))),
        };
        out.push(ScriptLine { line, action });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ScriptReport {
    pub sessions: Vec<SessionSummary>,
    /// Every message the service sent, in order.
    pub log: Vec<Envelope<ServerMessage>>,
    pub consumed_gazes: Vec<Point3>,
}

impl ScriptReport {
    pub fn objects_taught(&self) -> usize {
        self.sessions.iter().filter(|s| !s.cancelled).count()
    }

    pub fn frames(&self) -> usize {
        self.sessions.iter().map(|s| s.frames).sum()
    }

    pub fn skipped(&self) -> usize {
        self.sessions.iter().map(|s| s.skipped).sum()
    }

    pub fn summary(&self) -> String {
        let mut s = format!("objects taught: {}\nframes: {}\nskipped viewpoints: {}\n", self.objects_taught(), self.frames(), self.skipped());
        for x in &self.sessions {
            s.push_str(&format!(
                "  {}/{:03}: {} frames, {} skipped, {:.1} s{}\n",
                x.class_name,
                x.entity_id,
                x.frames,
                x.skipped,
                x.elapsed.as_secs_f64(),
                if x.cancelled { " (cancelled)" } else { "" }
            ));
        }
        s
    }
}

struct Driver<'a> {
    service: &'a mut TeachService,
    seq: u64,
    report: ScriptReport,
}

impl Driver<'_> {
    fn absorb(&mut self, line: usize, msgs: Vec<Envelope<ServerMessage>>) -> Result<(), ScriptError> {
        let mut first_err = None;
        for m in &msgs {
            if let ServerMessage::Error { code, message } = &m.body {
                first_err.get_or_insert((*code, message.clone()));
            }
        }
        self.report.log.extend(msgs);
        match first_err {
            Some((code, message)) => Err(ScriptError::Action { line, code, message }),
            None => Ok(()),
        }
    }

    fn send(&mut self, line: usize, msg: ClientMessage) -> Result<(), ScriptError> {
        self.seq += 1;
        let out = self.service.handle(self.seq, msg);
        self.absorb(line, out)
    }

    fn tick(&mut self, line: usize) -> Result<(), ScriptError> {
        let out = self.service.tick();
        self.absorb(line, out)
    }
}

fn derive_seed(seed: u64, line: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(line as u64)
}

/// Replays `script` against `service`; the first error response aborts.
pub fn run_script(script: &[ScriptLine], service: &mut TeachService, scene: &Scene, seed: u64) -> Result<ScriptReport, ScriptError> {
    let mut d = Driver { service, seq: 0, report: ScriptReport::default() };
    let hello = d.service.connect();
    d.absorb(0, hello)?;
    let mut last_line = 0;
    for sl in script {
        last_line = sl.line;
        let line = sl.line;
        if !matches!(sl.action, Action::SetGaze(_) | Action::GazeAt { .. }) {
            d.tick(line)?;
        }
        match &sl.action {
            Action::SetGaze(p) => d.send(line, ClientMessage::GazeUpdate { x: p.x, y: p.y, z: p.z })?,
            Action::GazeAt { object_id, jitter_m } => {
                let p = sample_gaze(scene, *object_id, *jitter_m, derive_seed(seed, line)).map_err(|e| ScriptError::Gaze { line, reason: e.to_string() })?;
                d.send(line, ClientMessage::GazeUpdate { x: p.x, y: p.y, z: p.z })?;
            }
            Action::Select => d.send(line, ClientMessage::SelectObject {})?,
            Action::Class(name) => d.send(line, ClientMessage::ProvideClass { name: name.clone() })?,
            Action::Cancel => d.send(line, ClientMessage::Cancel {})?,
            Action::CancelAt(f) => d.service.set_cancel_at(Some(*f)),
            Action::Wait(s) => {
                let out = d.service.wait_recording(s.map(Duration::from_secs_f64));
                d.absorb(line, out)?;
            }
        }
    }
    let out = d.service.wait_recording(None);
    d.absorb(last_line, out)?;
    d.tick(last_line)?;
    d.report.sessions = d.service.sessions().to_vec();
    d.report.consumed_gazes = d.service.consumed_gazes().to_vec();
    Ok(d.report)
}

/// Fresh service over `scene`, dataset appended at `out_dir`.
pub fn run_scripted(script_path: &Path, scene: Arc<Scene>, config: Config, seed: u64, out_dir: &Path) -> Result<ScriptReport, ScriptError> {
    let text = std::fs::read_to_string(script_path).map_err(|source| ScriptError::Io { path: script_path.display().to_string(), source })?;
    let script = parse_script(&text)?;
    let writer = DatasetWriter::open_or_create(out_dir, config.wrist.intrinsics)?;
    let mut service = TeachService::new(scene.clone(), config, seed)?.with_dataset(writer);
    run_script(&script, &mut service, &scene, seed)
}
