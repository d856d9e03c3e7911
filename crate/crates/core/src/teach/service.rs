use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;

use super::protocol::{decode_client, ClientMessage, Envelope, ErrorCode, ServerMessage, Snapshot, PROTOCOL_VERSION};
use super::state::SessionState;
use crate::autolabel::{run_session, CancelToken, DiscardSink, FrameSink, RecordingSession};
use crate::config::Config;
use crate::dataset::{encode_png, validate_class_name, DatasetWriter, DepthMillimeters};
use crate::geometry::{Aabb3, Point3, PointCloud};
use crate::pipeline::{capture_scene_cloud, plan, recording_options, PipelineError};
use crate::planner::PlanError;
use crate::scene::{render, RenderOptions, Scene};
use crate::segmentation::{segment_object, SegmentOutcome, SegmentationParams};

/// Progress events are sent whenever the fraction grew by this much.
pub const PROGRESS_STEP: f64 = 0.05;

/// Source of segmentations for gaze points.
pub trait Perception: Send + Sync {
    fn segment(&self, gaze: Point3) -> Result<Option<(PointCloud, Aabb3)>, PipelineError>;
}

/// Segments a fixed, pre-captured scene cloud.
pub struct CloudPerception {
    pub cloud: PointCloud,
    pub params: SegmentationParams,
}

impl Perception for CloudPerception {
    fn segment(&self, gaze: Point3) -> Result<Option<(PointCloud, Aabb3)>, PipelineError> {
        Ok(match segment_object(&self.cloud, gaze, &self.params)? {
            SegmentOutcome::Object { cloud, bbox } => Some((cloud, bbox)),
            SegmentOutcome::NoObject => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub class_name: String,
    pub entity_id: u32,
    pub frames: usize,
    pub skipped: usize,
    pub cancelled: bool,
    /// Wall-clock time from the class name to the stored session.
    pub elapsed: Duration,
}

enum RecEvent {
    Progress(f64),
    Finished(Box<Result<RecordingSession, String>>),
}

struct RecordingTask {
    rx: Receiver<RecEvent>,
    cancel: CancelToken,
    handle: Option<JoinHandle<()>>,
    last_progress: f64,
    started: Instant,
}

#[derive(Clone)]
struct Proposal {
    cloud: PointCloud,
    bbox: Aabb3,
}

/// One teaching service: owns the session state machine, the latest gaze
/// and at most one background recording.
pub struct TeachService {
    scene: Arc<Scene>,
    config: Arc<Config>,
    seed: u64,
    perception: Arc<dyn Perception>,
    state: SessionState,
    pending_gaze: Option<Point3>,
    consumed_gazes: Vec<Point3>,
    proposal: Option<Proposal>,
    selected: Option<Proposal>,
    recording: Option<RecordingTask>,
    writer: Option<DatasetWriter>,
    entity_counters: BTreeMap<String, u32>,
    sessions: Vec<SessionSummary>,
    recordings_started: u64,
    cancel_at: Option<f64>,
    last_in_seq: Option<u64>,
    out_seq: u64,
    transitions: Vec<(SessionState, SessionState)>,
    snapshot: Option<Arc<Snapshot>>,
    outbox: Vec<Envelope<ServerMessage>>,
}

impl TeachService {
    /// Captures the scene once with the configured sensor.
    pub fn new(scene: Arc<Scene>, config: Config, seed: u64) -> Result<Self, PipelineError> {
        let cloud = capture_scene_cloud(&scene, &config.sensor, seed)?;
        let perception = Arc::new(CloudPerception { cloud, params: config.segmentation.clone() });
        Ok(Self::with_perception(scene, config, seed, perception))
    }

    pub fn with_perception(scene: Arc<Scene>, config: Config, seed: u64, perception: Arc<dyn Perception>) -> Self {
        Self {
            scene,
            config: Arc::new(config),
            seed,
            perception,
            state: SessionState::Idle,
            pending_gaze: None,
            consumed_gazes: Vec::new(),
            proposal: None,
            selected: None,
            recording: None,
            writer: None,
            entity_counters: BTreeMap::new(),
            sessions: Vec::new(),
            recordings_started: 0,
            cancel_at: None,
            last_in_seq: None,
            out_seq: 0,
            transitions: Vec::new(),
            snapshot: None,
            outbox: Vec::new(),
        }
    }

    /// Recorded sessions are appended to this dataset.
    pub fn with_dataset(mut self, writer: DatasetWriter) -> Self {
        self.writer = Some(writer);
        self
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn transitions(&self) -> &[(SessionState, SessionState)] {
        &self.transitions
    }

    /// Gaze points in the order segmentation consumed them.
    pub fn consumed_gazes(&self) -> &[Point3] {
        &self.consumed_gazes
    }

    pub fn sessions(&self) -> &[SessionSummary] {
        &self.sessions
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    pub fn into_dataset(mut self) -> Option<DatasetWriter> {
        self.join_recording();
        self.writer.take()
    }

    /// Cancels the next recording deterministically once its progress
    /// reaches `fraction`.
    pub fn set_cancel_at(&mut self, fraction: Option<f64>) {
        self.cancel_at = fraction;
    }

    /// A client attached: start tracking, or resync it with the current state.
    pub fn connect(&mut self) -> Vec<Envelope<ServerMessage>> {
        self.last_in_seq = None;
        match self.state {
            SessionState::Idle => self.set_state(SessionState::GazeTracking, None),
            SessionState::Failed if self.recording.is_none() => {
                // a failed session is finished; the new client gets a fresh one
                self.state = SessionState::Idle;
                self.proposal = None;
                self.selected = None;
                self.pending_gaze = None;
                self.set_state(SessionState::GazeTracking, None);
            }
            s => {
                self.emit(ServerMessage::StateChanged { state: s, reason: None });
                if let (SessionState::ObjectProposed, Some(p)) = (s, &self.proposal) {
                    let msg = bbox_msg(&p.bbox);
                    self.emit(msg);
                }
            }
        }
        self.drain()
    }

    pub fn handle_text(&mut self, text: &str) -> Vec<Envelope<ServerMessage>> {
        match decode_client(text) {
            Ok(env) => return self.handle(env.seq, env.body),
            Err(e) => {
                if let Some(seq) = e.seq {
                    if !self.accept_seq(seq) {
                        return self.drain();
                    }
                }
                self.error(e.code, e.message);
            }
        }
        self.drain()
    }

    pub fn handle(&mut self, seq: u64, msg: ClientMessage) -> Vec<Envelope<ServerMessage>> {
        if self.accept_seq(seq) {
            self.dispatch(msg);
        }
        self.drain()
    }

    /// Runs segmentation on the latest gaze and forwards recording events.
    pub fn tick(&mut self) -> Vec<Envelope<ServerMessage>> {
        self.process_gaze();
        self.poll_recording(None);
        self.drain()
    }

    /// Blocks until the running recording ends or `timeout` passes.
    pub fn wait_recording(&mut self, timeout: Option<Duration>) -> Vec<Envelope<ServerMessage>> {
        self.process_gaze();
        let deadline = timeout.map(|t| Instant::now() + t);
        while self.recording.is_some() {
            let left = match deadline {
                Some(d) => match d.checked_duration_since(Instant::now()) {
                    Some(l) => l,
                    None => break,
                },
                None => Duration::from_secs(3600),
            };
            self.poll_recording(Some(left));
        }
        self.drain()
    }

    fn accept_seq(&mut self, seq: u64) -> bool {
        match self.last_in_seq {
            Some(last) if seq <= last => {
                self.error(ErrorCode::BadSequence, format!("sequence number {seq} is not greater than {last}"));
                false
            }
            _ if seq == 0 => {
                self.error(ErrorCode::BadSequence, "sequence numbers start at 1".into());
                false
            }
            _ => {
                self.last_in_seq = Some(seq);
                true
            }
        }
    }

    fn dispatch(&mut self, msg: ClientMessage) {
        match msg {
            ClientMessage::GazeUpdate { x, y, z } => self.on_gaze(Point3::new(x, y, z)),
            ClientMessage::SelectObject {} => self.on_select(),
            ClientMessage::ProvideClass { name } => self.on_class(&name),
            ClientMessage::Cancel {} => self.on_cancel(),
            ClientMessage::RequestSnapshot {} => self.on_snapshot(),
        }
    }

    fn on_gaze(&mut self, gaze: Point3) {
        if !self.state.accepts_gaze() {
            self.error(ErrorCode::InvalidState, format!("gaze updates are ignored in state {}", self.state));
            return;
        }
        if self.state == SessionState::Done {
            self.proposal = None;
            self.selected = None;
            self.set_state(SessionState::GazeTracking, None);
        }
        // latest wins: an unprocessed earlier gaze is dropped
        self.pending_gaze = Some(gaze);
    }

    fn process_gaze(&mut self) {
        if !matches!(self.state, SessionState::GazeTracking | SessionState::ObjectProposed) {
            self.pending_gaze = None;
            return;
        }
        let Some(gaze) = self.pending_gaze.take() else { return };
        self.consumed_gazes.push(gaze);
        match self.perception.segment(gaze) {
            Ok(Some((cloud, bbox))) => {
                self.emit(bbox_msg(&bbox));
                self.proposal = Some(Proposal { cloud, bbox });
                if self.state == SessionState::GazeTracking {
                    self.set_state(SessionState::ObjectProposed, None);
                }
            }
            Ok(None) => {
                self.proposal = None;
                self.emit(ServerMessage::NoObject {});
                if self.state == SessionState::ObjectProposed {
                    self.set_state(SessionState::GazeTracking, None);
                }
            }
            Err(e) => {
                self.proposal = None;
                self.error(ErrorCode::Internal, format!("segmentation failed: {e}"));
                self.emit(ServerMessage::NoObject {});
                if self.state == SessionState::ObjectProposed {
                    self.set_state(SessionState::GazeTracking, None);
                }
            }
        }
    }

    fn on_select(&mut self) {
        if self.state != SessionState::ObjectProposed {
            self.error(ErrorCode::InvalidState, format!("no proposed object to select in state {}", self.state));
            return;
        }
        let Some(p) = self.proposal.clone() else {
            self.error(ErrorCode::InvalidState, "no proposed object".into());
            return;
        };
        self.pending_gaze = None;
        self.selected = Some(p);
        self.set_state(SessionState::Naming, None);
    }

    fn on_class(&mut self, name: &str) {
        if self.state != SessionState::Naming {
            self.error(ErrorCode::InvalidState, format!("class names are only accepted while naming, not in state {}", self.state));
            return;
        }
        let name = name.trim();
        if name.is_empty() {
            self.error(ErrorCode::EmptyName, "class name is empty".into());
            return;
        }
        if let Err(e) = validate_class_name(name) {
            self.error(ErrorCode::InvalidName, e.to_string());
            return;
        }
        let object = self.selected.clone().expect("Naming implies a selection");
        let plan = match plan(&object.bbox, &self.config) {
            Ok(p) => p,
            Err(e @ PlanError::OutOfReach(_)) => {
                self.error(ErrorCode::OutOfReach, e.to_string());
                self.set_state(SessionState::Failed, Some("object out of reach".into()));
                return;
            }
            Err(e) => {
                self.error(ErrorCode::Internal, e.to_string());
                self.set_state(SessionState::Failed, Some(e.to_string()));
                return;
            }
        };
        let entity = self.next_entity(name);
        let sink: Result<Box<dyn FrameSink + Send>, _> = match &self.writer {
            Some(w) => w.frame_sink(name, entity).map(|s| Box::new(s) as Box<dyn FrameSink + Send>),
            None => Ok(Box::new(DiscardSink)),
        };
        let sink = match sink {
            Ok(s) => s,
            Err(e) => {
                self.error(ErrorCode::Internal, e.to_string());
                self.set_state(SessionState::Failed, Some(e.to_string()));
                return;
            }
        };
        self.entity_counters.insert(name.to_string(), entity + 1);
        let opts = recording_options(&self.config, derive_seed(self.seed, self.recordings_started));
        self.recordings_started += 1;
        let (tx, rx) = mpsc::channel();
        let cancel = CancelToken::new();
        let (scene, config, class) = (self.scene.clone(), self.config.clone(), name.to_string());
        let (token, cancel_at) = (cancel.clone(), self.cancel_at.take());
        let handle = std::thread::spawn(move || {
            let mut sink = sink;
            let mut last = 0.0;
            let step = 1.0 / plan.retained.len() as f64;
            let mut on_progress = |f: f64| {
                // report before the gap to the last report could exceed the step
                if f - last >= PROGRESS_STEP - step - 1e-12 || f >= 1.0 {
                    last = f;
                    let _ = tx.send(RecEvent::Progress(f));
                }
                if cancel_at.is_some_and(|c| f >= c) {
                    token.cancel();
                }
            };
            let res = run_session(&scene, &object.cloud, &plan, &class, entity, &config.wrist.intrinsics, &opts, sink.as_mut(), &token, &mut on_progress)
                .map_err(|e| e.to_string());
            let _ = tx.send(RecEvent::Finished(Box::new(res)));
        });
        self.recording = Some(RecordingTask { rx, cancel, handle: Some(handle), last_progress: 0.0, started: Instant::now() });
        self.set_state(SessionState::Recording, None);
    }

    fn next_entity(&self, class: &str) -> u32 {
        let from_writer = self.writer.as_ref().map_or(0, |w| w.next_entity_id(class));
        from_writer.max(self.entity_counters.get(class).copied().unwrap_or(0))
    }

    fn on_cancel(&mut self) {
        match &self.recording {
            Some(task) if self.state == SessionState::Recording => task.cancel.cancel(),
            _ => self.error(ErrorCode::InvalidState, format!("nothing to cancel in state {}", self.state)),
        }
    }

    fn on_snapshot(&mut self) {
        match self.snapshot() {
            Ok(s) => self.emit(ServerMessage::Snapshot(Box::new((*s).clone()))),
            Err(e) => self.error(ErrorCode::Internal, e),
        }
    }

    /// Spectator view, rendered once.
    pub fn snapshot(&mut self) -> Result<Arc<Snapshot>, String> {
        if let Some(s) = &self.snapshot {
            return Ok(s.clone());
        }
        let sp = &self.config.spectator;
        let pose = sp.pose().map_err(|e| e.to_string())?;
        let out = render(&self.scene, &pose, &sp.intrinsics, RenderOptions::default());
        let png = encode_png(&out.rgb).map_err(|e| e.to_string())?;
        let depth = DepthMillimeters::from_depth(&out.depth);
        let raw: Vec<u8> = depth.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let b64 = base64::engine::general_purpose::STANDARD;
        let k = sp.intrinsics;
        let snap = Arc::new(Snapshot {
            width: k.width,
            height: k.height,
            fx_px: k.fx,
            fy_px: k.fy,
            cx_px: k.cx,
            cy_px: k.cy,
            translation_m: pose.translation.to_array(),
            rotation_wxyz: pose.rotation.to_array(),
            rgb_png_base64: b64.encode(png),
            depth_mm_base64: b64.encode(raw),
        });
        self.snapshot = Some(snap.clone());
        Ok(snap)
    }

    fn poll_recording(&mut self, block: Option<Duration>) {
        let mut first = true;
        loop {
            let Some(task) = &mut self.recording else { return };
            let ev = match (first, block) {
                (true, Some(t)) => match task.rx.recv_timeout(t) {
                    Ok(ev) => ev,
                    Err(RecvTimeoutError::Timeout) => return,
                    Err(RecvTimeoutError::Disconnected) => RecEvent::Finished(Box::new(Err("recording thread stopped".into()))),
                },
                _ => match task.rx.try_recv() {
                    Ok(ev) => ev,
                    Err(TryRecvError::Empty) => return,
                    Err(TryRecvError::Disconnected) => RecEvent::Finished(Box::new(Err("recording thread stopped".into()))),
                },
            };
            first = false;
            match ev {
                RecEvent::Progress(f) => {
                    task.last_progress = f;
                    self.emit(ServerMessage::RecordProgress { fraction: f });
                }
                RecEvent::Finished(res) => {
                    self.finish_recording(*res);
                    return;
                }
            }
        }
    }

    fn finish_recording(&mut self, res: Result<RecordingSession, String>) {
        let mut task = self.recording.take().expect("recording running");
        if let Some(h) = task.handle.take() {
            let _ = h.join();
        }
        let session = match res {
            Ok(s) => s,
            Err(e) => {
                self.error(ErrorCode::Internal, e.clone());
                self.set_state(SessionState::Failed, Some(e));
                return;
            }
        };
        if let Some(w) = &mut self.writer {
            if let Err(e) = w.add_session(&session) {
                self.error(ErrorCode::Internal, e.to_string());
                self.set_state(SessionState::Failed, Some(e.to_string()));
                return;
            }
        }
        self.sessions.push(SessionSummary {
            class_name: session.class_name.clone(),
            entity_id: session.entity_id,
            frames: session.frames.len(),
            skipped: session.skipped.len(),
            cancelled: session.cancelled,
            elapsed: task.started.elapsed(),
        });
        self.selected = None;
        self.proposal = None;
        if session.cancelled {
            self.set_state(SessionState::Failed, Some("cancelled".into()));
            return;
        }
        if task.last_progress < 1.0 {
            self.emit(ServerMessage::RecordProgress { fraction: 1.0 });
        }
        self.emit(ServerMessage::RecordDone {
            frame_count: session.frames.len(),
            skipped: session.skipped.len(),
            class: session.class_name,
            entity: session.entity_id,
        });
        self.set_state(SessionState::Done, None);
    }

    fn join_recording(&mut self) {
        if let Some(task) = &self.recording {
            task.cancel.cancel();
        }
        while self.recording.is_some() {
            self.poll_recording(Some(Duration::from_secs(3600)));
        }
    }

    fn set_state(&mut self, to: SessionState, reason: Option<String>) {
        let from = self.state;
        debug_assert!(from.can_transition_to(to), "undeclared transition {from} -> {to}");
        self.transitions.push((from, to));
        self.state = to;
        self.emit(ServerMessage::StateChanged { state: to, reason });
    }

    fn error(&mut self, code: ErrorCode, message: String) {
        self.emit(ServerMessage::Error { code, message });
    }

    fn emit(&mut self, body: ServerMessage) {
        self.out_seq += 1;
        self.outbox.push(Envelope { v: PROTOCOL_VERSION, seq: self.out_seq, body });
    }

    fn drain(&mut self) -> Vec<Envelope<ServerMessage>> {
        std::mem::take(&mut self.outbox)
    }
}

impl Drop for TeachService {
    fn drop(&mut self) {
        if let Some(task) = &mut self.recording {
            task.cancel.cancel();
            if let Some(h) = task.handle.take() {
                let _ = h.join();
            }
        }
    }
}

fn bbox_msg(b: &Aabb3) -> ServerMessage {
    ServerMessage::Bbox3d { min: b.min.to_array(), max: b.max.to_array() }
}

fn derive_seed(seed: u64, n: u64) -> u64 {
    seed ^ n.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}
