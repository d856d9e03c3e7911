//! Recording sessions: render each planned viewpoint, project the segmented
//! object cloud into it and store the resulting 2D box with the frame.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DepthMillimeters;
use crate::geometry::{aabb_of, project_cloud_roi, transform_cloud, CameraIntrinsics, GeometryError, Point3, PointCloud, Pose, Roi2D, UnitQuaternion};
use crate::planner::OrbitPlan;
use crate::scene::{render, DepthImage, RenderOptions, Scene, BACKGROUND_ID};

pub const DEFAULT_MIN_AREA_PX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum AutolabelError {
    #[error("plan has no retained viewpoints")]
    EmptyPlan,
    #[error("object cloud is empty")]
    EmptyObject,
    #[error("frame sink failed: {0}")]
    Sink(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Why a viewpoint produced no frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SkipReason {
    NotInView,
    TooSmall { area_px: f64 },
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::NotInView => f.write_str("object not in view"),
            SkipReason::TooSmall { area_px } => write!(f, "ROI too small ({area_px:.1} px²)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelOutcome {
    Roi(Roi2D),
    Skipped(SkipReason),
}

/// Where the images of a frame live.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameImages {
    Memory { rgb: Arc<RgbImage>, depth: Arc<DepthMillimeters> },
    Files { rgb: PathBuf, depth: PathBuf },
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub images: FrameImages,
    pub roi: Roi2D,
    /// Tight box of the object's rendered pixels, when known.
    pub gt_roi: Option<Roi2D>,
    pub camera_to_object: Pose,
    pub intrinsics: CameraIntrinsics,
    pub class_name: String,
    pub entity_id: u32,
}

/// Receives every labeled frame with its rendered images.
pub trait FrameSink {
    fn store(&mut self, record: &FrameRecord, rgb: &RgbImage, depth: &DepthImage) -> Result<FrameImages, AutolabelError>;
}

/// Keeps the images in memory.
#[derive(Debug, Default)]
pub struct MemorySink;

impl FrameSink for MemorySink {
    fn store(&mut self, _: &FrameRecord, rgb: &RgbImage, depth: &DepthImage) -> Result<FrameImages, AutolabelError> {
        Ok(FrameImages::Memory { rgb: Arc::new(rgb.clone()), depth: Arc::new(DepthMillimeters::from_depth(depth)) })
    }
}

/// Drops the images, keeping only labels and poses.
#[derive(Debug, Default)]
pub struct DiscardSink;

impl FrameSink for DiscardSink {
    fn store(&mut self, _: &FrameRecord, _: &RgbImage, _: &DepthImage) -> Result<FrameImages, AutolabelError> {
        Ok(FrameImages::Discarded)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordingOptions {
    /// Depth noise of the wrist camera, meters.
    pub noise_sigma: f64,
    pub seed: u64,
    pub min_area_px: f64,
    /// Scene object whose rendered pixels give `gt_roi`; derived from the
    /// majority ground-truth id of the object cloud when unset.
    pub gt_object_id: Option<i32>,
}

impl Default for RecordingOptions {
    fn default() -> Self {
        Self { noise_sigma: 0.002, seed: 0, min_area_px: DEFAULT_MIN_AREA_PX, gt_object_id: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingSession {
    pub class_name: String,
    pub entity_id: u32,
    /// Segmented cloud in the object frame.
    pub object_cloud: PointCloud,
    /// Object frame to world: axis-aligned, at the bounding-box center.
    pub object_frame: Pose,
    pub plan: OrbitPlan,
    pub frames: Vec<FrameRecord>,
    pub skipped: Vec<(usize, SkipReason)>,
    /// Processed viewpoints over retained viewpoints.
    pub progress: f64,
    pub cancelled: bool,
}

/// Label in the camera given by `camera` (camera → world) for an object
/// cloud expressed in world coordinates.
pub fn label_frame(object_cloud: &PointCloud, camera: &Pose, k: &CameraIntrinsics, min_area_px: f64) -> Result<LabelOutcome, GeometryError> {
    label_in_camera(object_cloud, &camera.inverse(), k, min_area_px)
}

/// Label for a cloud given the transform from its frame into the camera.
pub fn label_in_camera(cloud: &PointCloud, cloud_to_camera: &Pose, k: &CameraIntrinsics, min_area_px: f64) -> Result<LabelOutcome, GeometryError> {
    let in_cam = transform_cloud(cloud, cloud_to_camera)?;
    Ok(match project_cloud_roi(&in_cam, k, true) {
        None => LabelOutcome::Skipped(SkipReason::NotInView),
        Some(roi) if roi.area() < min_area_px => LabelOutcome::Skipped(SkipReason::TooSmall { area_px: roi.area() }),
        Some(roi) => LabelOutcome::Roi(roi),
    })
}

/// Object frame for a segmented world-frame cloud.
pub fn object_frame_for(cloud: &PointCloud) -> Result<Pose, GeometryError> {
    let center = aabb_of(cloud)?.center();
    Ok(Pose::new(center, UnitQuaternion::IDENTITY, "object", cloud.frame.as_str()))
}

/// Majority non-background ground-truth id of a cloud.
pub fn majority_object_id(cloud: &PointCloud) -> Option<i32> {
    let ids = cloud.object_ids.as_ref()?;
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &id in ids.iter().filter(|&&i| i != BACKGROUND_ID) {
        *counts.entry(id).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(id, _)| id)
}

fn frame_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Records one frame per retained viewpoint of `plan`. Cancellation is
/// checked between frames and yields a valid partial session.
#[allow(clippy::too_many_arguments)]
pub fn run_session(
    scene: &Scene,
    object_cloud: &PointCloud,
    plan: &OrbitPlan,
    class_name: &str,
    entity_id: u32,
    k: &CameraIntrinsics,
    opts: &RecordingOptions,
    sink: &mut dyn FrameSink,
    cancel: &CancelToken,
    on_progress: &mut dyn FnMut(f64),
) -> Result<RecordingSession, AutolabelError> {
    if plan.retained.is_empty() {
        return Err(AutolabelError::EmptyPlan);
    }
    if object_cloud.is_empty() {
        return Err(AutolabelError::EmptyObject);
    }
    let object_frame = object_frame_for(object_cloud)?;
    let world_to_object = object_frame.inverse();
    let cloud_obj = transform_cloud(object_cloud, &world_to_object)?;
    let gt_id = opts.gt_object_id.or_else(|| majority_object_id(object_cloud));
    let total = plan.retained.len();
    let mut session = RecordingSession {
        class_name: class_name.to_string(),
        entity_id,
        object_cloud: cloud_obj,
        object_frame,
        plan: plan.clone(),
        frames: Vec::with_capacity(total),
        skipped: Vec::new(),
        progress: 0.0,
        cancelled: false,
    };
    for (index, camera) in plan.retained_poses().enumerate() {
        if cancel.is_cancelled() {
            session.cancelled = true;
            break;
        }
        let camera_to_object = Pose::compose(&world_to_object, camera)?;
        let outcome = label_in_camera(&session.object_cloud, &camera_to_object.inverse(), k, opts.min_area_px)?;
        match outcome {
            LabelOutcome::Skipped(reason) => {
                log::debug!("frame {index} skipped: {reason}");
                session.skipped.push((index, reason));
            }
            LabelOutcome::Roi(roi) => {
                let out = render(scene, camera, k, RenderOptions { noise_sigma: opts.noise_sigma, seed: frame_seed(opts.seed, index) });
                let mut record = FrameRecord {
                    index,
                    images: FrameImages::Discarded,
                    roi,
                    gt_roi: gt_id.and_then(|id| out.depth.id_bbox(id)),
                    camera_to_object,
                    intrinsics: *k,
                    class_name: class_name.to_string(),
                    entity_id,
                };
                record.images = sink.store(&record, &out.rgb, &out.depth)?;
                session.frames.push(record);
            }
        }
        session.progress = (index + 1) as f64 / total as f64;
        on_progress(session.progress);
    }
    Ok(session)
}

/// Viewpoint counts per class and entity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewpointStats {
    pub counts: BTreeMap<String, BTreeMap<u32, usize>>,
}

impl ViewpointStats {
    pub fn add(&mut self, class: &str, entity: u32, n: usize) {
        *self.counts.entry(class.to_string()).or_default().entry(entity).or_default() += n;
    }

    pub fn merge(&mut self, other: &ViewpointStats) {
        for (class, ents) in &other.counts {
            for (&e, &n) in ents {
                self.add(class, e, n);
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|m| m.values()).sum()
    }

    pub fn class_total(&self, class: &str) -> usize {
        self.counts.get(class).map_or(0, |m| m.values().sum())
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// One bar per class, split into one segment per entity.
    pub fn histogram(&self, width: usize) -> String {
        let max = self.counts.keys().map(|c| self.class_total(c)).max().unwrap_or(0);
        let name_w = self.counts.keys().map(|c| c.len()).max().unwrap_or(0);
        let glyphs = ['#', '=', '+', '*', '%'];
        let mut out = String::new();
        for (class, ents) in &self.counts {
            let mut bar = String::new();
            for (i, (_, &n)) in ents.iter().enumerate() {
                let len = (n * width + max / 2).checked_div(max).unwrap_or(0);
                bar.extend(std::iter::repeat_n(glyphs[i % glyphs.len()], len));
            }
            let parts: Vec<String> = ents.iter().map(|(e, n)| format!("{e}:{n}")).collect();
            out.push_str(&format!("{class:<name_w$} |{bar} {} ({})\n", self.class_total(class), parts.join(" ")));
        }
        out
    }

    /// `class,entity,frames` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,entity,frames\n");
        for (class, ents) in &self.counts {
            for (e, n) in ents {
                out.push_str(&format!("{class},{e},{n}\n"));
            }
        }
        out
    }
}

pub fn session_stats(sessions: &[RecordingSession]) -> ViewpointStats {
    let mut s = ViewpointStats::default();
    for sess in sessions {
        s.add(&sess.class_name, sess.entity_id, sess.frames.len());
    }
    s
}

/// Position of the camera in the object frame for a stored frame.
pub fn camera_position_in_object(frame: &FrameRecord) -> Point3 {
    frame.camera_to_object.translation
}
