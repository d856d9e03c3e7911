//! Glue between the stages: capture, segment, plan, record.

use thiserror::Error;

use crate::autolabel::{run_session, AutolabelError, CancelToken, FrameSink, RecordingOptions, RecordingSession};
use crate::config::{Config, SensorConfig};
use crate::geometry::{Aabb3, GeometryError, Point3, PointCloud};
use crate::planner::{plan_orbit, OrbitPlan, PlanError};
use crate::scene::{depth_to_cloud, render_depth, Scene};
use crate::segmentation::{segment_object, SegmentOutcome, SegmentationError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no object near the gaze point")]
    NoObject,
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Autolabel(#[from] AutolabelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// World-frame cloud seen by the fixed sensor, with ground-truth ids.
pub fn capture_scene_cloud(scene: &Scene, sensor: &SensorConfig, seed: u64) -> Result<PointCloud, GeometryError> {
    let pose = sensor.pose()?;
    let depth = render_depth(scene, &pose, &sensor.intrinsics, sensor.noise_sigma_m, seed);
    Ok(depth_to_cloud(&depth, &sensor.intrinsics, &pose))
}

pub fn segment(scene_cloud: &PointCloud, gaze: Point3, config: &Config) -> Result<(PointCloud, Aabb3), PipelineError> {
    match segment_object(scene_cloud, gaze, &config.segmentation)? {
        SegmentOutcome::Object { cloud, bbox } => Ok((cloud, bbox)),
        SegmentOutcome::NoObject => Err(PipelineError::NoObject),
    }
}

pub fn plan(bbox: &Aabb3, config: &Config) -> Result<OrbitPlan, PlanError> {
    let p = &config.planner;
    plan_orbit(bbox, p.samples, p.elevation_rad, p.safety_min_m, &p.workspace)
}

pub fn recording_options(config: &Config, seed: u64) -> RecordingOptions {
    RecordingOptions { noise_sigma: config.wrist.noise_sigma_m, seed, min_area_px: config.wrist.min_roi_area_px, gt_object_id: None }
}

/// Runs every stage without interaction; `seed` drives all sensor noise.
#[allow(clippy::too_many_arguments)]
pub fn teach_headless(
    scene: &Scene,
    gaze: Point3,
    class_name: &str,
    entity_id: u32,
    config: &Config,
    seed: u64,
    sink: &mut dyn FrameSink,
    on_progress: &mut dyn FnMut(f64),
) -> Result<RecordingSession, PipelineError> {
    let cloud = capture_scene_cloud(scene, &config.sensor, seed)?;
    let (object, bbox) = segment(&cloud, gaze, config)?;
    let plan = plan(&bbox, config)?;
    let opts = recording_options(config, seed);
    Ok(run_session(scene, &object, &plan, class_name, entity_id, &config.wrist.intrinsics, &opts, sink, &CancelToken::new(), on_progress)?)
}
