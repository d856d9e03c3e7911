use std::cell::Cell;

use gazeteach::autolabel::*;
use gazeteach::config::Config;
use gazeteach::geometry::{CameraIntrinsics, Point3, UnitQuaternion};
use gazeteach::metrics::iou;
use gazeteach::pipeline::{capture_scene_cloud, plan, recording_options, segment};
use gazeteach::planner::WorkspaceModel;
use gazeteach::scene::{sample_gaze, Primitive, Scene, Shape};

fn config() -> Config {
    let mut c = Config::default();
    c.wrist.intrinsics = CameraIntrinsics::new(345.0, 345.0, 240.0, 135.0, 480, 270).unwrap();
    c.planner.samples = 60;
    c.planner.workspace = WorkspaceModel::unbounded();
    c
}

fn box_scene() -> Scene {
    let prims = vec![
        Primitive::new(0, "stapler", Shape::Box { size: [0.12, 0.05, 0.04] }, Point3::new(0.0, 0.0, 0.02), UnitQuaternion::from_rotation_z(0.4), [180, 40, 40]),
        Primitive::new(1, "cup", Shape::Cylinder { radius: 0.035, height: 0.08 }, Point3::new(0.25, 0.15, 0.04), UnitQuaternion::IDENTITY, [40, 40, 180]),
    ];
    Scene::new(prims, 0).unwrap()
}

fn segmented(scene: &Scene, id: i32, config: &Config) -> (gazeteach::geometry::PointCloud, gazeteach::planner::OrbitPlan) {
    let cloud = capture_scene_cloud(scene, &config.sensor, 3).unwrap();
    let (object, bbox) = segment(&cloud, sample_gaze(scene, id, 0.0, 1).unwrap(), config).unwrap();
    (object.clone(), plan(&bbox, config).unwrap())
}

#[test]
fn box_labels_agree_with_rendered_truth() {
    let scene = box_scene();
    let config = config();
    let (object, plan) = segmented(&scene, 0, &config);
    let opts = RecordingOptions { gt_object_id: Some(0), ..recording_options(&config, 7) };
    let s = run_session(&scene, &object, &plan, "stapler", 0, &config.wrist.intrinsics, &opts, &mut DiscardSink, &CancelToken::new(), &mut |_| {}).unwrap();
    assert_eq!(s.frames.len() + s.skipped.len(), 60);
    let ious: Vec<f64> = s.frames.iter().map(|f| iou(&f.roi, f.gt_roi.as_ref().expect("object visible"))).collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!(mean >= 0.8, "mean IoU {mean}");
    for f in &s.frames {
        assert!(f.roi.within(f.intrinsics.width, f.intrinsics.height));
        assert!((f.camera_to_object.rotation.norm() - 1.0).abs() < 1e-9);
        assert_eq!(f.camera_to_object.from_frame.as_str(), "camera");
        assert_eq!(f.camera_to_object.to_frame.as_str(), "object");
    }
    assert!(s.frames.windows(2).all(|w| w[0].index < w[1].index));
    assert_eq!(s.progress, 1.0);
    assert!(!s.cancelled);
}

#[test]
fn cancel_halfway_keeps_a_valid_prefix() {
    let scene = box_scene();
    let mut config = config();
    config.planner.samples = 300;
    let (object, plan) = segmented(&scene, 0, &config);
    let k = CameraIntrinsics::new(48.0, 48.0, 32.0, 18.0, 64, 36).unwrap();
    let cancel = CancelToken::new();
    let seen = Cell::new(Vec::new());
    let mut on_progress = |p: f64| {
        let mut v = seen.take();
        v.push(p);
        seen.set(v);
        if p >= 0.5 {
            cancel.cancel();
        }
    };
    let opts = recording_options(&config, 1);
    let full = run_session(&scene, &object, &plan, "stapler", 0, &k, &opts, &mut MemorySink, &CancelToken::new(), &mut |_| {}).unwrap();
    let part = run_session(&scene, &object, &plan, "stapler", 0, &k, &opts, &mut MemorySink, &cancel, &mut on_progress).unwrap();
    assert!(part.cancelled);
    assert!((part.progress - 0.5).abs() < 0.01, "progress {}", part.progress);
    let n = part.frames.len() + part.skipped.len();
    assert_eq!(n, 150);
    assert_eq!(&full.frames[..part.frames.len()], &part.frames[..]);
    let p = seen.take();
    assert!(p.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn stats_add_up() {
    let scene = box_scene();
    let config = config();
    let (object, plan) = segmented(&scene, 1, &config);
    let k = CameraIntrinsics::new(48.0, 48.0, 32.0, 18.0, 64, 36).unwrap();
    let opts = recording_options(&config, 1);
    let a = run_session(&scene, &object, &plan, "cup", 0, &k, &opts, &mut DiscardSink, &CancelToken::new(), &mut |_| {}).unwrap();
    let b = run_session(&scene, &object, &plan, "cup", 1, &k, &opts, &mut DiscardSink, &CancelToken::new(), &mut |_| {}).unwrap();
    let sa = session_stats(std::slice::from_ref(&a));
    let sb = session_stats(std::slice::from_ref(&b));
    let both = session_stats(&[a.clone(), b.clone()]);
    assert_eq!(sa.total(), a.frames.len());
    assert_eq!(both.total(), sa.total() + sb.total());
    let mut merged = sa.clone();
    merged.merge(&sb);
    assert_eq!(merged, both);
    assert_eq!(session_stats(&[]).total(), 0);
}
