//! Scenes and measurements shared by the acceptance and regression tests.

use std::collections::BTreeSet;

use gazeteach::config::Config;
use gazeteach::geometry::{Point3, PointCloud, UnitQuaternion};
use gazeteach::pipeline::capture_scene_cloud;
use gazeteach::scene::{Primitive, Scene, Shape};
use gazeteach::segmentation::{euclidean_cluster, preprocess, remove_ground, select_nearest_cluster, select_object, SegmentationParams};

pub const DISC_ID: i32 = 0;

/// A 1 cm disc on the table. A thin post between the sensor and the disc
/// hides a band across it, so its visible points form two clusters.
pub fn flat_disc_scene() -> Scene {
    let disc = Primitive::new(
        DISC_ID,
        "coaster",
        Shape::Cylinder { radius: 0.06, height: 0.01 },
        Point3::new(0.0, 0.0, 0.005),
        UnitQuaternion::IDENTITY,
        [90, 160, 90],
    );
    let post = Primitive::new(1, "post", Shape::Box { size: [0.025, 0.025, 0.3] }, Point3::new(0.0125, -0.15, 0.15), UnitQuaternion::IDENTITY, [60, 60, 60]);
    Scene::new(vec![disc, post], 0).unwrap()
}

/// Gaze on the hidden band, slightly nearer the smaller visible part.
pub fn flat_disc_gaze() -> Point3 {
    Point3::new(0.017, 0.0, 0.01)
}

pub struct Recovery {
    pub recall: f64,
    pub contamination: f64,
    pub target_points: usize,
    pub selected: usize,
}

/// Recall and contamination of `selected` against the points of the
/// working (cropped and downsampled) cloud labeled `target`.
pub fn recovery(working: &PointCloud, selected: &PointCloud, target: i32) -> Recovery {
    let key = |p: &Point3| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
    let truth: BTreeSet<[u64; 3]> =
        working.points.iter().zip(working.object_ids.as_ref().unwrap()).filter(|(_, &id)| id == target).map(|(p, _)| key(p)).collect();
    let sel_ids = selected.object_ids.as_ref().unwrap();
    let hit = selected.points.iter().filter(|p| truth.contains(&key(p))).count();
    let wrong = sel_ids.iter().filter(|&&id| id != target).count();
    Recovery {
        recall: hit as f64 / truth.len().max(1) as f64,
        contamination: if selected.is_empty() { 0.0 } else { wrong as f64 / selected.len() as f64 },
        target_points: truth.len(),
        selected: selected.len(),
    }
}

/// (multi-cluster rule, nearest-cluster rule) recoveries on the disc.
pub fn flat_disc_recoveries(config: &Config, seed: u64) -> (Recovery, Recovery) {
    let scene = flat_disc_scene();
    let params: &SegmentationParams = &config.segmentation;
    let cloud = capture_scene_cloud(&scene, &config.sensor, seed).unwrap();
    let working = preprocess(&cloud, params).unwrap();
    let above = remove_ground(&working, params).unwrap();
    let clusters = euclidean_cluster(&above, params.cluster_tolerance, 1, params.cluster_max_size).unwrap();
    let gaze = flat_disc_gaze();
    let multi = select_object(&clusters, &above, gaze, params);
    let single = select_nearest_cluster(&clusters, &above, gaze, params);
    (recovery(&working, &multi, DISC_ID), recovery(&working, &single, DISC_ID))
}
