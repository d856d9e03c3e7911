//! Gaze-conditioned object segmentation of a scene point cloud.
//!
//! The pipeline crops the cloud to a working volume, downsamples it on a
//! voxel grid, removes the dominant (ground) plane found by RANSAC, splits
//! the remainder into Euclidean clusters and finally keeps every cluster
//! that is close enough to the gaze point and large enough. Cluster-to-gaze
//! distance is the minimum over the cluster's points.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{aabb_of, Aabb3, GeometryError, Point3, PointCloud};
use crate::spatial::RadiusGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("voxel leaf size must be positive, got {0}")]
    InvalidLeaf(f64),
    #[error("cluster tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("RANSAC needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("RANSAC found no non-degenerate 3-point sample in {0} iterations")]
    NoValidSample(usize),
    #[error("invalid segmentation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Closed interval on one axis. Infinite bounds are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBounds {
    pub min: f64,
    pub max: f64,
}

impl AxisBounds {
    pub const UNBOUNDED: AxisBounds = AxisBounds { min: f64::NEG_INFINITY, max: f64::INFINITY };

    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassthroughBounds {
    pub x: AxisBounds,
    pub y: AxisBounds,
    pub z: AxisBounds,
}

impl PassthroughBounds {
    pub const UNBOUNDED: PassthroughBounds = PassthroughBounds { x: AxisBounds::UNBOUNDED, y: AxisBounds::UNBOUNDED, z: AxisBounds::UNBOUNDED };

    #[inline]
    pub fn contains(&self, p: Point3) -> bool {
        self.x.contains(p.x) && self.y.contains(p.y) && self.z.contains(p.z)
    }
}

impl Default for PassthroughBounds {
    /// A 2 m x 2 m x 1.5 m working volume around the table origin.
    fn default() -> Self {
        Self { x: AxisBounds::new(-1.0, 1.0), y: AxisBounds::new(-1.0, 1.0), z: AxisBounds::new(-0.25, 1.25) }
    }
}

/// Tunables of the segmentation pipeline. Distances in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationParams {
    pub passthrough: PassthroughBounds,
    pub voxel_leaf: f64,
    pub ransac_inlier_threshold: f64,
    pub ransac_max_iterations: usize,
    pub ransac_seed: u64,
    pub cluster_tolerance: f64,
    pub cluster_max_size: Option<usize>,
    pub gaze_max_distance: f64,
    pub gaze_min_cluster_size: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            passthrough: PassthroughBounds::default(),
            voxel_leaf: 0.005,
            ransac_inlier_threshold: 0.005,
            ransac_max_iterations: 500,
            ransac_seed: 0,
            cluster_tolerance: 0.02,
            cluster_max_size: None,
            gaze_max_distance: 0.02,
            gaze_min_cluster_size: 5,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let positive = [
            ("voxel_leaf", self.voxel_leaf),
            ("ransac_inlier_threshold", self.ransac_inlier_threshold),
            ("cluster_tolerance", self.cluster_tolerance),
            ("gaze_max_distance", self.gaze_max_distance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SegmentationError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.gaze_min_cluster_size < 1 {
            return Err(SegmentationError::InvalidParams("gaze_min_cluster_size must be at least 1".into()));
        }
        if self.ransac_max_iterations < 1 {
            return Err(SegmentationError::InvalidParams("ransac_max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Plane `normal · p + d = 0` with the indices of its inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    pub normal: Point3,
    pub d: f64,
    pub inlier_indices: Vec<usize>,
}

impl PlaneModel {
    #[inline]
    pub fn distance(&self, p: Point3) -> f64 {
        (self.normal.dot(p) + self.d).abs()
    }
}

/// Indices (ascending) into the cloud the clustering ran on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub indices: Vec<usize>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

pub fn passthrough_filter(cloud: &PointCloud, bounds: &PassthroughBounds) -> PointCloud {
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| bounds.contains(cloud.points[i])).collect();
    cloud.select(&keep)
}

/// Replaces the points of every occupied voxel by their centroid. Output is
/// ordered by first occurrence of each voxel; an output id is the majority
/// id of the voxel, ties going to the smallest id.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud, SegmentationError> {
    if !(leaf > 0.0 && leaf.is_finite()) {
        return Err(SegmentationError::InvalidLeaf(leaf));
    }
    struct Acc {
        sum: Point3,
        n: usize,
        ids: Vec<(i32, u32)>,
    }
    let inv = 1.0 / leaf;
    let mut slot: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(cloud.len() / 4 + 1);
    let mut accs: Vec<Acc> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = ((p.x * inv).floor() as i64, (p.y * inv).floor() as i64, (p.z * inv).floor() as i64);
        let s = *slot.entry(key).or_insert_with(|| {
            accs.push(Acc { sum: Point3::ZERO, n: 0, ids: Vec::new() });
            accs.len() - 1
        });
        let a = &mut accs[s];
        a.sum += *p;
        a.n += 1;
        if let Some(id) = cloud.id(i) {
            match a.ids.iter_mut().find(|(k, _)| *k == id) {
                Some((_, c)) => *c += 1,
                None => a.ids.push((id, 1)),
            }
        }
    }
    let points = accs.iter().map(|a| a.sum / a.n as f64).collect();
    let object_ids = cloud
        .object_ids
        .as_ref()
        .map(|_| accs.iter().map(|a| a.ids.iter().copied().max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia))).map(|(id, _)| id).unwrap_or(-1)).collect());
    Ok(PointCloud { points, object_ids, frame: cloud.frame.clone() })
}

/// Seeded, fixed-iteration RANSAC plane fit. The normal is oriented so its
/// first non-zero component among `(z, y, x)` is positive.
pub fn ransac_plane(cloud: &PointCloud, params: &SegmentationParams) -> Result<PlaneModel, SegmentationError> {
    let n = cloud.len();
    if n < 3 {
        return Err(SegmentationError::TooFewPoints(n));
    }
    let pts = &cloud.points;
    let thr = params.ransac_inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(params.ransac_seed);
    let mut best: Option<(Point3, f64, usize)> = None;
    for _ in 0..params.ransac_max_iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let Some(normal) = (pts[j] - pts[i]).cross(pts[k] - pts[i]).normalized() else {
            continue;
        };
        let normal = orient(normal);
        let d = -normal.dot(pts[i]);
        let count = pts.iter().filter(|p| (normal.dot(**p) + d).abs() <= thr).count();
        if best.is_none_or(|(_, _, c)| count > c) {
            best = Some((normal, d, count));
        }
    }
    let (normal, d, _) = best.ok_or(SegmentationError::NoValidSample(params.ransac_max_iterations))?;
    let inlier_indices = (0..n).filter(|&i| (normal.dot(pts[i]) + d).abs() <= thr).collect();
    Ok(PlaneModel { normal, d, inlier_indices })
}

fn orient(n: Point3) -> Point3 {
    let flip = if n.z != 0.0 {
        n.z < 0.0
    } else if n.y != 0.0 {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        -n
    } else {
        n
    }
}

/// Connected components of the `tolerance`-neighborhood graph, restricted
/// to sizes in `[min_size, max_size]`, largest first (ties: lowest index).
pub fn euclidean_cluster(cloud: &PointCloud, tolerance: f64, min_size: usize, max_size: Option<usize>) -> Result<Vec<Cluster>, SegmentationError> {
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(SegmentationError::InvalidTolerance(tolerance));
    }
    let grid = RadiusGrid::new(&cloud.points, tolerance);
    let mut visited = vec![false; cloud.len()];
    let mut clusters = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..cloud.len() {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        stack.push(seed);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            grid.for_each_within(cloud.points[i], |j| {
                if !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            });
        }
        let size = members.len();
        if size >= min_size && max_size.is_none_or(|m| size <= m) {
            members.sort_unstable();
            clusters.push(Cluster { indices: members });
        }
    }
    clusters.sort_by(|a, b| b.size().cmp(&a.size()).then(a.indices[0].cmp(&b.indices[0])));
    Ok(clusters)
}

/// Smallest distance from `gaze` to any point of `cluster`.
pub fn cluster_gaze_distance(cluster: &Cluster, cloud: &PointCloud, gaze: Point3) -> f64 {
    cluster.indices.iter().map(|&i| cloud.points[i].distance(gaze)).fold(f64::INFINITY, f64::min)
}

/// Ascending indices of the union of all clusters within
/// `gaze_max_distance` of the gaze and with at least
/// `gaze_min_cluster_size` points.
pub fn select_object_indices(clusters: &[Cluster], cloud: &PointCloud, gaze: Point3, params: &SegmentationParams) -> Vec<usize> {
    let mut out: Vec<usize> = clusters
        .iter()
        .filter(|c| c.size() >= params.gaze_min_cluster_size)
        .filter(|c| cluster_gaze_distance(c, cloud, gaze) <= params.gaze_max_distance)
        .flat_map(|c| c.indices.iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub fn select_object(clusters: &[Cluster], cloud: &PointCloud, gaze: Point3, params: &SegmentationParams) -> PointCloud {
    cloud.select(&select_object_indices(clusters, cloud, gaze, params))
}

/// The baseline rule that keeps only the cluster nearest to the gaze.
pub fn select_nearest_cluster(clusters: &[Cluster], cloud: &PointCloud, gaze: Point3, params: &SegmentationParams) -> PointCloud {
    let nearest = clusters
        .iter()
        .filter(|c| c.size() >= params.gaze_min_cluster_size)
        .map(|c| (cluster_gaze_distance(c, cloud, gaze), c))
        .filter(|(d, _)| *d <= params.gaze_max_distance)
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match nearest {
        Some((_, c)) => cloud.select(&c.indices),
        None => PointCloud::empty(cloud.frame.clone()),
    }
}

/// Passthrough crop followed by voxel downsampling.
pub fn preprocess(cloud: &PointCloud, params: &SegmentationParams) -> Result<PointCloud, SegmentationError> {
    voxel_downsample(&passthrough_filter(cloud, &params.passthrough), params.voxel_leaf)
}

/// Everything above the ground: the preprocessed cloud with the RANSAC
/// plane inliers removed.
pub fn remove_ground(cloud: &PointCloud, params: &SegmentationParams) -> Result<PointCloud, SegmentationError> {
    let plane = ransac_plane(cloud, params)?;
    let mut is_ground = vec![false; cloud.len()];
    for &i in &plane.inlier_indices {
        is_ground[i] = true;
    }
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| !is_ground[i]).collect();
    Ok(cloud.select(&keep))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentOutcome {
    Object { cloud: PointCloud, bbox: Aabb3 },
    NoObject,
}

impl SegmentOutcome {
    pub fn object(&self) -> Option<(&PointCloud, &Aabb3)> {
        match self {
            SegmentOutcome::Object { cloud, bbox } => Some((cloud, bbox)),
            SegmentOutcome::NoObject => None,
        }
    }
}

/// Full pipeline: passthrough, voxel grid, ground removal, clustering,
/// gaze selection and bounding box.
pub fn segment_object(scene_cloud: &PointCloud, gaze: Point3, params: &SegmentationParams) -> Result<SegmentOutcome, SegmentationError> {
    params.validate()?;
    if scene_cloud.is_empty() {
        return Err(SegmentationError::TooFewPoints(0));
    }
    let working = preprocess(scene_cloud, params)?;
    let above = remove_ground(&working, params)?;
    if above.is_empty() || !gaze.is_finite() {
        return Ok(SegmentOutcome::NoObject);
    }
    let clusters = euclidean_cluster(&above, params.cluster_tolerance, 1, params.cluster_max_size)?;
    let object = select_object(&clusters, &above, gaze, params);
    if object.is_empty() {
        return Ok(SegmentOutcome::NoObject);
    }
    let bbox = aabb_of(&object)?;
    Ok(SegmentOutcome::Object { cloud: object, bbox })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|&a| Point3::from(a)).collect(), "world")
    }

    fn grid_patch(origin: Point3, n: usize, step: f64) -> Vec<Point3> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push(origin + Point3::new(i as f64 * step, j as f64 * step, 0.0));
            }
        }
        v
    }

    #[test]
    fn passthrough_cases() {
        let c = cloud(&[[0.0, 0.0, 0.5], [0.0, 0.0, 5.0]]);
        assert_eq!(passthrough_filter(&c, &PassthroughBounds::UNBOUNDED), c);
        let b = PassthroughBounds { z: AxisBounds::new(0.0, 2.0), ..PassthroughBounds::UNBOUNDED };
        assert_eq!(passthrough_filter(&c, &b).points, vec![Point3::new(0.0, 0.0, 0.5)]);
    }

    #[test]
    fn voxel_single_centroid() {
        let c = cloud(&[[0.001, 0.001, 0.001], [0.003, 0.001, 0.002], [0.002, 0.004, 0.003]]);
        let out = voxel_downsample(&c, 0.005).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points[0] - Point3::new(0.002, 0.002, 0.002)).norm() < 1e-15);
    }

    #[test]
    fn voxel_sparse_cloud_unchanged() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.1, 0.1, 0.1], [0.2, -0.3, 0.05]]);
        let out = voxel_downsample(&c, 0.01).unwrap();
        assert_eq!(out.points, c.points);
    }

    #[test]
    fn voxel_majority_tie_smallest() {
        let pts = vec![Point3::new(0.001, 0.0, 0.0), Point3::new(0.002, 0.0, 0.0)];
        let c = PointCloud::with_ids(pts, vec![7, 3], "world").unwrap();
        let out = voxel_downsample(&c, 0.01).unwrap();
        assert_eq!(out.object_ids, Some(vec![3]));
        let pts = vec![Point3::ZERO; 3];
        let c = PointCloud::with_ids(pts, vec![7, 7, 3], "world").unwrap();
        assert_eq!(voxel_downsample(&c, 0.01).unwrap().object_ids, Some(vec![7]));
    }

    #[test]
    fn voxel_rejects_bad_leaf() {
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(voxel_downsample(&c, 0.0), Err(SegmentationError::InvalidLeaf(_))));
        assert!(voxel_downsample(&c, -1.0).is_err());
    }

    #[test]
    fn ransac_exact_plane() {
        let mut pts = grid_patch(Point3::ZERO, 10, 0.1);
        for i in 0..10 {
            pts.push(Point3::new(0.05 * i as f64, 0.3, 1.0 + 0.01 * i as f64));
        }
        let c = PointCloud::new(pts, "world");
        let plane = ransac_plane(&c, &SegmentationParams::default()).unwrap();
        assert!((plane.normal - Point3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
        assert!(plane.d.abs() < 1e-9);
        assert_eq!(plane.inlier_indices, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn ransac_degenerate() {
        let c = cloud(&[[1.0, 1.0, 1.0]; 20]);
        assert!(matches!(ransac_plane(&c, &SegmentationParams::default()), Err(SegmentationError::NoValidSample(500))));
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(ransac_plane(&c, &SegmentationParams::default()), Err(SegmentationError::TooFewPoints(2)));
    }

    #[test]
    fn clustering_two_groups() {
        let mut pts = grid_patch(Point3::ZERO, 3, 0.01);
        pts.truncate(10.min(pts.len()));
        pts.push(Point3::new(0.0, 0.0, 0.01));
        let mut b: Vec<Point3> = pts.iter().map(|p| *p + Point3::new(1.0, 0.0, 0.0)).collect();
        let na = pts.len();
        pts.append(&mut b);
        let c = PointCloud::new(pts, "world");
        let clusters = euclidean_cluster(&c, 0.05, 1, None).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].size(), na);
        assert_eq!(clusters[1].size(), na);
        assert_eq!(clusters[0].indices[0], 0);
    }

    #[test]
    fn clustering_min_size_drops_small_group() {
        let mut pts = grid_patch(Point3::ZERO, 3, 0.01);
        pts.extend([Point3::new(1.0, 0.0, 0.0), Point3::new(1.01, 0.0, 0.0), Point3::new(1.02, 0.0, 0.0)]);
        let c = PointCloud::new(pts, "world");
        let clusters = euclidean_cluster(&c, 0.05, 5, None).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].size(), 9);
        let capped = euclidean_cluster(&c, 0.05, 1, Some(5)).unwrap();
        assert_eq!(capped.len(), 1);
        assert_eq!(capped[0].size(), 3);
        assert!(euclidean_cluster(&c, 0.0, 1, None).is_err());
    }

    #[test]
    fn gaze_selection() {
        let params = SegmentationParams::default();
        let mut pts = grid_patch(Point3::new(0.0, 0.0, 0.05), 10, 0.005);
        pts.extend(grid_patch(Point3::new(0.3, 0.0, 0.05), 4, 0.005));
        let c = PointCloud::new(pts, "world");
        let clusters = euclidean_cluster(&c, params.cluster_tolerance, 1, None).unwrap();
        assert_eq!(clusters.len(), 2);
        let gaze = Point3::new(0.02, 0.02, 0.06);
        let sel = select_object(&clusters, &c, gaze, &params);
        assert_eq!(sel.len(), 100);
        // 3 cm beyond the nearest cluster edge
        let far = Point3::new(-0.03, 0.0, 0.05);
        assert!(select_object(&clusters, &c, far, &params).is_empty());
    }

    #[test]
    fn gaze_selection_respects_min_size() {
        let params = SegmentationParams::default();
        let c = cloud(&[[0.0, 0.0, 0.05], [0.005, 0.0, 0.05], [0.01, 0.0, 0.05]]);
        let clusters = euclidean_cluster(&c, params.cluster_tolerance, 1, None).unwrap();
        assert!(select_object(&clusters, &c, Point3::new(0.0, 0.0, 0.05), &params).is_empty());
    }

    #[test]
    fn empty_table_yields_no_object() {
        let mut pts = grid_patch(Point3::new(-0.2, -0.2, 0.0), 80, 0.005);
        pts.extend(grid_patch(Point3::new(0.1, 0.1, 0.05), 8, 0.005));
        let c = PointCloud::new(pts, "world");
        let params = SegmentationParams::default();
        let out = segment_object(&c, Point3::new(-0.15, -0.15, 0.0), &params).unwrap();
        assert_eq!(out, SegmentOutcome::NoObject);
        let out = segment_object(&c, Point3::new(0.12, 0.12, 0.05), &params).unwrap();
        let (obj, bbox) = out.object().unwrap();
        assert_eq!(obj.len(), 64);
        assert!(obj.points.iter().all(|p| bbox.contains(*p)));
    }
}
