//! Orbital recording trajectory around a segmented object.
//!
//! Candidate viewpoints sit on a horizontal circle around the object's
//! bounding-box center, raised by a fixed elevation so the camera looks
//! down at the center. The arm can usually reach only part of that circle;
//! the plan keeps the longest contiguous run of reachable viewpoints.

use std::f64::consts::{FRAC_PI_4, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{look_at, Aabb3, GeometryError, Point3, Pose};

pub const DEFAULT_ELEVATION: f64 = FRAC_PI_4;
pub const DEFAULT_SAMPLES: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("object out of reach: none of the {0} candidate viewpoints is reachable")]
    OutOfReach(usize),
    #[error("at least one viewpoint sample is required")]
    NoSamples,
    #[error("invalid plan input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Reachable region of the wrist camera: an annulus around the arm base
/// (horizontal distance) intersected with a height band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceModel {
    pub base_position: Point3,
    pub min_reach: f64,
    pub max_reach: f64,
    pub min_height: f64,
    pub max_height: f64,
}

impl WorkspaceModel {
    pub fn unbounded() -> Self {
        Self { base_position: Point3::ZERO, min_reach: 0.0, max_reach: f64::INFINITY, min_height: f64::NEG_INFINITY, max_height: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.min_reach >= 0.0 && self.min_reach < self.max_reach) {
            return Err(PlanError::Invalid(format!("reach band [{}, {}] must satisfy 0 <= min < max", self.min_reach, self.max_reach)));
        }
        if !(self.min_height < self.max_height) {
            return Err(PlanError::Invalid(format!("height band [{}, {}] must satisfy min < max", self.min_height, self.max_height)));
        }
        Ok(())
    }

    pub fn reachable(&self, p: Point3) -> bool {
        let dx = p.x - self.base_position.x;
        let dy = p.y - self.base_position.y;
        let r = (dx * dx + dy * dy).sqrt();
        r >= self.min_reach && r <= self.max_reach && p.z >= self.min_height && p.z <= self.max_height
    }
}

impl Default for WorkspaceModel {
    /// A table-mounted arm behind the table edge.
    fn default() -> Self {
        Self { base_position: Point3::new(0.0, -0.55, 0.0), min_reach: 0.15, max_reach: 1.0, min_height: 0.05, max_height: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    /// Radians in `[0, 2π)`, measured from world `+x` toward `+y`.
    pub azimuth: f64,
    /// Camera to world.
    pub pose: Pose,
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitPlan {
    pub center: Point3,
    pub radius: f64,
    pub elevation: f64,
    /// All candidates in azimuth order.
    pub candidates: Vec<Viewpoint>,
    /// Candidate indices of the recorded sweep, in sweep order.
    pub retained: Vec<usize>,
}

impl OrbitPlan {
    pub fn reachable_mask(&self) -> Vec<bool> {
        self.candidates.iter().map(|c| c.reachable).collect()
    }

    pub fn retained_poses(&self) -> impl Iterator<Item = &Pose> {
        self.retained.iter().map(move |&i| &self.candidates[i].pose)
    }

    /// Azimuths of the sweep, unwrapped so they increase monotonically.
    pub fn retained_azimuths(&self) -> Vec<f64> {
        let n = self.candidates.len();
        let Some(&first) = self.retained.first() else {
            return Vec::new();
        };
        self.retained.iter().enumerate().map(|(k, _)| TAU * (first + k) as f64 / n as f64).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// `max(2 * diagonal, safety_min)`.
pub fn orbit_radius(bbox: &Aabb3, safety_min: f64) -> f64 {
    (2.0 * bbox.diagonal()).max(safety_min)
}

/// Camera position for one azimuth on the orbit.
pub fn orbit_position(center: Point3, radius: f64, elevation: f64, azimuth: f64) -> Point3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    center + Point3::new(radius * ce * ca, radius * ce * sa, radius * se)
}

pub fn plan_orbit(bbox: &Aabb3, n_samples: usize, elevation: f64, safety_min: f64, workspace: &WorkspaceModel) -> Result<OrbitPlan, PlanError> {
    if n_samples == 0 {
        return Err(PlanError::NoSamples);
    }
    if !(safety_min >= 0.0) {
        return Err(PlanError::Invalid(format!("safety distance must be non-negative, got {safety_min}")));
    }
    if !(elevation.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(PlanError::Invalid(format!("elevation {elevation} rad must be within (-π/2, π/2)")));
    }
    workspace.validate()?;
    let center = bbox.center();
    let radius = orbit_radius(bbox, safety_min);
    if !(radius > 0.0) {
        return Err(PlanError::Invalid("orbit radius is zero".into()));
    }
    let up = Point3::new(0.0, 0.0, 1.0);
    let candidates = (0..n_samples)
        .map(|i| {
            let azimuth = TAU * i as f64 / n_samples as f64;
            let eye = orbit_position(center, radius, elevation, azimuth);
            let pose = look_at(eye, center, up)?;
            Ok(Viewpoint { azimuth, pose, reachable: workspace.reachable(eye) })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    let mask: Vec<bool> = candidates.iter().map(|c| c.reachable).collect();
    let (start, len) = longest_circular_run(&mask).ok_or(PlanError::OutOfReach(n_samples))?;
    let retained = (0..len).map(|k| (start + k) % n_samples).collect();
    Ok(OrbitPlan { center, radius, elevation, candidates, retained })
}

/// Longest run of `true` on a circular sequence as `(start, len)`; ties go to
/// the smallest start index. `None` if nothing is set.
pub fn longest_circular_run(mask: &[bool]) -> Option<(usize, usize)> {
    let n = mask.len();
    if !mask.iter().any(|&b| b) {
        return None;
    }
    if mask.iter().all(|&b| b) {
        return Some((0, n));
    }
    let mut best = (0usize, 0usize);
    for start in 0..n {
        // runs begin right after a gap
        if !mask[start] || mask[(start + n - 1) % n] {
            continue;
        }
        let mut len = 0;
        while len < n && mask[(start + len) % n] {
            len += 1;
        }
        if len > best.1 {
            best = (start, len);
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox_with_diagonal(diag: f64) -> Aabb3 {
        let e = diag / 3f64.sqrt();
        Aabb3::new(Point3::new(0.0, 0.0, 0.0), Point3::new(e, e, e))
    }

    #[test]
    fn radius_rule() {
        assert!((orbit_radius(&bbox_with_diagonal(0.2), 0.1) - 0.4).abs() < 1e-12);
        assert_eq!(orbit_radius(&bbox_with_diagonal(0.02), 0.3), 0.3);
        assert_eq!(orbit_radius(&Aabb3::from_point(Point3::new(1.0, 2.0, 3.0)), 0.25), 0.25);
    }

    #[test]
    fn full_circle_when_unbounded() {
        let plan = plan_orbit(&bbox_with_diagonal(0.1), 8, DEFAULT_ELEVATION, 0.1, &WorkspaceModel::unbounded()).unwrap();
        assert_eq!(plan.retained, (0..8).collect::<Vec<_>>());
        for vp in &plan.candidates {
            let p = vp.pose.translation;
            let elev = ((p.z - plan.center.z) / plan.radius).asin();
            assert!((elev - FRAC_PI_4).abs() < 1e-12);
        }
    }

    #[test]
    fn half_space_gives_partial_arc() {
        // only positions with y >= center.y are reachable
        let ws = WorkspaceModel { base_position: Point3::new(0.0, 10.0, 0.0), min_reach: 0.0, max_reach: 10.0, ..WorkspaceModel::unbounded() };
        let bbox = Aabb3::new(Point3::new(-0.05, -0.05, 0.0), Point3::new(0.05, 0.05, 0.1));
        let plan = plan_orbit(&bbox, 36, DEFAULT_ELEVATION, 0.1, &ws).unwrap();
        assert!(plan.retained.len() < 36 && plan.retained.len() >= 17);
        for w in plan.retained.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 36);
        }
        let az = plan.retained_azimuths();
        assert!(az.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn out_of_reach() {
        let ws = WorkspaceModel { min_height: 5.0, max_height: 6.0, ..WorkspaceModel::unbounded() };
        assert_eq!(plan_orbit(&bbox_with_diagonal(0.1), 8, DEFAULT_ELEVATION, 0.1, &ws), Err(PlanError::OutOfReach(8)));
        assert_eq!(plan_orbit(&bbox_with_diagonal(0.1), 0, DEFAULT_ELEVATION, 0.1, &ws), Err(PlanError::NoSamples));
    }

    #[test]
    fn circular_runs() {
        assert_eq!(longest_circular_run(&[false, false]), None);
        assert_eq!(longest_circular_run(&[true, true, true]), Some((0, 3)));
        assert_eq!(longest_circular_run(&[true, false, true, true]), Some((2, 3)));
        assert_eq!(longest_circular_run(&[true, true, false, true, true, false]), Some((0, 2)));
        assert_eq!(longest_circular_run(&[false, true, false, true]), Some((1, 1)));
    }
}
