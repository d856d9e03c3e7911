//! Invariant checks for orbit plans, shared by property and acceptance tests.

use gazeteach::geometry::{Aabb3, Point3};
use gazeteach::planner::{OrbitPlan, WorkspaceModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub bbox: Aabb3,
    pub samples: usize,
    pub safety_min: f64,
    pub workspace: WorkspaceModel,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Point3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(0.0..0.1));
    let h = Point3::new(rng.random_range(0.0..0.12), rng.random_range(0.0..0.12), rng.random_range(0.0..0.08));
    let min_reach = rng.random_range(0.0..0.4);
    let min_height = rng.random_range(-0.2..0.3);
    Case {
        bbox: Aabb3::new(c - h, c + h),
        samples: rng.random_range(1..400),
        safety_min: rng.random_range(0.0..0.5),
        workspace: WorkspaceModel {
            base_position: Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
            min_reach,
            max_reach: min_reach + rng.random_range(0.05..1.5),
            min_height,
            max_height: min_height + rng.random_range(0.05..1.5),
        },
    }
}

/// Every invariant an orbit plan must satisfy; the first violation, if any.
pub fn check_plan(plan: &OrbitPlan, case: &Case, elevation: f64) -> Result<(), String> {
    let diag = (case.bbox.max - case.bbox.min).norm();
    let expect_r = if 2.0 * diag > case.safety_min { 2.0 * diag } else { case.safety_min };
    if plan.radius != expect_r {
        return Err(format!("radius {} != {}", plan.radius, expect_r));
    }
    let center = (case.bbox.min + case.bbox.max) * 0.5;
    if plan.candidates.len() != case.samples {
        return Err(format!("{} candidates for {} samples", plan.candidates.len(), case.samples));
    }
    for (i, v) in plan.candidates.iter().enumerate() {
        let pos = v.pose.translation;
        if ((pos - center).norm() - plan.radius).abs() > 1e-9 {
            return Err(format!("candidate {i} off the sphere"));
        }
        let el = ((pos.z - center.z) / plan.radius).clamp(-1.0, 1.0).asin();
        if (el - elevation).abs() > 1e-9 {
            return Err(format!("candidate {i} elevation {el}"));
        }
        let fwd = v.pose.apply_vector(Point3::new(0.0, 0.0, 1.0));
        let to_c = (center - pos) * (1.0 / (center - pos).norm());
        if fwd.cross(to_c).norm() > 1e-9 || fwd.dot(to_c) <= 0.0 {
            return Err(format!("candidate {i} does not look at the center"));
        }
        // depression angle of the view ray below horizontal
        let dep = (-fwd.z).clamp(-1.0, 1.0).asin();
        if (dep - elevation).abs() > 1e-9 {
            return Err(format!("candidate {i} view depression {dep}"));
        }
        if v.reachable != case.workspace.reachable(pos) {
            return Err(format!("candidate {i} reachability flag wrong"));
        }
    }
    let n = case.samples;
    let r = &plan.retained;
    if r.is_empty() {
        return Err("empty retained arc".into());
    }
    for w in r.windows(2) {
        if w[1] != (w[0] + 1) % n {
            return Err("retained arc is not contiguous".into());
        }
    }
    if r.iter().any(|&i| !plan.candidates[i].reachable) {
        return Err("unreachable pose retained".into());
    }
    // maximal: longest run of reachable candidates on the circle
    let mask = plan.reachable_mask();
    let best = if mask.iter().all(|b| *b) { n } else { (0..n).map(|s| (0..n).take_while(|k| mask[(s + k) % n]).count()).max().unwrap() };
    if r.len() != best {
        return Err(format!("retained {} of a best run of {}", r.len(), best));
    }
    let az = plan.retained_azimuths();
    if az.windows(2).any(|w| w[1] <= w[0]) {
        return Err("retained azimuths not increasing".into());
    }
    Ok(())
}
