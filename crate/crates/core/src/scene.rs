//! Synthetic tabletop world and a ray-cast depth/RGB camera.
//!
//! The ground is the plane `z = 0` of the `world` frame. Objects are boxes,
//! spheres and cylinders with analytic ray intersections, so every rendered
//! pixel carries an exact ground-truth object id.
//!
//! Depth values are z-depth along the optical axis (not range), in meters,
//! with `0` meaning no return. The optional Gaussian noise is applied to the
//! range along each pixel ray.

use std::collections::HashSet;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Point3, PointCloud, Pose, UnitQuaternion, Z_EPS};

/// Pixels of ground and empty space have this id.
pub const BACKGROUND_ID: i32 = -1;

const GROUND_COLOR: [u8; 3] = [150, 140, 125];
const SKY_COLOR: [u8; 3] = [20, 20, 30];
const AMBIENT: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown object id {0}")]
    UnknownObject(i32),
    #[error("duplicate object id {0}")]
    DuplicateId(i32),
    #[error("object {id}: {reason}")]
    InvalidPrimitive { id: i32, reason: String },
    #[error("scene file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scene serialization: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("scene file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("could not place {requested} objects without overlap (placed {placed})")]
    Placement { requested: usize, placed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Full edge lengths along the object's x, y, z axes.
    Box {
        size: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
    /// Axis along the object's z, centered at the origin.
    Cylinder {
        radius: f64,
        height: f64,
    },
}

impl Shape {
    /// Object-frame bounding box half extents.
    pub fn half_extents(&self) -> Point3 {
        match *self {
            Shape::Box { size } => Point3::new(size[0] / 2.0, size[1] / 2.0, size[2] / 2.0),
            Shape::Sphere { radius } => Point3::new(radius, radius, radius),
            Shape::Cylinder { radius, height } => Point3::new(radius, radius, height / 2.0),
        }
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Shape::Box { size } => size.to_vec(),
            Shape::Sphere { radius } => vec![radius],
            Shape::Cylinder { radius, height } => vec![radius, height],
        }
    }

    /// Signed distance from an object-frame point to the surface.
    pub fn signed_distance(&self, p: Point3) -> f64 {
        match *self {
            Shape::Box { .. } => {
                let h = self.half_extents();
                let q = Point3::new(p.x.abs() - h.x, p.y.abs() - h.y, p.z.abs() - h.z);
                let outside = Point3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Cylinder { radius, height } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - height / 2.0;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub id: i32,
    pub class_name: String,
    pub shape: Shape,
    /// Object frame to world.
    pub pose: Pose,
    pub color: [u8; 3],
    /// Probability that a pixel on this object returns no depth.
    pub dropout: f64,
}

impl Primitive {
    pub fn new(id: i32, class_name: &str, shape: Shape, translation: Point3, rotation: UnitQuaternion, color: [u8; 3]) -> Self {
        Self { id, class_name: class_name.to_string(), shape, pose: Pose::new(translation, rotation, object_frame(id).as_str(), "world"), color, dropout: 0.0 }
    }

    /// World-frame corners of the object-frame bounding box.
    pub fn world_corners(&self) -> [Point3; 8] {
        let h = self.shape.half_extents();
        let mut out = [Point3::ZERO; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = Point3::new(if i & 1 == 0 { -h.x } else { h.x }, if i & 2 == 0 { -h.y } else { h.y }, if i & 4 == 0 { -h.z } else { h.z });
            *c = self.pose.apply(local);
        }
        out
    }

    /// Lowest world z of the surface.
    pub fn min_z(&self) -> f64 {
        let c = self.pose.translation;
        match self.shape {
            Shape::Sphere { radius } => c.z - radius,
            Shape::Box { .. } => self.world_corners().iter().map(|p| p.z).fold(f64::INFINITY, f64::min),
            Shape::Cylinder { radius, height } => {
                let axis = self.pose.apply_vector(Point3::new(0.0, 0.0, 1.0));
                let az = axis.z.abs().min(1.0);
                c.z - height / 2.0 * az - radius * (1.0 - az * az).sqrt()
            }
        }
    }

    pub fn signed_distance_world(&self, p: Point3) -> f64 {
        self.shape.signed_distance(self.pose.inverse().apply(p))
    }

    fn validate(&self) -> Result<(), SceneError> {
        let bad = |reason: String| Err(SceneError::InvalidPrimitive { id: self.id, reason });
        if self.id < 0 {
            return bad("object id must be non-negative".into());
        }
        if self.shape.dims().iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1]", self.dropout));
        }
        if !self.pose.translation.is_finite() {
            return bad("non-finite position".into());
        }
        if self.min_z() < -1e-9 {
            return bad(format!("extends below the ground (min z = {:.4} m)", self.min_z()));
        }
        if self.class_name.trim().is_empty() {
            return bad("empty class name".into());
        }
        Ok(())
    }
}

pub fn object_frame(id: i32) -> String {
    format!("object_{id}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub rng_seed: u64,
    /// Direction towards the light, world frame.
    pub light_direction: Point3,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, rng_seed: u64) -> Result<Self, SceneError> {
        let s = Self { primitives, rng_seed, light_direction: default_light() };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(rng_seed: u64) -> Self {
        Self { primitives: Vec::new(), rng_seed, light_direction: default_light() }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut seen = HashSet::new();
        for p in &self.primitives {
            p.validate()?;
            if !seen.insert(p.id) {
                return Err(SceneError::DuplicateId(p.id));
            }
        }
        Ok(())
    }

    pub fn primitive(&self, id: i32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }

    /// Parses the TOML scene description.
    pub fn from_toml_str(s: &str) -> Result<Self, SceneError> {
        let file: SceneFile = toml::from_str(s)?;
        file.into_scene()
    }

    pub fn to_toml_string(&self) -> Result<String, SceneError> {
        Ok(toml::to_string(&SceneFile::from_scene(self))?)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_toml_string()?).map_err(|source| SceneError::Io { path: path.display().to_string(), source })
    }

    /// Random tabletop with `count` resting, well separated objects inside
    /// `[-0.3, 0.3] x [-0.2, 0.2]`.
    pub fn random_tabletop(seed: u64, count: usize) -> Result<Self, SceneError> {
        const CUBOIDS: [&str; 5] = ["stapler", "gamepad", "hole puncher", "eraser", "phone"];
        const CYLINDERS: [&str; 3] = ["cup", "tape roll", "shuttlecock"];
        const SPHERES: [&str; 2] = ["table tennis ball", "orange"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut placed: Vec<(Point3, f64)> = Vec::new();
        let mut prims = Vec::new();
        let mut attempts = 0;
        while prims.len() < count {
            attempts += 1;
            if attempts > 10_000 {
                return Err(SceneError::Placement { requested: count, placed: prims.len() });
            }
            let kind = rng.random_range(0..10);
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let (shape, class) = if kind < 6 {
                let size = [rng.random_range(0.06..0.15), rng.random_range(0.04..0.09), rng.random_range(0.015..0.06)];
                (Shape::Box { size }, CUBOIDS[rng.random_range(0..CUBOIDS.len())])
            } else if kind < 9 {
                let shape = Shape::Cylinder { radius: rng.random_range(0.025..0.045), height: rng.random_range(0.015..0.07) };
                (shape, CYLINDERS[rng.random_range(0..CYLINDERS.len())])
            } else {
                (Shape::Sphere { radius: rng.random_range(0.02..0.035) }, SPHERES[rng.random_range(0..SPHERES.len())])
            };
            let h = shape.half_extents();
            let footprint = (h.x * h.x + h.y * h.y).sqrt();
            let xy = Point3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2), 0.0);
            // keep at least 6 cm of free table between footprints
            if placed.iter().any(|(c, r)| c.distance(xy) < r + footprint + 0.06) {
                continue;
            }
            let color = [rng.random_range(40..255), rng.random_range(40..255), rng.random_range(40..255)];
            let id = prims.len() as i32;
            let translation = Point3::new(xy.x, xy.y, h.z);
            prims.push(Primitive::new(id, class, shape, translation, UnitQuaternion::from_rotation_z(yaw), color));
            placed.push((xy, footprint));
        }
        Scene::new(prims, seed)
    }
}

fn default_light() -> Point3 {
    Point3::new(0.4, 0.3, 1.0).normalized().expect("non-zero")
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    light_direction: Option<[f64; 3]>,
    #[serde(default, rename = "primitive")]
    primitives: Vec<PrimitiveRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrimitiveRecord {
    id: i32,
    class: String,
    shape: Shape,
    /// meters, world frame
    translation: [f64; 3],
    /// unit quaternion `[w, x, y, z]`, object to world
    #[serde(default = "identity_wxyz")]
    rotation: [f64; 4],
    color: [u8; 3],
    #[serde(default)]
    dropout: f64,
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl SceneFile {
    fn into_scene(self) -> Result<Scene, SceneError> {
        let light = match self.light_direction {
            Some(l) => Point3::from(l).normalized().ok_or(SceneError::InvalidPrimitive { id: -1, reason: "light direction must be non-zero".into() })?,
            None => default_light(),
        };
        let prims = self
            .primitives
            .into_iter()
            .map(|r| {
                let [w, x, y, z] = r.rotation;
                let mut p = Primitive::new(r.id, &r.class, r.shape, Point3::from(r.translation), UnitQuaternion::new_normalize(w, x, y, z), r.color);
                p.dropout = r.dropout;
                p
            })
            .collect();
        let mut scene = Scene::new(prims, self.seed)?;
        scene.light_direction = light;
        Ok(scene)
    }

    fn from_scene(s: &Scene) -> Self {
        SceneFile {
            seed: s.rng_seed,
            light_direction: (s.light_direction != default_light()).then(|| s.light_direction.to_array()),
            primitives: s
                .primitives
                .iter()
                .map(|p| PrimitiveRecord {
                    id: p.id,
                    class: p.class_name.clone(),
                    shape: p.shape.clone(),
                    translation: p.pose.translation.to_array(),
                    rotation: p.pose.rotation.to_array(),
                    color: p.color,
                    dropout: p.dropout,
                })
                .collect(),
        }
    }
}

/// Per-pixel depth (meters, z-depth, `0` = no return) and object ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub id_map: Vec<i32>,
}

impl DepthImage {
    #[inline]
    pub fn depth_at(&self, u: u32, v: u32) -> f64 {
        self.depth[(v * self.width + u) as usize]
    }

    #[inline]
    pub fn id_at(&self, u: u32, v: u32) -> i32 {
        self.id_map[(v * self.width + u) as usize]
    }

    /// Tight pixel box around all pixels showing `id`, with each pixel
    /// covering `[i - 0.5, i + 0.5]`, clipped to the image.
    pub fn id_bbox(&self, id: i32) -> Option<crate::geometry::Roi2D> {
        let (mut u0, mut v0, mut u1, mut v1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for v in 0..self.height {
            let row = &self.id_map[(v * self.width) as usize..((v + 1) * self.width) as usize];
            for (u, &i) in row.iter().enumerate() {
                if i == id {
                    any = true;
                    let u = u as u32;
                    u0 = u0.min(u);
                    u1 = u1.max(u);
                    v0 = v0.min(v);
                    v1 = v1.max(v);
                }
            }
        }
        any.then(|| crate::geometry::Roi2D::new(u0 as f64 - 0.5, v0 as f64 - 0.5, u1 as f64 + 0.5, v1 as f64 + 0.5).clipped(self.width, self.height))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { noise_sigma: 0.0, seed: 0 }
    }
}

pub struct RenderOutput {
    pub rgb: RgbImage,
    pub depth: DepthImage,
}

pub fn render_depth(scene: &Scene, camera: &Pose, k: &CameraIntrinsics, noise_sigma: f64, seed: u64) -> DepthImage {
    Renderer::new(scene, camera, k).run(RenderOptions { noise_sigma, seed }, false).depth
}

pub fn render_rgb(scene: &Scene, camera: &Pose, k: &CameraIntrinsics) -> RgbImage {
    Renderer::new(scene, camera, k).run(RenderOptions::default(), true).rgb
}

/// Depth and color from a single ray-casting pass.
pub fn render(scene: &Scene, camera: &Pose, k: &CameraIntrinsics, opts: RenderOptions) -> RenderOutput {
    Renderer::new(scene, camera, k).run(opts, true)
}

/// Back-projects every pixel with depth into `camera.to_frame`, carrying ids.
pub fn depth_to_cloud(d: &DepthImage, k: &CameraIntrinsics, camera: &Pose) -> PointCloud {
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for v in 0..d.height {
        let y = (v as f64 - k.cy) / k.fy;
        for u in 0..d.width {
            let idx = (v * d.width + u) as usize;
            let z = d.depth[idx];
            if z > 0.0 {
                let x = (u as f64 - k.cx) / k.fx;
                points.push(camera.apply(Point3::new(x * z, y * z, z)));
                ids.push(d.id_map[idx]);
            }
        }
    }
    PointCloud { points, object_ids: Some(ids), frame: camera.to_frame.clone() }
}

/// A seeded point on the upward-facing surface of object `object_id`, plus
/// isotropic Gaussian jitter of `jitter_sigma` per axis.
pub fn sample_gaze(scene: &Scene, object_id: i32, jitter_sigma: f64, seed: u64) -> Result<Point3, SceneError> {
    let prim = scene.primitive(object_id).ok_or(SceneError::UnknownObject(object_id))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(object_id as u64 + 1)));
    let up_local = prim.pose.inverse().apply_vector(Point3::new(0.0, 0.0, 1.0));
    let local = match prim.shape {
        Shape::Box { .. } => {
            let h = prim.shape.half_extents();
            // face whose outward normal points most upward
            let comps = [up_local.x, up_local.y, up_local.z];
            let axis = (0..3).max_by(|&a, &b| comps[a].abs().total_cmp(&comps[b].abs())).unwrap_or(2);
            let sign = comps[axis].signum();
            let mut p = [rng.random_range(-0.8..=0.8) * h.x, rng.random_range(-0.8..=0.8) * h.y, rng.random_range(-0.8..=0.8) * h.z];
            p[axis] = sign * [h.x, h.y, h.z][axis];
            Point3::from(p)
        }
        Shape::Sphere { radius } => {
            // within 45 degrees of straight up
            let cos_max = std::f64::consts::FRAC_1_SQRT_2;
            let cz: f64 = rng.random_range(cos_max..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - cz * cz).sqrt();
            let dir_world = Point3::new(s * phi.cos(), s * phi.sin(), cz);
            prim.pose.inverse().apply_vector(dir_world) * radius
        }
        Shape::Cylinder { radius, height } => {
            if up_local.z.abs() >= 0.5 {
                let r = radius * 0.8 * rng.random_range(0.0f64..=1.0).sqrt();
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Point3::new(r * phi.cos(), r * phi.sin(), up_local.z.signum() * height / 2.0)
            } else {
                let side = Point3::new(up_local.x, up_local.y, 0.0).normalized().unwrap_or(Point3::new(1.0, 0.0, 0.0));
                let z = rng.random_range(-0.8..=0.8) * height / 2.0;
                Point3::new(side.x * radius, side.y * radius, z)
            }
        }
    };
    let surface = prim.pose.apply(local);
    if jitter_sigma <= 0.0 {
        return Ok(surface);
    }
    let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
    Ok(surface + Point3::new(n(), n(), n()) * jitter_sigma)
}

type Mat3 = [[f64; 3]; 3];

#[inline]
fn mat_vec(m: &Mat3, v: Point3) -> Point3 {
    Point3::new(m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z, m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z, m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z)
}

struct Prepared<'a> {
    prim: &'a Primitive,
    world_to_obj: Mat3,
    obj_to_world: Mat3,
    /// camera origin in object coordinates
    origin: Point3,
    /// pixel rectangle that can contain the object, inclusive
    rect: Option<(i64, i64, i64, i64)>,
    color: [f64; 3],
}

struct Renderer<'a> {
    scene: &'a Scene,
    k: CameraIntrinsics,
    cam_rot: Mat3,
    eye: Point3,
    prepared: Vec<Prepared<'a>>,
}

struct Hit {
    t: f64,
    normal_world: Point3,
    id: i32,
    color: [f64; 3],
    dropout: f64,
}

impl<'a> Renderer<'a> {
    fn new(scene: &'a Scene, camera: &Pose, k: &CameraIntrinsics) -> Self {
        let cam_rot = camera.rotation.to_matrix();
        let eye = camera.translation;
        let world_to_cam = camera.inverse();
        let prepared = scene
            .primitives
            .iter()
            .filter_map(|prim| {
                let obj_to_world = prim.pose.rotation.to_matrix();
                let world_to_obj = transpose(&obj_to_world);
                let origin = mat_vec(&world_to_obj, eye - prim.pose.translation);
                let corners: Vec<Point3> = prim.world_corners().iter().map(|c| world_to_cam.apply(*c)).collect();
                if corners.iter().all(|c| c.z <= Z_EPS) {
                    return None;
                }
                let rect = if corners.iter().all(|c| c.z > Z_EPS) {
                    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
                    for c in &corners {
                        let u = k.fx * c.x / c.z + k.cx;
                        let v = k.fy * c.y / c.z + k.cy;
                        u0 = u0.min(u);
                        u1 = u1.max(u);
                        v0 = v0.min(v);
                        v1 = v1.max(v);
                    }
                    let r = (u0.floor() as i64 - 1, v0.floor() as i64 - 1, u1.ceil() as i64 + 1, v1.ceil() as i64 + 1);
                    if r.2 < 0 || r.3 < 0 || r.0 >= k.width as i64 || r.1 >= k.height as i64 {
                        return None;
                    }
                    Some(r)
                } else {
                    None
                };
                let color = prim.color.map(|c| c as f64);
                Some(Prepared { prim, world_to_obj, obj_to_world, origin, rect, color })
            })
            .collect();
        Self { scene, k: *k, cam_rot, eye, prepared }
    }

    fn run(&self, opts: RenderOptions, want_rgb: bool) -> RenderOutput {
        let (w, h) = (self.k.width as usize, self.k.height as usize);
        let mut depth = vec![0.0f64; w * h];
        let mut id_map = vec![BACKGROUND_ID; w * h];
        let mut rgb = if want_rgb { vec![0u8; w * h * 3] } else { Vec::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let light = self.scene.light_direction;
        let ground_shade = shade_factor(Point3::new(0.0, 0.0, 1.0), light);
        let ground_rgb = GROUND_COLOR.map(|c| (c as f64 * ground_shade).round().clamp(0.0, 255.0) as u8);
        let du_cam = Point3::new(1.0 / self.k.fx, 0.0, 0.0);
        let du_world = mat_vec(&self.cam_rot, du_cam);
        let du_obj: Vec<Point3> = self.prepared.iter().map(|p| mat_vec(&p.world_to_obj, du_world)).collect();
        let mut active: Vec<usize> = Vec::with_capacity(self.prepared.len());
        let mut row_obj: Vec<Point3> = vec![Point3::ZERO; self.prepared.len()];

        for v in 0..h {
            let row_cam = Point3::new(-self.k.cx / self.k.fx, (v as f64 - self.k.cy) / self.k.fy, 1.0);
            let row_world = mat_vec(&self.cam_rot, row_cam);
            active.clear();
            for (i, p) in self.prepared.iter().enumerate() {
                let in_row = p.rect.is_none_or(|r| (v as i64) >= r.1 && (v as i64) <= r.3);
                if in_row {
                    active.push(i);
                    row_obj[i] = mat_vec(&p.world_to_obj, row_world);
                }
            }
            for u in 0..w {
                let uf = u as f64;
                let dir = row_world + du_world * uf;
                let mut best: Option<Hit> = None;
                // ground plane z = 0
                if dir.z != 0.0 {
                    let t = -self.eye.z / dir.z;
                    if t > Z_EPS {
                        best = Some(Hit { t, normal_world: Point3::new(0.0, 0.0, 1.0), id: BACKGROUND_ID, color: [0.0; 3], dropout: 0.0 });
                    }
                }
                for &i in &active {
                    let p = &self.prepared[i];
                    if let Some((u0, _, u1, _)) = p.rect {
                        if (u as i64) < u0 || (u as i64) > u1 {
                            continue;
                        }
                    }
                    let d_obj = row_obj[i] + du_obj[i] * uf;
                    if let Some((t, n)) = intersect(&p.prim.shape, p.origin, d_obj) {
                        if best.as_ref().is_none_or(|b| t < b.t) {
                            best = Some(Hit { t, normal_world: mat_vec(&p.obj_to_world, n), id: p.prim.id, color: p.color, dropout: p.prim.dropout });
                        }
                    }
                }
                let idx = v * w + u;
                match best {
                    None => {
                        if want_rgb {
                            rgb[idx * 3..idx * 3 + 3].copy_from_slice(&SKY_COLOR);
                        }
                    }
                    Some(hit) => {
                        id_map[idx] = hit.id;
                        if want_rgb {
                            let px = if hit.id == BACKGROUND_ID {
                                ground_rgb
                            } else {
                                let s = shade_factor(hit.normal_world, light);
                                hit.color.map(|c| (c * s).round().clamp(0.0, 255.0) as u8)
                            };
                            rgb[idx * 3..idx * 3 + 3].copy_from_slice(&px);
                        }
                        let dropped = hit.dropout > 0.0 && rng.random::<f64>() < hit.dropout;
                        if !dropped {
                            let mut z = hit.t;
                            if opts.noise_sigma > 0.0 {
                                let n: f64 = StandardNormal.sample(&mut rng);
                                z += n * opts.noise_sigma / dir.norm();
                            }
                            depth[idx] = if z > 0.0 { z } else { 0.0 };
                        }
                    }
                }
            }
        }
        let rgb = if want_rgb {
            RgbImage::from_raw(self.k.width, self.k.height, rgb).expect("buffer size matches")
        } else {
            RgbImage::from_pixel(1, 1, Rgb([0, 0, 0]))
        };
        RenderOutput { rgb, depth: DepthImage { width: self.k.width, height: self.k.height, depth, id_map } }
    }
}

fn transpose(m: &Mat3) -> Mat3 {
    [[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]]
}

#[inline]
fn shade_factor(normal: Point3, light: Point3) -> f64 {
    AMBIENT + (1.0 - AMBIENT) * normal.dot(light).max(0.0)
}

/// Nearest positive ray parameter and object-frame outward normal. The
/// direction need not be normalized; `t` is in units of `d`.
pub fn intersect(shape: &Shape, o: Point3, d: Point3) -> Option<(f64, Point3)> {
    match *shape {
        Shape::Box { .. } => intersect_box(shape.half_extents(), o, d),
        Shape::Sphere { radius } => {
            let a = d.dot(d);
            let b = o.dot(d);
            let c = o.dot(o) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = (-b - sq) / a;
            let t = if t0 > Z_EPS { t0 } else { (-b + sq) / a };
            if t <= Z_EPS {
                return None;
            }
            Some((t, (o + d * t) / radius))
        }
        Shape::Cylinder { radius, height } => {
            let hh = height / 2.0;
            let mut best: Option<(f64, Point3)> = None;
            let mut consider = |t: f64, n: Point3| {
                if t > Z_EPS && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            let a = d.x * d.x + d.y * d.y;
            if a > 0.0 {
                let b = o.x * d.x + o.y * d.y;
                let c = o.x * o.x + o.y * o.y - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / a, (-b + sq) / a] {
                        let p = o + d * t;
                        if p.z.abs() <= hh {
                            consider(t, Point3::new(p.x / radius, p.y / radius, 0.0));
                        }
                    }
                }
            }
            if d.z != 0.0 {
                for (zc, nz) in [(hh, 1.0), (-hh, -1.0)] {
                    let t = (zc - o.z) / d.z;
                    let p = o + d * t;
                    if p.x * p.x + p.y * p.y <= radius * radius {
                        consider(t, Point3::new(0.0, 0.0, nz));
                    }
                }
            }
            best
        }
    }
}

fn intersect_box(h: Point3, o: Point3, d: Point3) -> Option<(f64, Point3)> {
    let (oa, da, ha) = (o.to_array(), d.to_array(), h.to_array());
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for i in 0..3 {
        if da[i] == 0.0 {
            if oa[i].abs() > ha[i] {
                return None;
            }
            continue;
        }
        let mut t1 = (-ha[i] - oa[i]) / da[i];
        let mut t2 = (ha[i] - oa[i]) / da[i];
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        if t1 > t_near {
            t_near = t1;
            near_axis = i;
        }
        if t2 < t_far {
            t_far = t2;
            far_axis = i;
        }
        if t_near > t_far {
            return None;
        }
    }
    let (t, axis, sign) = if t_near > Z_EPS {
        (t_near, near_axis, -da[near_axis].signum())
    } else if t_far > Z_EPS {
        (t_far, far_axis, da[far_axis].signum())
    } else {
        return None;
    };
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((t, Point3::from(n)))
}
