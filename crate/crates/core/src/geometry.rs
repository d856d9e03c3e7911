//! Rigid transforms, pinhole projection and bounding volumes.
//!
//! Camera convention: `+z` forward, `+x` right, `+y` down, so that image
//! `u` grows with `x` and `v` grows with `y`. Pixel `(i, j)` has its center
//! at the continuous coordinate `(i, j)`.
//!
//! A [`Pose`] with `from_frame = A` and `to_frame = B` maps coordinates
//! expressed in `A` into coordinates expressed in `B`:
//! `p_B = R * p_A + t`. Composition follows matrix multiplication, so
//! `compose(a, b)` applies `b` first.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a camera-frame point counts as behind the camera.
pub const Z_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: expected `{expected}`, found `{found}`")]
    FrameMismatch { expected: FrameId, found: FrameId },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("look-at direction is degenerate (eye and target coincide)")]
    DegenerateDirection,
    #[error("up hint is parallel to the viewing direction")]
    ParallelUp,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("object id count {ids} does not match point count {points}")]
    IdLengthMismatch { points: usize, ids: usize },
}

/// A point (or free vector) in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn distance(self, o: Point3) -> f64 {
        (self - o).norm()
    }

    #[inline]
    pub fn distance_squared(self, o: Point3) -> f64 {
        (self - o).norm_squared()
    }

    /// Unit vector in the same direction, or `None` for a (near) zero vector.
    pub fn normalized(self) -> Option<Point3> {
        let n = self.norm();
        if n > 1e-12 && n.is_finite() {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Point3) -> Point3 {
        Point3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Point3) -> Point3 {
        Point3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    #[inline]
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    #[inline]
    fn add_assign(&mut self, o: Point3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    #[inline]
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    #[inline]
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    #[inline]
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Point3;
    #[inline]
    fn div(self, s: f64) -> Point3 {
        Point3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Rotation stored as a unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes the given components. A zero quaternion becomes the identity.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n > 0.0 && n.is_finite() {
            Self { w: w / n, x: x / n, y: y / n, z: z / n }
        } else {
            Self::IDENTITY
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Point3, angle: f64) -> Self {
        match axis.normalized() {
            Some(a) => {
                let (s, c) = (angle * 0.5).sin_cos();
                Self::new_normalize(c, a.x * s, a.y * s, a.z * s)
            }
            None => Self::IDENTITY,
        }
    }

    pub fn from_rotation_z(angle: f64) -> Self {
        Self::from_axis_angle(Point3::new(0.0, 0.0, 1.0), angle)
    }

    /// Builds a quaternion from a rotation matrix given row-major.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            w = (m[2][1] - m[1][2]) / s;
            x = 0.25 * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = 0.25 * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = 0.25 * s;
        }
        Self::new_normalize(w, x, y, z)
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * o`, renormalized.
    pub fn mul(&self, o: &UnitQuaternion) -> Self {
        let (a, b) = (self, o);
        Self::new_normalize(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn dot(&self, o: &UnitQuaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn rotate(&self, v: Point3) -> Point3 {
        // v' = v + 2w (q x v) + 2 q x (q x v)
        let q = Point3::new(self.x, self.y, self.z);
        let t = q.cross(v) * 2.0;
        v + t * self.w + q.cross(t)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Frame identifier. Cheap to clone.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(Arc<str>);

impl FrameId {
    pub fn new(name: &str) -> Self {
        FrameId(Arc::from(name))
    }

    pub fn world() -> Self {
        FrameId::new("world")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for FrameId {
    fn from(s: &str) -> Self {
        FrameId::new(s)
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

/// Rigid transform mapping coordinates in `from_frame` to `to_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Point3,
    pub rotation: UnitQuaternion,
    pub from_frame: FrameId,
    pub to_frame: FrameId,
}

impl Pose {
    pub fn new(translation: Point3, rotation: UnitQuaternion, from_frame: impl Into<FrameId>, to_frame: impl Into<FrameId>) -> Self {
        let r = rotation;
        Self { translation, rotation: UnitQuaternion::new_normalize(r.w, r.x, r.y, r.z), from_frame: from_frame.into(), to_frame: to_frame.into() }
    }

    pub fn identity(frame: impl Into<FrameId>) -> Self {
        let f = frame.into();
        Self { translation: Point3::ZERO, rotation: UnitQuaternion::IDENTITY, from_frame: f.clone(), to_frame: f }
    }

    pub fn from_translation(t: Point3, from: impl Into<FrameId>, to: impl Into<FrameId>) -> Self {
        Self::new(t, UnitQuaternion::IDENTITY, from, to)
    }

    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Rotates a direction without translating it.
    #[inline]
    pub fn apply_vector(&self, v: Point3) -> Point3 {
        self.rotation.rotate(v)
    }

    /// `a ∘ b`: applies `b`, then `a`. Requires `b.to_frame == a.from_frame`.
    pub fn compose(a: &Pose, b: &Pose) -> Result<Pose, GeometryError> {
        if b.to_frame != a.from_frame {
            return Err(GeometryError::FrameMismatch { expected: a.from_frame.clone(), found: b.to_frame.clone() });
        }
        Ok(Pose {
            translation: a.rotation.rotate(b.translation) + a.translation,
            rotation: a.rotation.mul(&b.rotation),
            from_frame: b.from_frame.clone(),
            to_frame: a.to_frame.clone(),
        })
    }

    /// `self.compose_with(b)` is `compose(self, b)`.
    pub fn compose_with(&self, b: &Pose) -> Result<Pose, GeometryError> {
        Pose::compose(self, b)
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.conjugate();
        Pose { translation: -r_inv.rotate(self.translation), rotation: r_inv, from_frame: self.to_frame.clone(), to_frame: self.from_frame.clone() }
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.to_matrix();
        let t = self.translation;
        [[r[0][0], r[0][1], r[0][2], t.x], [r[1][0], r[1][1], r[1][2], t.y], [r[2][0], r[2][1], r[2][2], t.z], [0.0, 0.0, 0.0, 1.0]]
    }
}

/// Free-function spelling of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Result<Pose, GeometryError> {
    Pose::compose(a, b)
}

/// Free-function spelling of [`Pose::inverse`].
pub fn invert(p: &Pose) -> Pose {
    p.inverse()
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad("focal lengths must be positive and finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        Ok(())
    }

    /// Full-HD wrist camera used for recorded frames.
    pub fn wrist_default() -> Self {
        Self { fx: 1380.0, fy: 1380.0, cx: 960.0, cy: 540.0, width: 1920, height: 1080 }
    }

    /// VGA scene camera used for segmentation.
    pub fn scene_default() -> Self {
        Self { fx: 525.0, fy: 525.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}

/// Outcome of projecting a single camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    BehindCamera,
}

#[inline]
pub fn project_point(p: Point3, k: &CameraIntrinsics) -> Projection {
    if p.z <= Z_EPS {
        return Projection::BehindCamera;
    }
    Projection::Pixel { u: k.fx * p.x / p.z + k.cx, v: k.fy * p.y / p.z + k.cy }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Roi2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn clipped(&self, width: u32, height: u32) -> Roi2D {
        let (w, h) = (width as f64, height as f64);
        Roi2D { x_min: self.x_min.clamp(0.0, w), y_min: self.y_min.clamp(0.0, h), x_max: self.x_max.clamp(0.0, w), y_max: self.y_max.clamp(0.0, h) }
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.is_valid() && self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width as f64 && self.y_max <= height as f64
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x_min && u <= self.x_max && v >= self.y_min && v <= self.y_max
    }
}

/// Bounding box of all points of `cloud` (camera frame) with `z > Z_EPS`,
/// optionally clipped to the image. `None` when nothing projects.
pub fn project_cloud_roi(cloud: &PointCloud, k: &CameraIntrinsics, clip: bool) -> Option<Roi2D> {
    let mut roi: Option<Roi2D> = None;
    for p in &cloud.points {
        if let Projection::Pixel { u, v } = project_point(*p, k) {
            roi = Some(match roi {
                None => Roi2D::new(u, v, u, v),
                Some(r) => Roi2D::new(r.x_min.min(u), r.y_min.min(v), r.x_max.max(u), r.y_max.max(v)),
            });
        }
    }
    if clip {
        roi.map(|r| r.clipped(k.width, k.height))
    } else {
        roi
    }
}

/// Axis-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb3 {
    pub fn new(a: Point3, b: Point3) -> Self {
        Self { min: a.min(b), max: a.max(b) }
    }

    pub fn from_point(p: Point3) -> Self {
        Self { min: p, max: p }
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.x >= self.min.x && p.y >= self.min.y && p.z >= self.min.z && p.x <= self.max.x && p.y <= self.max.y && p.z <= self.max.z
    }

    pub fn grow(&mut self, p: Point3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    pub fn corners(&self) -> [Point3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Point3::new(a.x, a.y, a.z),
            Point3::new(b.x, a.y, a.z),
            Point3::new(a.x, b.y, a.z),
            Point3::new(b.x, b.y, a.z),
            Point3::new(a.x, a.y, b.z),
            Point3::new(b.x, a.y, b.z),
            Point3::new(a.x, b.y, b.z),
            Point3::new(b.x, b.y, b.z),
        ]
    }
}

/// Points in a named frame, optionally with ground-truth object ids
/// (`-1` marks background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub object_ids: Option<Vec<i32>>,
    pub frame: FrameId,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: impl Into<FrameId>) -> Self {
        Self { points, object_ids: None, frame: frame.into() }
    }

    pub fn with_ids(points: Vec<Point3>, ids: Vec<i32>, frame: impl Into<FrameId>) -> Result<Self, GeometryError> {
        if ids.len() != points.len() {
            return Err(GeometryError::IdLengthMismatch { points: points.len(), ids: ids.len() });
        }
        Ok(Self { points, object_ids: Some(ids), frame: frame.into() })
    }

    pub fn empty(frame: impl Into<FrameId>) -> Self {
        Self::new(Vec::new(), frame)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn id(&self, i: usize) -> Option<i32> {
        self.object_ids.as_ref().map(|ids| ids[i])
    }

    /// Sub-cloud with the given indices, in the order given.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            object_ids: self.object_ids.as_ref().map(|ids| indices.iter().map(|&i| ids[i]).collect()),
            frame: self.frame.clone(),
        }
    }

    pub fn aabb(&self) -> Result<Aabb3, GeometryError> {
        aabb_of(self)
    }
}

pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> Result<PointCloud, GeometryError> {
    if cloud.frame != pose.from_frame {
        return Err(GeometryError::FrameMismatch { expected: pose.from_frame.clone(), found: cloud.frame.clone() });
    }
    Ok(PointCloud { points: cloud.points.iter().map(|&p| pose.apply(p)).collect(), object_ids: cloud.object_ids.clone(), frame: pose.to_frame.clone() })
}

pub fn aabb_of(cloud: &PointCloud) -> Result<Aabb3, GeometryError> {
    let mut it = cloud.points.iter();
    let first = *it.next().ok_or(GeometryError::EmptyCloud)?;
    let mut b = Aabb3::from_point(first);
    for &p in it {
        b.grow(p);
    }
    Ok(b)
}

/// Camera pose (camera → `world`) at `eye` whose `+z` axis points at
/// `target` and whose `-y` axis leans toward `up_hint`.
pub fn look_at(eye: Point3, target: Point3, up_hint: Point3) -> Result<Pose, GeometryError> {
    let dir = target - eye;
    if dir.norm() <= 1e-9 {
        return Err(GeometryError::DegenerateDirection);
    }
    let z = dir.normalized().ok_or(GeometryError::DegenerateDirection)?;
    let down = -up_hint;
    let y = (down - z * down.dot(z)).normalized().ok_or(GeometryError::ParallelUp)?;
    if up_hint.normalized().is_none_or(|u| u.cross(z).norm() < 1e-9) {
        return Err(GeometryError::ParallelUp);
    }
    let x = y.cross(z);
    let m = [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]];
    Ok(Pose::new(eye, UnitQuaternion::from_matrix(&m), "camera", "world"))
}
