//! On-disk dataset of recorded sessions.
//!
//! ```text
//! root/
//!   manifest.json
//!   intrinsics.json
//!   <class>/<entity:03>/session.json
//!   <class>/<entity:03>/<frame:06>/{rgb.png, depth.d16, roi.json, pose.json}
//! ```
//!
//! `depth.d16` is the 8-byte magic `GZTDEPTH`, width and height as `u32`
//! little-endian, then `width * height` little-endian `u16` millimeters in
//! row-major order. `0` marks a pixel without a return.
//!
//! JSON keys come in a fixed schema order, carry unit suffixes and there are
//! no timestamps, so writing the same sessions twice gives identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{codecs::png::PngEncoder, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autolabel::{AutolabelError, FrameImages, FrameRecord, FrameSink, RecordingSession, SkipReason, ViewpointStats};
use crate::geometry::{CameraIntrinsics, FrameId, Point3, PointCloud, Pose, Roi2D, UnitQuaternion};
use crate::planner::OrbitPlan;
use crate::scene::DepthImage;

pub const DEPTH_MAGIC: &[u8; 8] = b"GZTDEPTH";
pub const FORMAT_NAME: &str = "gazeteach-dataset";
pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of a stored quaternion's norm from 1.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing {kind} file {path} (frame {frame})")]
    MissingFile { kind: &'static str, path: PathBuf, frame: String },
    #[error("no sessions to write")]
    NoSessions,
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("non-unit quaternion in {path}: norm {norm}")]
    NonUnitQuaternion { path: PathBuf, norm: f64 },
    #[error("ROI out of image bounds in {path}: {roi:?}")]
    RoiOutOfBounds { path: PathBuf, roi: Roi2D },
    #[error("class name {0:?} is not a safe path component")]
    BadClassName(String),
    #[error("session {class}/{entity} already exists")]
    DuplicateEntity { class: String, entity: u32 },
    #[error("duplicate frame index {index} in {class}/{entity}")]
    DuplicateFrame { class: String, entity: u32, index: usize },
    #[error("frame intrinsics differ from the dataset intrinsics")]
    IntrinsicsMismatch,
    #[error("frame {0} has no stored images")]
    MissingImages(usize),
    #[error("{path} already holds a dataset")]
    AlreadyExists { path: PathBuf },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error at {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Depth in whole millimeters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthMillimeters {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthMillimeters {
    /// Rounds to the nearest millimeter; no return or out of range maps to 0.
    pub fn from_depth(d: &DepthImage) -> Self {
        let data = d.depth.iter().map(|&z| meters_to_mm(z)).collect();
        Self { width: d.width, height: d.height, data }
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }

    pub fn meters(&self, u: u32, v: u32) -> f64 {
        self.get(u, v) as f64 / 1000.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 2);
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
            return Err("missing depth magic".into());
        }
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let n = width as u64 * height as u64;
        if bytes.len() as u64 != 16 + 2 * n {
            return Err(format!("expected {} bytes for {width}x{height}, found {}", 16 + 2 * n, bytes.len()));
        }
        let data = bytes[16..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok(Self { width, height, data })
    }
}

pub fn meters_to_mm(z: f64) -> u16 {
    if !(z > 0.0) || !z.is_finite() {
        return 0;
    }
    let mm = (z * 1000.0).round();
    if mm > u16::MAX as f64 {
        0
    } else {
        mm as u16
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    let enc = PngEncoder::new_with_quality(Cursor::new(&mut out), image::codecs::png::CompressionType::Fast, image::codecs::png::FilterType::Sub);
    enc.write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, image::ImageError> {
    Ok(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8())
}

/// Class names are used as directory names.
pub fn validate_class_name(name: &str) -> Result<(), DatasetError> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name != "."
        && name != ".."
        && name.trim() == name
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ' '));
    if ok {
        Ok(())
    } else {
        Err(DatasetError::BadClassName(name.to_string()))
    }
}

// ---- file schemas ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsFile {
    pub fx_px: f64,
    pub fy_px: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl From<&CameraIntrinsics> for IntrinsicsFile {
    fn from(k: &CameraIntrinsics) -> Self {
        Self { fx_px: k.fx, fy_px: k.fy, cx_px: k.cx, cy_px: k.cy, width_px: k.width, height_px: k.height }
    }
}

impl IntrinsicsFile {
    pub fn to_intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics { fx: self.fx_px, fy: self.fy_px, cx: self.cx_px, cy: self.cy_px, width: self.width_px, height: self.height_px }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub from_frame: String,
    pub to_frame: String,
    pub translation_m: [f64; 3],
    pub rotation_wxyz: [f64; 4],
}

impl From<&Pose> for PoseFile {
    fn from(p: &Pose) -> Self {
        Self {
            from_frame: p.from_frame.to_string(),
            to_frame: p.to_frame.to_string(),
            translation_m: p.translation.to_array(),
            rotation_wxyz: p.rotation.to_array(),
        }
    }
}

impl PoseFile {
    pub fn quaternion_norm(&self) -> f64 {
        self.rotation_wxyz.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The stored rotation verbatim; the caller checks the norm.
    pub fn to_pose(&self) -> Pose {
        let [w, x, y, z] = self.rotation_wxyz;
        Pose {
            translation: Point3::from(self.translation_m),
            rotation: UnitQuaternion { w, x, y, z },
            from_frame: FrameId::new(&self.from_frame),
            to_frame: FrameId::new(&self.to_frame),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiPx {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<&Roi2D> for RoiPx {
    fn from(r: &Roi2D) -> Self {
        Self { x_min: r.x_min, y_min: r.y_min, x_max: r.x_max, y_max: r.y_max }
    }
}

impl From<RoiPx> for Roi2D {
    fn from(r: RoiPx) -> Self {
        Roi2D::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiFile {
    pub class: String,
    pub entity: u32,
    pub frame: usize,
    pub roi_px: RoiPx,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_roi_px: Option<RoiPx>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipEntry {
    pub frame: usize,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionFile {
    pub class: String,
    pub entity: u32,
    pub frames: Vec<usize>,
    pub skipped: Vec<SkipEntry>,
    pub progress: f64,
    pub cancelled: bool,
    pub object_frame: PoseFile,
    /// Segmented object cloud in the object frame.
    pub object_cloud_m: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_ids: Option<Vec<i32>>,
    pub plan: OrbitPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub class: String,
    pub entity: u32,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub sessions: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { format: FORMAT_NAME.into(), version: FORMAT_VERSION, sessions: Vec::new() }
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("dataset schema serializes");
    s.push(b'\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, frame: &str) -> Result<T, DatasetError> {
    let bytes = read_file(path, frame)?;
    serde_json::from_slice(&bytes).map_err(|e| DatasetError::Malformed { path: path.to_path_buf(), reason: e.to_string() })
}

fn read_file(path: &Path, frame: &str) -> Result<Vec<u8>, DatasetError> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(DatasetError::MissingFile { kind: file_kind(path), path: path.to_path_buf(), frame: frame.to_string() })
        }
        Err(source) => Err(DatasetError::Io { path: path.to_path_buf(), source }),
    }
}

fn file_kind(path: &Path) -> &'static str {
    match path.file_name().and_then(|n| n.to_str()) {
        Some("rgb.png") => "rgb",
        Some("depth.d16") => "depth",
        Some("roi.json") => "roi",
        Some("pose.json") => "pose",
        Some("session.json") => "session",
        Some("manifest.json") => "manifest",
        Some("intrinsics.json") => "intrinsics",
        _ => "dataset",
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn session_dir(root: &Path, class: &str, entity: u32) -> PathBuf {
    root.join(class).join(format!("{entity:03}"))
}

pub fn frame_dir(root: &Path, class: &str, entity: u32, index: usize) -> PathBuf {
    session_dir(root, class, entity).join(format!("{index:06}"))
}

fn frame_label(class: &str, entity: u32, index: usize) -> String {
    format!("{class}/{entity:03}/{index:06}")
}

// ---- writing ----

/// Appends sessions to a dataset directory. The manifest is rewritten after
/// every session, so the directory is a valid dataset between sessions.
pub struct DatasetWriter {
    root: PathBuf,
    intrinsics: CameraIntrinsics,
    manifest: Manifest,
}

impl DatasetWriter {
    /// Starts a new dataset; fails if `root` already has a manifest.
    pub fn create(root: &Path, intrinsics: CameraIntrinsics) -> Result<Self, DatasetError> {
        let manifest_path = root.join("manifest.json");
        if manifest_path.exists() {
            return Err(DatasetError::AlreadyExists { path: root.to_path_buf() });
        }
        fs::create_dir_all(root).map_err(io_err(root))?;
        let w = Self { root: root.to_path_buf(), intrinsics, manifest: Manifest::default() };
        w.write_index()?;
        Ok(w)
    }

    /// Opens an existing dataset for appending, or creates one.
    pub fn open_or_create(root: &Path, intrinsics: CameraIntrinsics) -> Result<Self, DatasetError> {
        if !root.join("manifest.json").exists() {
            return Self::create(root, intrinsics);
        }
        let ds = Dataset::open(root)?;
        if ds.intrinsics != intrinsics {
            return Err(DatasetError::IntrinsicsMismatch);
        }
        Ok(Self { root: root.to_path_buf(), intrinsics, manifest: ds.manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Smallest entity id not yet used for `class`.
    pub fn next_entity_id(&self, class: &str) -> u32 {
        self.manifest.sessions.iter().filter(|s| s.class == class).map(|s| s.entity + 1).max().unwrap_or(0)
    }

    /// A sink that writes frame images straight into the session directory.
    pub fn frame_sink(&self, class: &str, entity: u32) -> Result<StreamingSink, DatasetError> {
        validate_class_name(class)?;
        if self.has_session(class, entity) {
            return Err(DatasetError::DuplicateEntity { class: class.into(), entity });
        }
        Ok(StreamingSink { root: self.root.clone(), class: class.to_string(), entity, intrinsics: self.intrinsics })
    }

    fn has_session(&self, class: &str, entity: u32) -> bool {
        self.manifest.sessions.iter().any(|s| s.class == class && s.entity == entity)
    }

    pub fn add_session(&mut self, session: &RecordingSession) -> Result<(), DatasetError> {
        let class = &session.class_name;
        validate_class_name(class)?;
        if self.has_session(class, session.entity_id) {
            return Err(DatasetError::DuplicateEntity { class: class.clone(), entity: session.entity_id });
        }
        let mut seen = BTreeSet::new();
        for f in &session.frames {
            if !seen.insert(f.index) {
                return Err(DatasetError::DuplicateFrame { class: class.clone(), entity: session.entity_id, index: f.index });
            }
            if f.intrinsics != self.intrinsics {
                return Err(DatasetError::IntrinsicsMismatch);
            }
        }
        for f in &session.frames {
            self.write_frame(session, f)?;
        }
        let file = SessionFile {
            class: class.clone(),
            entity: session.entity_id,
            frames: session.frames.iter().map(|f| f.index).collect(),
            skipped: session.skipped.iter().map(|&(frame, reason)| SkipEntry { frame, reason }).collect(),
            progress: session.progress,
            cancelled: session.cancelled,
            object_frame: PoseFile::from(&session.object_frame),
            object_cloud_m: session.object_cloud.points.iter().map(|p| p.to_array()).collect(),
            object_ids: session.object_cloud.object_ids.clone(),
            plan: session.plan.clone(),
        };
        write_file(&session_dir(&self.root, class, session.entity_id).join("session.json"), &to_json(&file))?;
        self.manifest.sessions.push(ManifestEntry { class: class.clone(), entity: session.entity_id, frames: session.frames.len() });
        self.manifest.sessions.sort_by(|a, b| (&a.class, a.entity).cmp(&(&b.class, b.entity)));
        self.write_index()
    }

    fn write_frame(&self, session: &RecordingSession, f: &FrameRecord) -> Result<(), DatasetError> {
        let dir = frame_dir(&self.root, &session.class_name, session.entity_id, f.index);
        let rgb_path = dir.join("rgb.png");
        let depth_path = dir.join("depth.d16");
        match &f.images {
            FrameImages::Memory { rgb, depth } => {
                let png = encode_png(rgb).map_err(|source| DatasetError::Image { path: rgb_path.clone(), source })?;
                write_file(&rgb_path, &png)?;
                write_file(&depth_path, &depth.to_bytes())?;
            }
            FrameImages::Files { rgb, depth } => {
                copy_unless_same(rgb, &rgb_path, &frame_label(&session.class_name, session.entity_id, f.index))?;
                copy_unless_same(depth, &depth_path, &frame_label(&session.class_name, session.entity_id, f.index))?;
            }
            FrameImages::Discarded => return Err(DatasetError::MissingImages(f.index)),
        }
        let roi = RoiFile {
            class: session.class_name.clone(),
            entity: session.entity_id,
            frame: f.index,
            roi_px: RoiPx::from(&f.roi),
            gt_roi_px: f.gt_roi.as_ref().map(RoiPx::from),
        };
        write_file(&dir.join("roi.json"), &to_json(&roi))?;
        write_file(&dir.join("pose.json"), &to_json(&PoseFile::from(&f.camera_to_object)))
    }

    fn write_index(&self) -> Result<(), DatasetError> {
        write_file(&self.root.join("intrinsics.json"), &to_json(&IntrinsicsFile::from(&self.intrinsics)))?;
        write_file(&self.root.join("manifest.json"), &to_json(&self.manifest))
    }
}

fn copy_unless_same(src: &Path, dst: &Path, frame: &str) -> Result<(), DatasetError> {
    if let (Ok(a), Ok(b)) = (src.canonicalize(), dst.canonicalize()) {
        if a == b {
            return Ok(());
        }
    }
    let bytes = read_file(src, frame)?;
    write_file(dst, &bytes)
}

/// Streams frame images to disk as they are recorded.
pub struct StreamingSink {
    root: PathBuf,
    class: String,
    entity: u32,
    intrinsics: CameraIntrinsics,
}

impl FrameSink for StreamingSink {
    fn store(&mut self, record: &FrameRecord, rgb: &RgbImage, depth: &DepthImage) -> Result<FrameImages, AutolabelError> {
        if record.intrinsics != self.intrinsics {
            return Err(AutolabelError::Sink(DatasetError::IntrinsicsMismatch.to_string()));
        }
        let dir = frame_dir(&self.root, &self.class, self.entity, record.index);
        let rgb_path = dir.join("rgb.png");
        let depth_path = dir.join("depth.d16");
        let sink_err = |e: DatasetError| AutolabelError::Sink(e.to_string());
        let png = encode_png(rgb).map_err(|source| sink_err(DatasetError::Image { path: rgb_path.clone(), source }))?;
        write_file(&rgb_path, &png).map_err(sink_err)?;
        write_file(&depth_path, &DepthMillimeters::from_depth(depth).to_bytes()).map_err(sink_err)?;
        Ok(FrameImages::Files { rgb: rgb_path, depth: depth_path })
    }
}

/// Writes `sessions` as a new dataset at `root`.
pub fn write_dataset(sessions: &[RecordingSession], root: &Path, intrinsics: CameraIntrinsics) -> Result<Manifest, DatasetError> {
    if sessions.is_empty() {
        return Err(DatasetError::NoSessions);
    }
    let mut w = DatasetWriter::create(root, intrinsics)?;
    for s in sessions {
        w.add_session(s)?;
    }
    Ok(w.manifest)
}

pub fn read_dataset(root: &Path) -> Result<(Vec<RecordingSession>, Manifest), DatasetError> {
    let ds = Dataset::open(root)?;
    Ok((ds.read_sessions()?, ds.manifest))
}

// ---- reading ----

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let manifest: Manifest = read_json(&root.join("manifest.json"), "-")?;
        if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
            return Err(DatasetError::Malformed {
                path: root.join("manifest.json"),
                reason: format!("unsupported format {} v{}", manifest.format, manifest.version),
            });
        }
        let kpath = root.join("intrinsics.json");
        let k = read_json::<IntrinsicsFile>(&kpath, "-")?.to_intrinsics();
        k.validate().map_err(|e| DatasetError::Malformed { path: kpath, reason: e.to_string() })?;
        Ok(Self { root: root.to_path_buf(), intrinsics: k, manifest })
    }

    /// Reads every session; images are referenced by path, not loaded.
    pub fn read_sessions(&self) -> Result<Vec<RecordingSession>, DatasetError> {
        self.manifest.sessions.iter().map(|e| self.read_session(&e.class, e.entity)).collect()
    }

    pub fn read_session(&self, class: &str, entity: u32) -> Result<RecordingSession, DatasetError> {
        validate_class_name(class)?;
        let spath = session_dir(&self.root, class, entity).join("session.json");
        let sf: SessionFile = read_json(&spath, "-")?;
        let malformed = |reason: String| DatasetError::Malformed { path: spath.clone(), reason };
        if sf.class != class || sf.entity != entity {
            return Err(malformed(format!("session names {}/{}", sf.class, sf.entity)));
        }
        let object_frame = checked_pose(&sf.object_frame, &spath)?;
        let mut object_cloud = PointCloud::new(sf.object_cloud_m.iter().map(|&p| Point3::from(p)).collect(), object_frame.from_frame.clone());
        if let Some(ids) = sf.object_ids {
            if ids.len() != object_cloud.len() {
                return Err(malformed("object_ids length differs from object_cloud_m".into()));
            }
            object_cloud.object_ids = Some(ids);
        }
        let mut seen = BTreeSet::new();
        let mut frames = Vec::with_capacity(sf.frames.len());
        for &index in &sf.frames {
            if !seen.insert(index) {
                return Err(DatasetError::DuplicateFrame { class: class.into(), entity, index });
            }
            frames.push(self.read_frame(class, entity, index)?);
        }
        Ok(RecordingSession {
            class_name: sf.class,
            entity_id: sf.entity,
            object_cloud,
            object_frame,
            plan: sf.plan,
            frames,
            skipped: sf.skipped.into_iter().map(|s| (s.frame, s.reason)).collect(),
            progress: sf.progress,
            cancelled: sf.cancelled,
        })
    }

    pub fn read_frame(&self, class: &str, entity: u32, index: usize) -> Result<FrameRecord, DatasetError> {
        let dir = frame_dir(&self.root, class, entity, index);
        let label = frame_label(class, entity, index);
        let rpath = dir.join("roi.json");
        let roi_file: RoiFile = read_json(&rpath, &label)?;
        if roi_file.class != class || roi_file.entity != entity || roi_file.frame != index {
            return Err(DatasetError::Malformed { path: rpath, reason: "roi.json names a different frame".into() });
        }
        let roi = Roi2D::from(roi_file.roi_px);
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        if !roi.within(w, h) {
            return Err(DatasetError::RoiOutOfBounds { path: rpath, roi });
        }
        let gt_roi = roi_file.gt_roi_px.map(Roi2D::from);
        if let Some(g) = gt_roi {
            if !g.within(w, h) {
                return Err(DatasetError::RoiOutOfBounds { path: rpath, roi: g });
            }
        }
        let ppath = dir.join("pose.json");
        let camera_to_object = checked_pose(&read_json(&ppath, &label)?, &ppath)?;
        let rgb = dir.join("rgb.png");
        let depth = dir.join("depth.d16");
        for p in [&rgb, &depth] {
            if !p.is_file() {
                return Err(DatasetError::MissingFile { kind: file_kind(p), path: p.clone(), frame: label.clone() });
            }
        }
        Ok(FrameRecord {
            index,
            images: FrameImages::Files { rgb, depth },
            roi,
            gt_roi,
            camera_to_object,
            intrinsics: self.intrinsics,
            class_name: class.to_string(),
            entity_id: entity,
        })
    }

    pub fn load_rgb(&self, frame: &FrameRecord) -> Result<RgbImage, DatasetError> {
        let p = frame_dir(&self.root, &frame.class_name, frame.entity_id, frame.index).join("rgb.png");
        let bytes = read_file(&p, &frame_label(&frame.class_name, frame.entity_id, frame.index))?;
        decode_png(&bytes).map_err(|source| DatasetError::Image { path: p, source })
    }

    pub fn load_depth(&self, frame: &FrameRecord) -> Result<DepthMillimeters, DatasetError> {
        let p = frame_dir(&self.root, &frame.class_name, frame.entity_id, frame.index).join("depth.d16");
        let bytes = read_file(&p, &frame_label(&frame.class_name, frame.entity_id, frame.index))?;
        DepthMillimeters::from_bytes(&bytes).map_err(|reason| DatasetError::Malformed { path: p, reason })
    }

    /// Frame counts per class and entity, from the stored frames.
    pub fn stats(&self) -> Result<ViewpointStats, DatasetError> {
        let mut s = ViewpointStats::default();
        for e in &self.manifest.sessions {
            let sf: SessionFile = read_json(&session_dir(&self.root, &e.class, e.entity).join("session.json"), "-")?;
            s.add(&e.class, e.entity, sf.frames.len());
        }
        Ok(s)
    }
}

fn checked_pose(pf: &PoseFile, path: &Path) -> Result<Pose, DatasetError> {
    let norm = pf.quaternion_norm();
    if !((norm - 1.0).abs() <= QUATERNION_NORM_TOL) {
        return Err(DatasetError::NonUnitQuaternion { path: path.to_path_buf(), norm });
    }
    if !pf.translation_m.iter().all(|v| v.is_finite()) {
        return Err(DatasetError::Malformed { path: path.to_path_buf(), reason: "non-finite translation".into() });
    }
    Ok(pf.to_pose())
}

// ---- validation ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub frames_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: &Path, message: impl Into<String>) {
        self.violations.push(Violation { path: path.to_path_buf(), message: message.into() });
    }
}

/// Checks every file of the dataset and collects all violations.
pub fn validate(root: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let ds = match Dataset::open(root) {
        Ok(ds) => ds,
        Err(e) => {
            report.push(root, e.to_string());
            return report;
        }
    };
    let mut seen_sessions = BTreeSet::new();
    for e in &ds.manifest.sessions {
        if !seen_sessions.insert((e.class.clone(), e.entity)) {
            report.push(&root.join("manifest.json"), format!("duplicate session {}/{}", e.class, e.entity));
            continue;
        }
        if let Err(err) = validate_class_name(&e.class) {
            report.push(&root.join("manifest.json"), err.to_string());
            continue;
        }
        let sdir = session_dir(root, &e.class, e.entity);
        let spath = sdir.join("session.json");
        let sf: SessionFile = match read_json(&spath, "-") {
            Ok(s) => s,
            Err(err) => {
                report.push(&spath, err.to_string());
                continue;
            }
        };
        if let Err(err) = checked_pose(&sf.object_frame, &spath) {
            report.push(&spath, err.to_string());
        }
        if sf.frames.len() != e.frames {
            report.push(&spath, format!("manifest lists {} frames, session lists {}", e.frames, sf.frames.len()));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &sf.frames {
            *counts.entry(i).or_default() += 1;
        }
        for (&i, &n) in counts.iter().filter(|(_, &n)| n > 1) {
            report.push(&spath, format!("frame index {i} listed {n} times"));
        }
        if let Ok(rd) = fs::read_dir(&sdir) {
            let mut extra: Vec<String> = rd
                .filter_map(|d| d.ok())
                .filter(|d| d.path().is_dir())
                .map(|d| d.file_name().to_string_lossy().into_owned())
                .filter(|name| name.parse::<usize>().map_or(true, |i| !counts.contains_key(&i) || format!("{i:06}") != *name))
                .collect();
            extra.sort();
            for name in extra {
                report.push(&sdir.join(name), "frame directory not listed in session.json");
            }
        }
        for &index in counts.keys() {
            report.frames_checked += 1;
            validate_frame(&ds, &e.class, e.entity, index, &mut report);
        }
    }
    report
}

fn validate_frame(ds: &Dataset, class: &str, entity: u32, index: usize, report: &mut ValidationReport) {
    let frame = match ds.read_frame(class, entity, index) {
        Ok(f) => f,
        Err(err) => {
            report.push(&frame_dir(&ds.root, class, entity, index), err.to_string());
            return;
        }
    };
    if !frame.roi.is_valid() || frame.roi.area() <= 0.0 {
        report.push(&frame_dir(&ds.root, class, entity, index).join("roi.json"), "degenerate ROI");
    }
    let (w, h) = (ds.intrinsics.width, ds.intrinsics.height);
    match ds.load_rgb(&frame) {
        Ok(img) if img.dimensions() != (w, h) => report
            .push(&frame_dir(&ds.root, class, entity, index).join("rgb.png"), format!("image is {}x{}, intrinsics say {w}x{h}", img.width(), img.height())),
        Ok(_) => {}
        Err(err) => report.push(&frame_dir(&ds.root, class, entity, index).join("rgb.png"), err.to_string()),
    }
    match ds.load_depth(&frame) {
        Ok(d) if (d.width, d.height) != (w, h) => {
            report.push(&frame_dir(&ds.root, class, entity, index).join("depth.d16"), format!("depth is {}x{}, intrinsics say {w}x{h}", d.width, d.height))
        }
        Ok(_) => {}
        Err(err) => report.push(&frame_dir(&ds.root, class, entity, index).join("depth.d16"), err.to_string()),
    }
}

/// Whether two sessions agree on everything stored in a dataset.
pub fn same_content(a: &RecordingSession, b: &RecordingSession) -> bool {
    let strip = |s: &RecordingSession| {
        let mut s = s.clone();
        for f in &mut s.frames {
            f.images = FrameImages::Discarded;
        }
        s
    };
    strip(a) == strip(b)
}
