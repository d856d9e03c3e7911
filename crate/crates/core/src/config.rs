//! TOML configuration for the whole teaching pipeline. Every field has a
//! default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{look_at, CameraIntrinsics, GeometryError, Point3, Pose};
use crate::planner::{WorkspaceModel, DEFAULT_ELEVATION, DEFAULT_SAMPLES};
use crate::segmentation::SegmentationParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub samples: usize,
    pub elevation_rad: f64,
    /// Lower bound of the orbit radius, meters.
    pub safety_min_m: f64,
    pub workspace: WorkspaceModel,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { samples: DEFAULT_SAMPLES, elevation_rad: DEFAULT_ELEVATION, safety_min_m: 0.2, workspace: WorkspaceModel::default() }
    }
}

/// Fixed depth sensor that observes the table for segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub eye_m: [f64; 3],
    pub target_m: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    pub noise_sigma_m: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { eye_m: [0.0, -0.75, 0.85], target_m: [0.0, 0.0, 0.0], intrinsics: CameraIntrinsics::scene_default(), noise_sigma_m: 0.002 }
    }
}

impl SensorConfig {
    /// Camera to world.
    pub fn pose(&self) -> Result<Pose, GeometryError> {
        look_at(Point3::from(self.eye_m), Point3::from(self.target_m), Point3::new(0.0, 0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WristConfig {
    pub intrinsics: CameraIntrinsics,
    pub noise_sigma_m: f64,
    pub min_roi_area_px: f64,
}

impl Default for WristConfig {
    fn default() -> Self {
        Self { intrinsics: CameraIntrinsics::wrist_default(), noise_sigma_m: 0.002, min_roi_area_px: crate::autolabel::DEFAULT_MIN_AREA_PX }
    }
}

/// Camera whose view is sent to interactive clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectatorConfig {
    pub eye_m: [f64; 3],
    pub target_m: [f64; 3],
    pub intrinsics: CameraIntrinsics,
}

impl Default for SpectatorConfig {
    fn default() -> Self {
        let s = SensorConfig::default();
        Self { eye_m: s.eye_m, target_m: s.target_m, intrinsics: s.intrinsics }
    }
}

impl SpectatorConfig {
    /// Camera to world.
    pub fn pose(&self) -> Result<Pose, GeometryError> {
        look_at(Point3::from(self.eye_m), Point3::from(self.target_m), Point3::new(0.0, 0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub segmentation: SegmentationParams,
    pub planner: PlannerConfig,
    pub sensor: SensorConfig,
    pub wrist: WristConfig,
    pub spectator: SpectatorConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.segmentation.validate().map_err(|e| inv(&e))?;
        self.planner.workspace.validate().map_err(|e| inv(&e))?;
        self.sensor.intrinsics.validate().map_err(|e| inv(&e))?;
        self.wrist.intrinsics.validate().map_err(|e| inv(&e))?;
        self.sensor.pose().map_err(|e| inv(&e))?;
        self.spectator.intrinsics.validate().map_err(|e| inv(&e))?;
        self.spectator.pose().map_err(|e| inv(&e))?;
        if self.planner.samples == 0 {
            return Err(ConfigError::Invalid("planner.samples must be positive".into()));
        }
        if !(self.sensor.noise_sigma_m >= 0.0 && self.wrist.noise_sigma_m >= 0.0) {
            return Err(ConfigError::Invalid("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn roundtrip_and_override() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let c = Config::from_toml_str("[planner]\nsamples = 36\n[segmentation]\nvoxel_leaf = 0.01\n").unwrap();
        assert_eq!(c.planner.samples, 36);
        assert_eq!(c.segmentation.voxel_leaf, 0.01);
        assert!(Config::from_toml_str("[planner]\nsamples = 0\n").is_err());
        assert!(Config::from_toml_str("[planner]\nbogus = 1\n").is_err());
    }
}
