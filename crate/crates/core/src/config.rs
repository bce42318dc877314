//! Scenario configuration: the single JSON document that pins every
//! parameter affecting a run. Unknown keys are rejected so typos fail loudly,
//! and the config hash (plus the seed) names the run directory.

use crate::backend::GncConfig;
use crate::comms::LinkModelParams;
use crate::frontend::RegistrationConfig;
use crate::world::{RobotProfile, SensorConfig, TrajectoryConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    /// Descriptor rings and sectors.
    pub nr: usize,
    pub ns: usize,
    /// Descriptor radial window, meters.
    pub descriptor_r_max: f64,
    /// Place-recognition similarity threshold.
    pub tau_sim: f64,
    /// Registration inlier gate.
    pub min_inliers: usize,
    /// Per-round candidate budget; null means unlimited.
    pub budget: Option<usize>,
    /// Descriptor sync cadence, seconds: new descriptors are batched and
    /// offered to peers at this interval.
    pub sync_period_sec: u64,
    pub registration: RegistrationConfig,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            nr: 20,
            ns: 60,
            descriptor_r_max: 50.0,
            tau_sim: 0.7,
            min_inliers: 80,
            budget: None,
            sync_period_sec: 6,
            registration: RegistrationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub gnc: GncConfig,
    /// Periodic optimization trigger, seconds (also runs on rendezvous).
    pub trigger_period_sec: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            gnc: GncConfig::default(),
            trigger_period_sec: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub world: WorldConfig,
    /// Optional world fixture; when set, the world is loaded from this JSON
    /// file instead of being generated.
    pub world_file: Option<PathBuf>,
    pub robots: Vec<RobotProfile>,
    pub sensor: SensorConfig,
    pub trajectory: TrajectoryConfig,
    pub link_model: LinkModelParams,
    /// Optional 1 Hz link trace; when set, replaces the distance model.
    pub trace_file: Option<PathBuf>,
    pub frontend: FrontendConfig,
    pub backend: BackendConfig,
    /// Optional GPS emulation noise (sigma, meters) on the 1 Hz reference;
    /// null uses ground truth directly.
    pub gps_sigma: Option<f64>,
    /// New keyframe after this much travel, meters.
    pub keyframe_translation_m: f64,
    /// ... or this much rotation, radians.
    pub keyframe_rotation_rad: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            world_file: None,
            robots: default_robots(),
            sensor: SensorConfig::default(),
            trajectory: TrajectoryConfig::default(),
            link_model: LinkModelParams::default(),
            trace_file: None,
            frontend: FrontendConfig::default(),
            backend: BackendConfig::default(),
            gps_sigma: Some(0.2),
            keyframe_translation_m: 1.0,
            keyframe_rotation_rad: 30f64.to_radians(),
        }
    }
}

/// The default three-robot team. Robot 1 is the wheeled platform; robots 2
/// and 3 are tracked and carry larger odometry noise and vibration scaling.
pub fn default_robots() -> Vec<RobotProfile> {
    vec![
        RobotProfile {
            id: 1,
            odom_trans_sigma: 0.02,
            odom_rot_sigma: 0.02,
            scan_range_sigma: 0.015,
            beam_dropout_prob: 0.02,
            vibration_scale: 1.0,
        },
        RobotProfile {
            id: 2,
            odom_trans_sigma: 0.045,
            odom_rot_sigma: 0.045,
            scan_range_sigma: 0.015,
            beam_dropout_prob: 0.02,
            vibration_scale: 2.0,
        },
        RobotProfile {
            id: 3,
            odom_trans_sigma: 0.032,
            odom_rot_sigma: 0.032,
            scan_range_sigma: 0.015,
            beam_dropout_prob: 0.02,
            vibration_scale: 1.6,
        },
    ]
}

impl ScenarioConfig {
    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(json).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::from_json(&text)?;
        // Relative fixture paths resolve against the config file.
        if let Some(dir) = path.parent() {
            if let Some(w) = &cfg.world_file {
                if w.is_relative() {
                    cfg.world_file = Some(dir.join(w));
                }
            }
            if let Some(t) = &cfg.trace_file {
                if t.is_relative() {
                    cfg.trace_file = Some(dir.join(t));
                }
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.robots.is_empty() {
            return Err(ConfigError::Invalid("robots: need at least one".into()));
        }
        let mut ids: Vec<u32> = self.robots.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.robots.len() {
            return Err(ConfigError::Invalid("robots: ids must be unique".into()));
        }
        for r in &self.robots {
            r.validate().map_err(ConfigError::Invalid)?;
        }
        if !(0.0..=1.0).contains(&self.frontend.tau_sim) {
            return Err(ConfigError::Invalid("frontend.tau_sim: must be in [0,1]".into()));
        }
        if self.trajectory.tick_sec <= 0.0 || self.trajectory.duration_sec <= 0.0 {
            return Err(ConfigError::Invalid(
                "trajectory.tick_sec and trajectory.duration_sec must be positive".into(),
            ));
        }
        if self.world.width <= 0.0 || self.world.height <= 0.0 {
            return Err(ConfigError::Invalid("world: bounds must have positive area".into()));
        }
        if self.backend.gnc.c <= 0.0 || self.backend.gnc.mu_update_factor <= 1.0 {
            return Err(ConfigError::Invalid(
                "backend.gnc: c must be > 0 and mu_update_factor > 1".into(),
            ));
        }
        Ok(())
    }

    fn check_files(&self) -> Result<(), ConfigError> {
        if let Some(p) = &self.world_file {
            if !p.exists() {
                return Err(ConfigError::Invalid(format!(
                    "world_file: {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(p) = &self.trace_file {
            if !p.exists() {
                return Err(ConfigError::Invalid(format!(
                    "trace_file: {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Hash over every parameter that affects results, including the content
    /// of referenced fixture files.
    pub fn result_hash(&self, seed: u64) -> String {
        let mut hasher = Sha256::new();
        let canonical = serde_json::to_string(self).expect("config serializes");
        hasher.update(canonical.as_bytes());
        hasher.update(seed.to_le_bytes());
        for file in [&self.world_file, &self.trace_file].into_iter().flatten() {
            if let Ok(bytes) = std::fs::read(file) {
                hasher.update(&bytes);
            }
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn robot_ids(&self) -> Vec<u32> {
        self.robots.iter().map(|r| r.id).collect()
    }
}
