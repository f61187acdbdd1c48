//! Robot configuration: body, arm, gripper, cameras and controller limits.
//!
//! Loaded from a versioned TOML file. Every field has a default, so a file
//! only needs to list what it overrides:
//!
//! ```toml
//! schema_version = 1
//! dt = 0.02
//!
//! [body]
//! nominal_height = 0.55   # m, standing height of the body frame
//! min_height = 0.30       # m
//! max_height = 0.55       # m
//! max_pitch = 0.45        # rad, |pitch| bound (positive = nose down)
//! mount_offset = [0.20, 0.0, 0.12]  # arm mount in body frame, m
//! height_rate = 0.25      # m/s, whole-body coordination rate
//! pitch_rate = 0.8        # rad/s
//!
//! [arm]
//! shoulder_height = 0.10  # mount → shoulder along mount z
//! upper_arm = 0.35        # shoulder → elbow (along z at zero)
//! forearm = 0.30          # elbow → wrist centre (along x at zero)
//! tool_length = 0.18      # wrist centre → tool centre point
//! joint_limits = [[-2.6, 2.6], [-1.2, 2.2], [-1.45, 1.2], [-2.2, 2.2], [-1.5, 1.5], [-2.8, 2.8]]
//! max_joint_speed = 1.5   # rad/s
//! damping = 0.05          # damped-least-squares λ
//! orientation_weight = 0.5
//!
//! [reach]
//! min_radius = 0.16       # shoulder → wrist-centre annulus, m
//! max_radius = 0.62
//! coordination_margin = 0.04
//!
//! [gripper]
//! rate = 3.0              # open fraction per second
//! grasp_radius = 0.04     # m
//!
//! [base]
//! max_linear_speed = 0.5
//! max_angular_speed = 1.0
//! yaw_assist_rate = 0.8   # rad/s
//! yaw_assist_threshold = 1.5  # rad, arm azimuth that triggers base rotation
//!
//! [convergence]
//! position = 0.005        # m
//! orientation = 0.05      # rad
//!
//! [cameras]
//! kernel_sigma = 1.2      # cells
//! [cameras.head]
//! offset = [0.30, 0.0, 0.05]   # in body frame
//! pitch = 0.5                   # rad, down tilt
//! width = 32
//! height = 32
//! fov_deg = 100.0
//! [cameras.wrist]
//! offset = [-0.10, 0.0, 0.0]   # in tool frame (tool x = optical axis)
//! pitch = 0.0
//! width = 32
//! height = 32
//! fov_deg = 100.0
//! ```

use crate::geometry::Pose;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ROBOT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("could not parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BodyConfig {
    pub nominal_height: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub max_pitch: f64,
    pub mount_offset: [f64; 3],
    pub height_rate: f64,
    pub pitch_rate: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            nominal_height: 0.55,
            min_height: 0.30,
            max_height: 0.55,
            max_pitch: 0.45,
            mount_offset: [0.20, 0.0, 0.12],
            height_rate: 0.25,
            pitch_rate: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmConfig {
    pub shoulder_height: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub tool_length: f64,
    pub joint_limits: [[f64; 2]; 6],
    pub max_joint_speed: f64,
    pub damping: f64,
    pub orientation_weight: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            shoulder_height: 0.10,
            upper_arm: 0.35,
            forearm: 0.30,
            tool_length: 0.18,
            joint_limits: [
                [-2.6, 2.6],
                [-1.2, 2.2],
                [-1.45, 1.2],
                [-2.2, 2.2],
                [-1.5, 1.5],
                [-2.8, 2.8],
            ],
            max_joint_speed: 1.5,
            damping: 0.05,
            orientation_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachConfig {
    pub min_radius: f64,
    pub max_radius: f64,
    pub coordination_margin: f64,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            min_radius: 0.16,
            max_radius: 0.62,
            coordination_margin: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GripperConfig {
    pub rate: f64,
    pub grasp_radius: f64,
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self {
            rate: 3.0,
            grasp_radius: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
    pub yaw_assist_rate: f64,
    pub yaw_assist_threshold: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            max_linear_speed: 0.5,
            max_angular_speed: 1.0,
            yaw_assist_rate: 0.8,
            yaw_assist_threshold: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub position: f64,
    pub orientation: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            position: 0.005,
            orientation: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub offset: [f64; 3],
    pub pitch: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
}

impl CameraConfig {
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// Mount transform relative to the parent frame (body or tool).
    pub fn mount(&self) -> Pose {
        let mut pose = Pose::rot_y(self.pitch);
        pose.translation = Vector3::from(self.offset);
        pose
    }
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            offset: [0.30, 0.0, 0.05],
            pitch: 0.5,
            width: 32,
            height: 32,
            fov_deg: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamerasConfig {
    pub kernel_sigma: f64,
    pub head: CameraConfig,
    pub wrist: CameraConfig,
}

impl Default for CamerasConfig {
    fn default() -> Self {
        Self {
            kernel_sigma: 1.2,
            head: CameraConfig::default(),
            wrist: CameraConfig {
                offset: [-0.10, 0.0, 0.0],
                pitch: 0.0,
                ..CameraConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotConfig {
    pub schema_version: u32,
    pub dt: f64,
    pub body: BodyConfig,
    pub arm: ArmConfig,
    pub reach: ReachConfig,
    pub gripper: GripperConfig,
    pub base: BaseConfig,
    pub convergence: ConvergenceConfig,
    pub cameras: CamerasConfig,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            schema_version: ROBOT_SCHEMA_VERSION,
            dt: 0.02,
            body: BodyConfig::default(),
            arm: ArmConfig::default(),
            reach: ReachConfig::default(),
            gripper: GripperConfig::default(),
            base: BaseConfig::default(),
            convergence: ConvergenceConfig::default(),
            cameras: CamerasConfig::default(),
        }
    }
}

impl RobotConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg: Self = read_toml(path.as_ref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: "<inline>".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != ROBOT_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                expected: ROBOT_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return invalid(format!("dt must lie in (0, 0.1], got {}", self.dt));
        }
        let b = &self.body;
        if !(b.min_height <= b.nominal_height && b.nominal_height <= b.max_height && b.min_height > 0.0) {
            return invalid("body heights must satisfy 0 < min <= nominal <= max".into());
        }
        if b.max_pitch < 0.0 || b.height_rate <= 0.0 || b.pitch_rate <= 0.0 {
            return invalid("body pitch bound and rates must be positive".into());
        }
        for (i, [lo, hi]) in self.arm.joint_limits.iter().enumerate() {
            if !(lo < hi) || *lo > 0.0 || *hi < 0.0 {
                return invalid(format!("joint {i} limits must bracket zero, got [{lo}, {hi}]"));
            }
        }
        if self.arm.max_joint_speed <= 0.0 || self.arm.damping < 0.0 {
            return invalid("arm speed must be > 0 and damping >= 0".into());
        }
        if !(0.0 <= self.reach.min_radius && self.reach.min_radius < self.reach.max_radius) {
            return invalid("reach radii must satisfy 0 <= min < max".into());
        }
        if self.gripper.rate <= 0.0 || self.gripper.grasp_radius <= 0.0 {
            return invalid("gripper rate and grasp radius must be > 0".into());
        }
        if self.base.max_linear_speed <= 0.0 || self.base.max_angular_speed <= 0.0 {
            return invalid("base speed limits must be > 0".into());
        }
        for cam in [&self.cameras.head, &self.cameras.wrist] {
            if cam.width == 0 || cam.height == 0 || !(cam.fov_deg > 0.0 && cam.fov_deg < 180.0) {
                return invalid("camera resolution must be non-zero and fov in (0, 180)".into());
            }
        }
        if self.cameras.kernel_sigma <= 0.0 {
            return invalid("kernel_sigma must be > 0".into());
        }
        Ok(())
    }

    pub fn clamp_joint(&self, index: usize, value: f64) -> f64 {
        let [lo, hi] = self.arm.joint_limits[index];
        value.clamp(lo, hi)
    }
}
