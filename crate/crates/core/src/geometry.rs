//! Rigid-body pose algebra and the operator-to-robot teleoperation mappings.
//!
//! Poses are plain SE(3) transforms (rotation matrix + translation). The
//! teleoperation mappings turn tracked operator wrist poses into an
//! end-effector target, planar base velocities and a gripper command.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Mul;
use thiserror::Error;

/// Tolerance for `RᵀR = I` and `det R = 1` when validating inputs.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (|RᵀR - I| = {orthogonality:e}, det = {determinant})")]
    InvalidRotation { orthogonality: f64, determinant: f64 },
    #[error("non-finite value in pose")]
    NonFinite,
    #[error("quaternion norm {0:e} is too small to normalize")]
    DegenerateQuaternion(f64),
    #[error("invalid teleoperation config: {0}")]
    InvalidConfig(String),
}

/// A rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_rotation(*Rotation3::from_axis_angle(&Vector3::x_axis(), angle).matrix())
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_rotation(*Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix())
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_rotation(*Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix())
    }

    /// Planar pose `(x, y, yaw)` lifted to SE(3) at height `z`.
    pub fn from_planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let mut pose = Self::rot_z(yaw);
        pose.translation = Vector3::new(x, y, z);
        pose
    }

    /// Unit quaternion `(w, x, y, z)` plus translation. The quaternion is
    /// normalized; near-zero quaternions are rejected.
    pub fn from_quaternion(q: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        if q.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if norm < 1e-6 {
            return Err(GeometryError::DegenerateQuaternion(norm));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Self {
            rotation: *unit.to_rotation_matrix().matrix(),
            translation: Vector3::from(translation),
        })
    }

    /// Quaternion `(w, x, y, z)` of the rotation part.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let orthogonality = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let determinant = self.rotation.determinant();
        if orthogonality > ROTATION_TOLERANCE || (determinant - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation {
                orthogonality,
                determinant,
            });
        }
        Ok(())
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Heading of the rotation's x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Angle of the relative rotation between two poses.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        let relative = self.rotation.transpose() * other.rotation;
        let cos = ((relative.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        cos.acos()
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Rotation error `other ⊖ self` as a world-frame rotation vector.
    pub fn rotation_error_to(&self, target: &Pose) -> Vector3<f64> {
        let relative = target.rotation * self.rotation.transpose();
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(relative)).scaled_axis()
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.rotation - other.rotation).amax() <= tol
            && (self.translation - other.translation).amax() <= tol
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;

    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = angle % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeleopConfig {
    /// Scale applied to operator wrist translations.
    pub translation_scale: f64,
    /// Left-wrist joystick deadzone radius (m).
    pub deadzone: f64,
    /// Left-wrist yaw deadzone (rad).
    pub yaw_deadzone: f64,
    pub base_linear_gain: f64,
    pub base_angular_gain: f64,
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            translation_scale: 1.2,
            deadzone: 0.05,
            yaw_deadzone: 0.1,
            base_linear_gain: 1.0,
            base_angular_gain: 1.0,
            max_linear_speed: 0.5,
            max_angular_speed: 1.0,
        }
    }
}

impl TeleopConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = [
            ("translation_scale", self.translation_scale),
            ("base_linear_gain", self.base_linear_gain),
            ("base_angular_gain", self.base_angular_gain),
            ("max_linear_speed", self.max_linear_speed),
            ("max_angular_speed", self.max_angular_speed),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(GeometryError::InvalidConfig(format!("{name} must be > 0, got {value}")));
            }
        }
        for (name, value) in [("deadzone", self.deadzone), ("yaw_deadzone", self.yaw_deadzone)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(GeometryError::InvalidConfig(format!("{name} must be >= 0, got {value}")));
            }
        }
        Ok(())
    }
}

/// Planar base velocity command, expressed in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseCommand {
    pub linear_velocity: Vector2<f64>,
    pub angular_velocity: f64,
}

impl BaseCommand {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.linear_velocity == Vector2::zeros() && self.angular_velocity == 0.0
    }

    /// Scales the linear part down to `max_linear` and clips the angular part.
    pub fn clamped(self, max_linear: f64, max_angular: f64) -> Self {
        let speed = self.linear_velocity.norm();
        let linear_velocity = if speed > max_linear {
            self.linear_velocity * (max_linear / speed)
        } else {
            self.linear_velocity
        };
        Self {
            linear_velocity,
            angular_velocity: self.angular_velocity.clamp(-max_angular, max_angular),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GripperCommand {
    pub closed: bool,
}

impl GripperCommand {
    pub const OPEN: GripperCommand = GripperCommand { closed: false };
    pub const CLOSED: GripperCommand = GripperCommand { closed: true };
}

/// Maps the operator's right wrist pose (relative to its initial pose) to
/// the relative end-effector pose: rotation copied, translation scaled.
pub fn teleop_ee_map(right_wrist: &Pose, cfg: &TeleopConfig) -> Result<Pose, GeometryError> {
    right_wrist.validate()?;
    cfg.validate()?;
    Ok(Pose {
        rotation: right_wrist.rotation,
        translation: right_wrist.translation * cfg.translation_scale,
    })
}

/// Deadzone shaping shared by the linear and yaw channels: zero inside the
/// zone, then linear in the excess so the output is continuous at the edge.
fn shape_with_deadzone(magnitude: f64, deadzone: f64, gain: f64) -> f64 {
    if magnitude < deadzone {
        0.0
    } else {
        gain * (magnitude - deadzone)
    }
}

/// Left-wrist virtual joystick: active only while pinching.
pub fn teleop_base_map(left_wrist: &Pose, pinching: bool, cfg: &TeleopConfig) -> BaseCommand {
    if !pinching {
        return BaseCommand::zero();
    }
    let displacement = Vector2::new(left_wrist.translation.x, left_wrist.translation.y);
    let distance = displacement.norm();
    let speed = shape_with_deadzone(distance, cfg.deadzone, cfg.base_linear_gain);
    let linear_velocity = if speed > 0.0 {
        displacement * (speed / distance)
    } else {
        Vector2::zeros()
    };

    let yaw = left_wrist.yaw();
    let angular_velocity =
        shape_with_deadzone(yaw.abs(), cfg.yaw_deadzone, cfg.base_angular_gain) * yaw.signum();

    BaseCommand {
        linear_velocity,
        angular_velocity,
    }
    .clamped(cfg.max_linear_speed, cfg.max_angular_speed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinchThresholds {
    pub close: f64,
    pub open: f64,
}

impl Default for PinchThresholds {
    fn default() -> Self {
        Self {
            close: 0.02,
            open: 0.05,
        }
    }
}

/// Thumb–index pinch with hysteresis; between the thresholds the previous
/// command is held.
pub fn pinch_to_gripper(
    thumb_tip: &Vector3<f64>,
    index_tip: &Vector3<f64>,
    thresholds: &PinchThresholds,
    previous: GripperCommand,
) -> GripperCommand {
    pinch_distance_to_gripper((thumb_tip - index_tip).norm(), thresholds, previous)
}

pub fn pinch_distance_to_gripper(
    distance: f64,
    thresholds: &PinchThresholds,
    previous: GripperCommand,
) -> GripperCommand {
    if distance < thresholds.close {
        GripperCommand::CLOSED
    } else if distance > thresholds.open {
        GripperCommand::OPEN
    } else {
        previous
    }
}
