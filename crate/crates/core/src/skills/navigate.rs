//! PD waypoint follower for the legged base.

use crate::geometry::{wrap_angle, BaseCommand};
use crate::simworld::PlanarPose;
use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdGains {
    pub kp_linear: f64,
    pub kd_linear: f64,
    pub kp_angular: f64,
    pub kd_angular: f64,
    pub max_linear: f64,
    pub max_angular: f64,
    pub position_tolerance: f64,
    pub yaw_tolerance: f64,
    /// Beyond this distance the heading setpoint is the bearing to the
    /// waypoint; inside it, the waypoint yaw.
    pub bearing_distance: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp_linear: 1.2,
            kd_linear: 0.05,
            kp_angular: 2.0,
            kd_angular: 0.05,
            max_linear: 0.5,
            max_angular: 1.0,
            position_tolerance: 0.05,
            yaw_tolerance: 0.1,
            bearing_distance: 0.3,
        }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            self.kp_linear,
            self.kp_angular,
            self.max_linear,
            self.max_angular,
            self.position_tolerance,
            self.yaw_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err("PD gains, limits and tolerances must be positive".into());
        }
        if self.kd_linear < 0.0 || self.kd_angular < 0.0 || self.bearing_distance < 0.0 {
            return Err("derivative gains and bearing distance must be non-negative".into());
        }
        Ok(())
    }
}

/// Errors from the previous control tick, for the derivative terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PdState {
    pub position: Vector2<f64>,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavOutput {
    pub command: BaseCommand,
    pub done: bool,
    pub state: PdState,
}

/// One PD tick. The translational error is taken in the base frame so the
/// holonomic base closes it directly; heading tracks the bearing while far
/// and the waypoint yaw near the goal.
pub fn navigate_waypoint(
    current: &PlanarPose,
    target: &PlanarPose,
    gains: &PdGains,
    previous: Option<PdState>,
    dt: f64,
) -> NavOutput {
    let world_err = Vector2::new(target.x - current.x, target.y - current.y);
    let distance = world_err.norm();
    let yaw_err = wrap_angle(target.yaw - current.yaw);
    let position = Rotation2::new(-current.yaw) * world_err;
    if distance < gains.position_tolerance && yaw_err.abs() < gains.yaw_tolerance {
        return NavOutput {
            command: BaseCommand::zero(),
            done: true,
            state: PdState { position, heading: yaw_err },
        };
    }
    let heading = if distance > gains.bearing_distance {
        wrap_angle(world_err.y.atan2(world_err.x) - current.yaw)
    } else {
        yaw_err
    };
    let (d_pos, d_head) = match previous {
        Some(p) if dt > 0.0 => ((position - p.position) / dt, wrap_angle(heading - p.heading) / dt),
        _ => (Vector2::zeros(), 0.0),
    };
    let command = BaseCommand {
        linear_velocity: gains.kp_linear * position + gains.kd_linear * d_pos,
        angular_velocity: gains.kp_angular * heading + gains.kd_angular * d_head,
    }
    .clamped(gains.max_linear, gains.max_angular);
    NavOutput {
        command,
        done: false,
        state: PdState { position, heading },
    }
}
