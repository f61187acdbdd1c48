//! Deterministic kinematic simulation of a legged base with a pitching
//! body, a 6-DOF arm and a parallel gripper, plus the objects it
//! manipulates.
//!
//! The low-level whole-body controller is modelled analytically: the arm
//! follows end-effector targets by damped least squares, and in
//! [`ControlMode::WholeBody`] the body height, pitch and base heading are
//! recruited whenever a target falls outside what the arm alone can reach.

pub mod config;
pub mod kinematics;
pub mod render;
pub mod world;

pub use config::{ConfigError, RobotConfig};
pub use kinematics::{
    arm_jacobian, arm_tcp, command_frame, forward_kinematics, mount_frame, reachable, top_down, BodyPosture,
    ControlMode, PlanarPose, RobotState, Tracking,
};
pub use render::{render_camera, render_observation, CameraFrame, CameraId, Observation, Proprioception};
pub use world::{
    BodyCommand, Button, Receptacle, Simulator, WholeBodyCommand, WorldConfig, WorldObject, WorldState,
};
