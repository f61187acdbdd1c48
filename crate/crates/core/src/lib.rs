//! Loco-manipulation stack for a legged robot with an arm.
//!
//! * [`geometry`]: SE(3) poses and teleoperation mappings
//! * [`simworld`]: kinematic simulator, whole-body coordination, rendering
//! * [`attention`]: text-conditioned attention over dense feature maps
//! * [`skills`]: skill library, imitation policy, termination detection
//! * [`demos`]: demonstration recording and the episode file format
//! * [`planner`]: hierarchical scene graph and coarse-to-fine planning
//! * [`llm`]: evaluator backends (keyword mock, fixtures, HTTP)
//! * [`harness`]: scenarios, perturbations and evaluation reports

pub mod attention;
pub mod demos;
pub mod geometry;
pub mod harness;
pub mod llm;
pub mod planner;
pub mod simworld;
pub mod skills;

pub use geometry::{BaseCommand, GripperCommand, Pose, TeleopConfig};
pub use simworld::{ControlMode, RobotConfig, Simulator, WholeBodyCommand, WorldState};
