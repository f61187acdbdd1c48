use super::config::{read_toml, ConfigError, RobotConfig};
use super::kinematics::{
    command_frame, coordination_posture, desired_yaw_assist, dls_step, forward_kinematics, mount_frame,
    wrist_centre, ControlMode, PlanarPose, RobotState, Tracking,
};
use crate::geometry::{BaseCommand, GripperCommand, Pose};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const WORLD_SCHEMA_VERSION: u32 = 1;

/// Gripper open fraction at which fingers make or break contact.
const CONTACT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receptacle {
    /// Footprint radius around the pose origin (the top centre).
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Button {
    pub radius: f64,
    /// Penetration behind the surface that registers a press.
    pub trigger_depth: f64,
    pub pressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: String,
    pub category: String,
    /// Graspables: centre / grasp point. Receptacles: top centre.
    /// Buttons: surface centre with the local x axis as outward normal.
    pub pose: Pose,
    pub graspable: bool,
    pub attached_to_gripper: bool,
    pub text_labels: Vec<String>,
    /// Height of the pose origin above the surface it rests on.
    pub half_height: f64,
    pub receptacle: Option<Receptacle>,
    pub button: Option<Button>,
    /// Object pose in the tool frame while attached.
    pub grasp_offset: Option<Pose>,
}

impl WorldObject {
    pub fn item(id: &str, category: &str, position: Vector3<f64>, half_height: f64) -> Self {
        Self {
            id: id.into(),
            category: category.into(),
            pose: Pose::from_translation(position),
            graspable: true,
            attached_to_gripper: false,
            text_labels: vec![category.into()],
            half_height,
            receptacle: None,
            button: None,
            grasp_offset: None,
        }
    }
}

/// Auxiliary body rates; only honoured in decoupled mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyCommand {
    pub height_rate: f64,
    pub pitch_rate: f64,
}

/// One control decision. `None` fields hold the current state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WholeBodyCommand {
    pub base: BaseCommand,
    /// Tool target in the command frame.
    pub ee_target: Option<Pose>,
    pub gripper: Option<GripperCommand>,
    pub body: Option<BodyCommand>,
}

impl WholeBodyCommand {
    pub fn hold() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot: RobotState,
    pub objects: Vec<WorldObject>,
    pub waypoints: BTreeMap<String, PlanarPose>,
    pub time: f64,
    pub rng_seed: u64,
    /// Embedding label rendered where no object is seen.
    pub background: String,
}

impl WorldState {
    pub fn object(&self, id: &str) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: &str) -> Option<&mut WorldObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn attached(&self) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.attached_to_gripper)
    }

    pub fn attached_count(&self) -> usize {
        self.objects.iter().filter(|o| o.attached_to_gripper).count()
    }
}

/// Deterministic kinematic stepping of a [`WorldState`].
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: RobotConfig,
}

fn approach(current: f64, target: f64, max_delta: f64) -> f64 {
    current + (target - current).clamp(-max_delta, max_delta)
}

impl Simulator {
    pub fn new(config: RobotConfig) -> Self {
        Self { config }
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    /// Advances `world` by `dt` under `cmd`. Commands and joints are clamped.
    pub fn step(&self, world: &WorldState, cmd: &WholeBodyCommand, dt: f64) -> WorldState {
        let cfg = &self.config;
        let dt = dt.clamp(f64::MIN_POSITIVE, 0.1);
        let mut next = world.clone();
        let mode = world.robot.control_mode;
        let robot = &mut next.robot;

        // Base: commanded planar velocities in the base frame.
        let base_cmd = cmd.base.clamped(cfg.base.max_linear_speed, cfg.base.max_angular_speed);
        if !base_cmd.is_zero() {
            let (s, c) = robot.base.yaw.sin_cos();
            let v = base_cmd.linear_velocity;
            robot.base.x += (c * v.x - s * v.y) * dt;
            robot.base.y += (s * v.x + c * v.y) * dt;
            robot.base.yaw += base_cmd.angular_velocity * dt;
        }

        // Body and yaw assist.
        match (mode, cmd.ee_target.as_ref(), cmd.body.as_ref()) {
            (ControlMode::WholeBody, Some(target), _) => {
                let posture = coordination_posture(cfg, robot, target);
                robot.body_height = approach(robot.body_height, posture.height, cfg.body.height_rate * dt);
                robot.body_pitch = approach(robot.body_pitch, posture.pitch, cfg.body.pitch_rate * dt);
                let want = desired_yaw_assist(cfg, &wrist_centre(cfg, target));
                let assist = approach(robot.yaw_assist, want, cfg.base.yaw_assist_rate * dt);
                robot.base.yaw += assist - robot.yaw_assist;
                robot.yaw_assist = assist;
            }
            (ControlMode::Decoupled, _, Some(body)) => {
                let b = &cfg.body;
                let height_rate = body.height_rate.clamp(-b.height_rate, b.height_rate);
                let pitch_rate = body.pitch_rate.clamp(-b.pitch_rate, b.pitch_rate);
                robot.body_height = (robot.body_height + height_rate * dt).clamp(b.min_height, b.max_height);
                robot.body_pitch = (robot.body_pitch + pitch_rate * dt).clamp(-b.max_pitch, b.max_pitch);
            }
            _ => {}
        }

        // Arm.
        if let Some(target) = cmd.ee_target {
            let target_world = command_frame(cfg, robot).compose(&target);
            let target_mount = mount_frame(cfg, robot).inverse().compose(&target_world);
            robot.arm_joints = dls_step(cfg, &robot.arm_joints, &target_mount, dt);
        }

        // Gripper.
        let was_open = robot.gripper_open_fraction;
        if let Some(g) = cmd.gripper {
            let goal = if g.closed { 0.0 } else { 1.0 };
            robot.gripper_open_fraction = approach(robot.gripper_open_fraction, goal, cfg.gripper.rate * dt);
        }
        let now_open = robot.gripper_open_fraction;

        if cmd.ee_target.is_some() || cmd.body.is_some() || !base_cmd.is_zero() {
            robot.ee_pose = forward_kinematics(cfg, robot);
        }
        let ee = robot.ee_pose;

        if let Some(target) = cmd.ee_target {
            let target_world = command_frame(cfg, robot).compose(&target);
            let position_error = ee.translation_distance(&target_world);
            let orientation_error = ee.rotation_distance(&target_world);
            robot.tracking = Some(Tracking {
                position_error,
                orientation_error,
                converged: position_error < cfg.convergence.position
                    && orientation_error < cfg.convergence.orientation,
            });
        }

        let closing_contact = was_open > CONTACT_FRACTION && now_open <= CONTACT_FRACTION;
        let opening_contact = was_open <= CONTACT_FRACTION && now_open > CONTACT_FRACTION;

        if opening_contact {
            release_attached(&mut next.objects);
        }
        if closing_contact && !next.objects.iter().any(|o| o.attached_to_gripper) {
            let radius = cfg.gripper.grasp_radius;
            let candidate = next
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.graspable)
                .map(|(i, o)| (i, o.pose.translation_distance(&ee)))
                .filter(|&(_, d)| d <= radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = candidate {
                let obj = &mut next.objects[i];
                obj.attached_to_gripper = true;
                obj.grasp_offset = Some(ee.inverse().compose(&obj.pose));
            }
        }
        for obj in next.objects.iter_mut().filter(|o| o.attached_to_gripper) {
            if let Some(offset) = obj.grasp_offset {
                obj.pose = ee.compose(&offset);
            }
        }

        for obj in next.objects.iter_mut() {
            if let Some(button) = obj.button.as_mut() {
                if button.pressed {
                    continue;
                }
                let local = obj.pose.inverse().transform_point(&ee.translation);
                if -local.x >= button.trigger_depth && local.y.hypot(local.z) <= button.radius {
                    button.pressed = true;
                }
            }
        }

        next.time = world.time + dt;
        next
    }
}

/// Drops the attached object straight down onto the highest support
/// surface under it (a receptacle top or the floor).
fn release_attached(objects: &mut [WorldObject]) {
    let Some(idx) = objects.iter().position(|o| o.attached_to_gripper) else {
        return;
    };
    let xy = Vector2::new(objects[idx].pose.translation.x, objects[idx].pose.translation.y);
    let support = objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .filter_map(|(_, o)| {
            let r = o.receptacle.as_ref()?;
            let centre = Vector2::new(o.pose.translation.x, o.pose.translation.y);
            ((xy - centre).norm() <= r.radius && o.pose.translation.z <= objects[idx].pose.translation.z)
                .then_some(o.pose.translation.z)
        })
        .fold(0.0_f64, f64::max);
    let obj = &mut objects[idx];
    let yaw = obj.pose.yaw();
    obj.attached_to_gripper = false;
    obj.grasp_offset = None;
    obj.pose = Pose::from_planar(xy.x, xy.y, support + obj.half_height, yaw);
}

/// World description file (TOML).
///
/// ```toml
/// schema_version = 1
/// background = "background"
/// control_mode = "whole_body"
/// seed = 0
/// robot_start = { x = 0.0, y = 0.0, yaw = 0.0 }
///
/// [[objects]]
/// id = "trash_1"
/// category = "trash"
/// position = [0.65, 0.0, 0.03]
/// yaw = 0.0
/// half_height = 0.03
/// graspable = true
///
/// [[objects]]
/// id = "bin"
/// category = "trash bin"
/// position = [2.0, 1.0, 0.35]   # top centre
/// graspable = false
/// receptacle = { radius = 0.18 }
///
/// [[objects]]
/// id = "ada"
/// category = "ADA button"
/// position = [1.0, 0.0, 1.0]    # surface centre
/// yaw = 3.14159                 # outward normal (local x) faces the robot
/// graspable = false
/// button = { radius = 0.04, trigger_depth = 0.01 }
///
/// [[waypoints]]
/// name = "hallway_east"
/// x = 0.0
/// y = 0.0
/// yaw = 0.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub schema_version: u32,
    #[serde(default = "default_background")]
    pub background: String,
    #[serde(default = "default_mode")]
    pub control_mode: ControlMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub robot_start: PlanarPose,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub waypoints: Vec<WaypointConfig>,
}

fn default_background() -> String {
    "background".into()
}

fn default_mode() -> ControlMode {
    ControlMode::WholeBody
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub id: String,
    pub category: String,
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub half_height: f64,
    #[serde(default)]
    pub graspable: bool,
    #[serde(default)]
    pub text_labels: Vec<String>,
    #[serde(default)]
    pub receptacle: Option<Receptacle>,
    #[serde(default)]
    pub button: Option<ButtonConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButtonConfig {
    pub radius: f64,
    pub trigger_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointConfig {
    pub name: String,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
}

impl WorldConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg: Self = read_toml(path.as_ref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != WORLD_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                expected: WORLD_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate object id `{}`", o.id)));
            }
        }
        Ok(())
    }

    pub fn build(&self, robot: &RobotConfig) -> WorldState {
        let objects = self
            .objects
            .iter()
            .map(|o| WorldObject {
                id: o.id.clone(),
                category: o.category.clone(),
                pose: Pose::from_planar(o.position[0], o.position[1], o.position[2], o.yaw),
                graspable: o.graspable,
                attached_to_gripper: false,
                text_labels: if o.text_labels.is_empty() {
                    vec![o.category.clone()]
                } else {
                    o.text_labels.clone()
                },
                half_height: o.half_height,
                receptacle: o.receptacle.clone(),
                button: o.button.as_ref().map(|b| Button {
                    radius: b.radius,
                    trigger_depth: b.trigger_depth,
                    pressed: false,
                }),
                grasp_offset: None,
            })
            .collect();
        WorldState {
            robot: RobotState::new(robot, self.robot_start, self.control_mode),
            objects,
            waypoints: self
                .waypoints
                .iter()
                .map(|w| (w.name.clone(), PlanarPose::new(w.x, w.y, w.yaw)))
                .collect(),
            time: 0.0,
            rng_seed: self.seed,
            background: self.background.clone(),
        }
    }
}
