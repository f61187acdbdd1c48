//! Transport-independent teleoperation loop.
//!
//! One tick: build the command from the latched input (or hold if it is
//! stale), record the frame if recording, step the simulator. The server
//! and the offline replay both drive this type, so identical input
//! sequences give identical worlds.

use crate::protocol::{
    AttentionThumbnail, CommandSummary, ControlAction, ErrorCode, Inbound, InputMessage, ObjectSummary, RecordingStatus,
    RobotSummary, StateSnapshot,
};
use crate::{ServiceConfig, TeleopError};
use locoman_core::attention::{cross_attention, pool, TextEmbedding};
use locoman_core::demos::{save_episode, EpisodeMetadata, Recorder};
use locoman_core::geometry::{
    pinch_distance_to_gripper, teleop_base_map, teleop_ee_map, BaseCommand, GripperCommand, Pose,
};
use locoman_core::simworld::{render_observation, BodyCommand, CameraId, Proprioception};
use locoman_core::skills::TerminationConfig;
use locoman_core::{ControlMode, Simulator, WholeBodyCommand, WorldState};
use std::path::PathBuf;

pub const THUMBNAIL_SIZE: usize = 8;

/// Input mapped to robot-side quantities at receipt.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Latched {
    base: BaseCommand,
    /// Relative end-effector pose from the right wrist.
    ee_delta: Pose,
    pinch_gripper: f64,
    body: Option<BodyCommand>,
    stamp: u64,
}

pub struct TeleopSession {
    config: ServiceConfig,
    sim: Simulator,
    initial: WorldState,
    world: WorldState,
    tick: u64,
    hold_ticks: u64,
    latched: Option<Latched>,
    gripper: GripperCommand,
    ee_reference: Pose,
    ack: Option<u64>,
    query: Option<TextEmbedding>,
    recorder: Option<Recorder>,
    recorded: Vec<PathBuf>,
    last_command: WholeBodyCommand,
    stale: bool,
}

impl TeleopSession {
    pub fn new(config: ServiceConfig) -> Result<Self, TeleopError> {
        config.validate()?;
        let mut world_cfg = config.world.clone();
        world_cfg.control_mode = config.control_mode;
        let world = world_cfg.build(&config.robot);
        let query = match &config.attention_query {
            Some(label) => Some(config.bank.embedding(label).map_err(|e| TeleopError::Config(e.to_string()))?),
            None => None,
        };
        let hold_ticks = (config.hold_seconds / config.robot.dt).round().max(1.0) as u64;
        let mut session = Self {
            sim: Simulator::new(config.robot.clone()),
            initial: world.clone(),
            world,
            tick: 0,
            hold_ticks,
            latched: None,
            gripper: GripperCommand::OPEN,
            ee_reference: Pose::identity(),
            ack: None,
            query,
            recorder: None,
            recorded: Vec::new(),
            last_command: WholeBodyCommand::hold(),
            stale: true,
            config,
        };
        session.capture_reference();
        Ok(session)
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn dt(&self) -> f64 {
        self.sim.dt()
    }

    pub fn hold_ticks(&self) -> u64 {
        self.hold_ticks
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    /// Episode files written so far, in order.
    pub fn recorded(&self) -> &[PathBuf] {
        &self.recorded
    }

    pub fn last_command(&self) -> &WholeBodyCommand {
        &self.last_command
    }

    fn capture_reference(&mut self) {
        let proprio = Proprioception::from_state(&self.config.robot, &self.world.robot, false);
        self.ee_reference = proprio.ee_in_command;
    }

    pub fn acknowledge(&mut self, seq: Option<u64>) {
        if seq.is_some() {
            self.ack = seq;
        }
    }

    /// Latches a new input for the coming ticks.
    pub fn receive_input(&mut self, msg: &InputMessage) -> Result<(), TeleopError> {
        let right = msg.wrist_right.to_pose().map_err(TeleopError::Input)?;
        let left = msg.wrist_left.to_pose().map_err(TeleopError::Input)?;
        if !msg.pinch_gripper.is_finite() || msg.body_rates.is_some_and(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(TeleopError::Input("non-finite input".into()));
        }
        let ee_delta = teleop_ee_map(&right, &self.config.teleop).map_err(|e| TeleopError::Input(e.to_string()))?;
        self.latched = Some(Latched {
            base: teleop_base_map(&left, msg.pinch_left, &self.config.teleop),
            ee_delta,
            pinch_gripper: msg.pinch_gripper,
            body: msg.body_rates.map(|[height_rate, pitch_rate]| BodyCommand { height_rate, pitch_rate }),
            stamp: self.tick,
        });
        self.acknowledge(msg.seq);
        Ok(())
    }

    pub fn control(&mut self, action: &ControlAction) -> Result<(), TeleopError> {
        match *action {
            ControlAction::Reset => {
                self.world = self.initial.clone();
                self.latched = None;
                self.gripper = GripperCommand::OPEN;
                self.recorder = None;
                self.capture_reference();
            }
            ControlAction::SetMode { mode } => self.set_mode(mode),
            ControlAction::RecordStart => {
                if self.recorder.is_some() {
                    return Err(TeleopError::Recording("already recording".into()));
                }
                let robot = &self.config.robot;
                self.recorder = Some(
                    Recorder::new(
                        &self.config.skill,
                        self.query.iter().cloned().collect(),
                        TerminationConfig::default(),
                        robot.base.max_linear_speed,
                        robot.base.max_angular_speed,
                    )
                    .with_features(self.config.record_features),
                );
            }
            ControlAction::RecordStop => {
                let recorder = self
                    .recorder
                    .take()
                    .ok_or_else(|| TeleopError::Recording("not recording".into()))?;
                let episode = recorder
                    .finish(EpisodeMetadata {
                        scene_id: format!("teleop:{}", self.config.name),
                        seed: self.world.rng_seed,
                        operator_id: "teleop".into(),
                        success: true,
                    })
                    .map_err(|e| TeleopError::Recording(e.to_string()))?;
                let dir = &self.config.episodes_dir;
                std::fs::create_dir_all(dir).map_err(|e| TeleopError::Recording(e.to_string()))?;
                let path = dir.join(format!("{}_teleop_{:06}.bin", self.config.name, self.tick));
                save_episode(&episode, &path).map_err(|e| TeleopError::Recording(e.to_string()))?;
                self.recorded.push(path);
            }
        }
        Ok(())
    }

    fn set_mode(&mut self, mode: ControlMode) {
        self.world.robot.control_mode = mode;
        self.world.robot.tracking = None;
        self.latched = None;
        self.capture_reference();
    }

    /// Command for the current tick; zero velocities once the input is
    /// older than the hold time.
    fn command(&mut self) -> WholeBodyCommand {
        let fresh = self.latched.filter(|l| self.tick - l.stamp < self.hold_ticks);
        self.stale = fresh.is_none();
        let Some(l) = fresh else {
            return WholeBodyCommand {
                gripper: Some(self.gripper),
                ..WholeBodyCommand::hold()
            };
        };
        self.gripper = pinch_distance_to_gripper(l.pinch_gripper, &self.config.pinch, self.gripper);
        let ee_target = Pose {
            rotation: l.ee_delta.rotation * self.ee_reference.rotation,
            translation: self.ee_reference.translation + l.ee_delta.translation,
        };
        WholeBodyCommand {
            base: l.base,
            ee_target: Some(ee_target),
            gripper: Some(self.gripper),
            body: l.body.filter(|_| self.world.robot.control_mode == ControlMode::Decoupled),
        }
    }

    /// Advances one tick and returns the new snapshot.
    pub fn step(&mut self) -> Result<StateSnapshot, TeleopError> {
        let cmd = self.command();
        if let Some(recorder) = self.recorder.as_mut() {
            let obs = render_observation(&self.config.robot, &self.world, &self.config.bank, &[CameraId::Head, CameraId::Wrist])
                .map_err(|e| TeleopError::Recording(e.to_string()))?;
            recorder.push(&obs, &cmd).map_err(|e| TeleopError::Recording(e.to_string()))?;
        }
        self.world = self.sim.step(&self.world, &cmd, self.sim.dt());
        self.last_command = cmd;
        self.tick += 1;
        self.snapshot()
    }

    /// Lockstep handling shared by the server and offline replay: inputs
    /// and steps advance one tick, controls apply immediately.
    pub fn handle(&mut self, msg: &Inbound) -> Result<Option<StateSnapshot>, TeleopError> {
        match msg {
            Inbound::Input(m) => {
                self.receive_input(m)?;
                self.step().map(Some)
            }
            Inbound::Step { seq } => {
                self.acknowledge(*seq);
                self.step().map(Some)
            }
            Inbound::Control { seq, action } => {
                self.acknowledge(*seq);
                self.control(action).map(|_| None)
            }
        }
    }

    pub fn snapshot(&self) -> Result<StateSnapshot, TeleopError> {
        let r = &self.world.robot;
        let ee = r.ee_pose.translation;
        let attention = match &self.query {
            Some(q) => {
                let obs = render_observation(&self.config.robot, &self.world, &self.config.bank, &[CameraId::Head])
                    .map_err(|e| TeleopError::Config(e.to_string()))?;
                let head = obs.head.expect("head camera rendered");
                let map = cross_attention(&head.features, q).map_err(|e| TeleopError::Config(e.to_string()))?;
                Some(AttentionThumbnail {
                    query: q.label.clone(),
                    height: THUMBNAIL_SIZE,
                    width: THUMBNAIL_SIZE,
                    values: pool(&map, THUMBNAIL_SIZE, THUMBNAIL_SIZE),
                })
            }
            None => None,
        };
        let base = self.last_command.base;
        Ok(StateSnapshot {
            tick: self.tick,
            time: self.world.time,
            ack: self.ack,
            robot: RobotSummary {
                base: [r.base.x, r.base.y, r.base.yaw],
                body_height: r.body_height,
                body_pitch: r.body_pitch,
                arm_joints: r.arm_joints,
                ee_position: [ee.x, ee.y, ee.z],
                ee_quaternion: r.ee_pose.quaternion(),
                gripper_open: r.gripper_open_fraction,
                holding: self.world.attached().is_some(),
                control_mode: r.control_mode,
            },
            command: CommandSummary {
                base: [base.linear_velocity.x, base.linear_velocity.y, base.angular_velocity],
                ee_target: self.last_command.ee_target.is_some(),
                gripper_closed: self.gripper.closed,
                stale: self.stale,
            },
            objects: self
                .world
                .objects
                .iter()
                .map(|o| {
                    let p = o.pose.translation;
                    ObjectSummary {
                        id: o.id.clone(),
                        category: o.category.clone(),
                        position: [p.x, p.y, p.z],
                        yaw: o.pose.yaw(),
                        attached: o.attached_to_gripper,
                    }
                })
                .collect(),
            attention,
            recording: RecordingStatus {
                active: self.recorder.is_some(),
                frames: self.recorder.as_ref().map_or(0, Recorder::len),
                last_file: self.recorded.last().map(|p| p.display().to_string()),
            },
        })
    }
}

impl TeleopError {
    pub fn code(&self) -> ErrorCode {
        match self {
            TeleopError::Recording(_) => ErrorCode::Recording,
            _ => ErrorCode::Invalid,
        }
    }
}

/// Offline pipeline: applies a lockstep message log to a fresh session.
pub fn replay_log(config: ServiceConfig, log: &[Inbound]) -> Result<TeleopSession, TeleopError> {
    let mut session = TeleopSession::new(config)?;
    for msg in log {
        session.handle(msg)?;
    }
    Ok(session)
}
