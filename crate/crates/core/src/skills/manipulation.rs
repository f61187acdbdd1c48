//! Attention-guided grasp, place and press procedures.

use super::{Skill, SkillError, SkillStepOutput};
use crate::attention::{cross_attention, localize, refine_peak, TextEmbedding};
use crate::geometry::{wrap_angle, BaseCommand, GripperCommand, Pose};
use crate::simworld::render::{CameraFrame, Proprioception};
use crate::simworld::{top_down, CameraId, Observation, WholeBodyCommand};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    Grasp,
    Place,
    Press,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManipulationParams {
    /// Minimum attention peak accepted as a detection.
    pub detect_threshold: f64,
    pub approach_height: f64,
    pub lift_height: f64,
    pub release_height: f64,
    pub press_depth: f64,
    pub press_standoff: f64,
    /// Base-to-target distance the align stage drives to.
    pub standoff: f64,
    pub standoff_tolerance: f64,
    /// Targets inside `[reach_min, reach_max]` and within the bearing
    /// tolerance skip the align stage.
    pub reach_min: f64,
    pub reach_max: f64,
    pub bearing_tolerance: f64,
    pub align_gain: f64,
    pub max_linear: f64,
    pub max_angular: f64,
    /// Largest accepted correction from the wrist-camera refinement.
    pub refine_radius: f64,
}

impl Default for ManipulationParams {
    fn default() -> Self {
        Self {
            detect_threshold: 0.6,
            approach_height: 0.15,
            lift_height: 0.15,
            release_height: 0.12,
            press_depth: 0.02,
            press_standoff: 0.10,
            standoff: 0.65,
            standoff_tolerance: 0.04,
            reach_min: 0.58,
            reach_max: 0.80,
            bearing_tolerance: 0.35,
            align_gain: 1.2,
            max_linear: 0.5,
            max_angular: 1.0,
            refine_radius: 0.15,
        }
    }
}

impl ManipulationParams {
    /// Defaults for a behaviour, overridden by manifest parameters.
    pub fn for_behavior(kind: Manipulation, overrides: &BTreeMap<String, f64>) -> Result<Self, SkillError> {
        let mut p = Self::default();
        if kind == Manipulation::Press {
            p.standoff = 0.85;
            p.reach_min = 0.75;
            p.reach_max = 0.95;
        }
        for (name, &value) in overrides {
            let slot = match name.as_str() {
                "detect_threshold" => &mut p.detect_threshold,
                "approach_height" => &mut p.approach_height,
                "lift_height" => &mut p.lift_height,
                "release_height" => &mut p.release_height,
                "press_depth" => &mut p.press_depth,
                "press_standoff" => &mut p.press_standoff,
                "standoff" => &mut p.standoff,
                "standoff_tolerance" => &mut p.standoff_tolerance,
                "reach_min" => &mut p.reach_min,
                "reach_max" => &mut p.reach_max,
                "bearing_tolerance" => &mut p.bearing_tolerance,
                "align_gain" => &mut p.align_gain,
                "max_linear" => &mut p.max_linear,
                "max_angular" => &mut p.max_angular,
                "refine_radius" => &mut p.refine_radius,
                other => return Err(SkillError::Config(format!("unknown parameter `{other}`"))),
            };
            if !value.is_finite() {
                return Err(SkillError::Config(format!("parameter `{name}` is not finite")));
            }
            *slot = value;
        }
        if !(p.reach_min < p.standoff && p.standoff < p.reach_max) {
            return Err(SkillError::Config("standoff must lie inside [reach_min, reach_max]".into()));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Ready,
    Locate,
    Align,
    Approach,
    Refine,
    Act,
    Gripper,
    Retract,
    Done,
    Failed,
}

impl Stage {
    fn name(&self, kind: Manipulation) -> &'static str {
        match (self, kind) {
            (Stage::Ready, _) => "ready",
            (Stage::Locate, _) => "locate",
            (Stage::Align, _) => "align",
            (Stage::Approach, _) => "approach",
            (Stage::Refine, _) => "refine",
            (Stage::Act, Manipulation::Press) => "push",
            (Stage::Act, _) => "descend",
            (Stage::Gripper, Manipulation::Place) => "release",
            (Stage::Gripper, _) => "close",
            (Stage::Retract, _) => "retract",
            (Stage::Done, _) => "done",
            (Stage::Failed, _) => "failed",
        }
    }
}

/// Heuristic staged skill. Emits `end_signal = 0` until the terminal
/// stage, then `1.0` with a hold command on every later tick.
#[derive(Debug, Clone)]
pub struct ManipulationSkill {
    name: String,
    kind: Manipulation,
    params: ManipulationParams,
    query: TextEmbedding,
    stage: Stage,
    ticks_in_stage: usize,
    /// Estimated target point in the world frame.
    target: Option<Vector3<f64>>,
    /// Tool heading (grasp) or push direction yaw (press), fixed when the
    /// approach starts.
    heading: f64,
    /// Command repeated once the skill is done.
    final_command: Option<WholeBodyCommand>,
    failure: Option<String>,
}

/// Ready pose for the press skill, in the command frame: tool forward, so
/// the wrist camera looks ahead.
fn ready_pose() -> Pose {
    Pose::from_translation(Vector3::new(0.45, 0.0, 0.35))
}

/// Localizes `query` in a camera frame and back-projects the refined peak
/// using the depth channel.
pub fn locate_in_frame(frame: &CameraFrame, query: &TextEmbedding, threshold: f64) -> Option<(Vector3<f64>, f64)> {
    let att = cross_attention(&frame.features, query).ok()?;
    let (cell, peak) = localize(&att).ok()?;
    if peak < threshold {
        return None;
    }
    let (row, col) = refine_peak(&att, cell);
    let depth = frame.depth_at(cell.0, cell.1);
    Some((frame.back_project(row, col, depth), peak))
}

impl ManipulationSkill {
    pub fn new(name: &str, kind: Manipulation, params: ManipulationParams, query: TextEmbedding) -> Self {
        Self {
            name: name.into(),
            kind,
            params,
            query,
            stage: if kind == Manipulation::Press { Stage::Ready } else { Stage::Locate },
            ticks_in_stage: 0,
            target: None,
            heading: 0.0,
            final_command: None,
            failure: None,
        }
    }

    pub fn kind(&self) -> Manipulation {
        self.kind
    }

    pub fn target(&self) -> Option<Vector3<f64>> {
        self.target
    }

    fn enter(&mut self, stage: Stage) {
        self.stage = stage;
        self.ticks_in_stage = 0;
    }

    fn fail(&mut self, why: String) {
        self.failure = Some(why);
        self.enter(Stage::Failed);
    }

    fn locate_camera(&self) -> CameraId {
        match self.kind {
            Manipulation::Press => CameraId::Wrist,
            _ => CameraId::Head,
        }
    }

    /// Distance and bearing from the base centre to the target.
    fn range_bearing(&self, proprio: &Proprioception) -> (f64, f64) {
        let t = self.target.unwrap_or_default();
        let rel = Vector2::new(t.x - proprio.base.x, t.y - proprio.base.y);
        (rel.norm(), wrap_angle(rel.y.atan2(rel.x) - proprio.base.yaw))
    }

    fn in_window(&self, proprio: &Proprioception) -> bool {
        let (d, b) = self.range_bearing(proprio);
        d >= self.params.reach_min && d <= self.params.reach_max && b.abs() <= self.params.bearing_tolerance
    }

    fn align_command(&self, proprio: &Proprioception) -> BaseCommand {
        let (d, b) = self.range_bearing(proprio);
        let speed = self.params.align_gain * (d - self.params.standoff);
        BaseCommand {
            linear_velocity: Vector2::new(b.cos(), b.sin()) * speed,
            angular_velocity: self.params.align_gain * 2.0 * b,
        }
        .clamped(self.params.max_linear, self.params.max_angular)
    }

    fn direction(&self) -> Vector3<f64> {
        Vector3::new(self.heading.cos(), self.heading.sin(), 0.0)
    }

    /// World-frame tool pose for the current stage.
    fn stage_target(&self) -> Pose {
        let t = self.target.unwrap_or_default();
        let up = Vector3::z();
        match (self.kind, self.stage) {
            (Manipulation::Press, Stage::Act) => {
                Pose::rot_z(self.heading).with_translation(t + self.params.press_depth * self.direction())
            }
            (Manipulation::Press, _) => Pose::rot_z(self.heading)
                .with_translation(t - self.params.press_standoff * self.direction()),
            (Manipulation::Grasp, Stage::Act | Stage::Gripper) => top_down(self.heading).with_translation(t),
            (Manipulation::Grasp, Stage::Retract) => {
                top_down(self.heading).with_translation(t + self.params.lift_height * up)
            }
            (Manipulation::Grasp, _) => top_down(self.heading).with_translation(t + self.params.approach_height * up),
            (Manipulation::Place, Stage::Retract) => top_down(self.heading)
                .with_translation(t + (self.params.release_height + self.params.lift_height) * up),
            (Manipulation::Place, _) => top_down(self.heading).with_translation(t + self.params.release_height * up),
        }
    }

    fn track(&self, proprio: &Proprioception, gripper: Option<GripperCommand>) -> WholeBodyCommand {
        WholeBodyCommand {
            ee_target: Some(proprio.command_frame.inverse().compose(&self.stage_target())),
            gripper,
            ..WholeBodyCommand::hold()
        }
    }

    fn converged(&self, proprio: &Proprioception) -> bool {
        self.ticks_in_stage >= 2 && proprio.tracking_converged
    }

    fn terminal_gripper(&self) -> Option<GripperCommand> {
        match self.kind {
            Manipulation::Grasp => Some(GripperCommand::CLOSED),
            Manipulation::Place => Some(GripperCommand::OPEN),
            Manipulation::Press => None,
        }
    }

    fn held_gripper(&self) -> Option<GripperCommand> {
        match self.kind {
            Manipulation::Place => Some(GripperCommand::CLOSED),
            Manipulation::Grasp => Some(GripperCommand::OPEN),
            Manipulation::Press => None,
        }
    }

    /// A transition decided on this tick's observation hands the tick to
    /// the new stage, so a recorded demonstration never pairs one
    /// observation with two different commands.
    fn advance(&mut self, obs: &Observation) -> WholeBodyCommand {
        loop {
            let before = self.stage;
            let cmd = self.stage_command(obs);
            match self.stage {
                Stage::Done if before != Stage::Done => {
                    self.final_command = Some(cmd);
                    return cmd;
                }
                s if s == before || s == Stage::Failed => return cmd,
                _ => {}
            }
        }
    }

    fn stage_command(&mut self, obs: &Observation) -> WholeBodyCommand {
        let p = &obs.proprio;
        match self.stage {
            Stage::Ready => {
                let cmd = WholeBodyCommand {
                    ee_target: Some(ready_pose()),
                    ..WholeBodyCommand::hold()
                };
                if self.converged(p) {
                    self.enter(Stage::Locate);
                }
                cmd
            }
            Stage::Locate => {
                let Some(frame) = obs.camera(self.locate_camera()) else {
                    return WholeBodyCommand::hold();
                };
                match locate_in_frame(frame, &self.query, self.params.detect_threshold) {
                    Some((point, _)) => {
                        self.target = Some(point);
                        if self.in_window(p) {
                            self.start_approach(p);
                        } else {
                            self.enter(Stage::Align);
                        }
                    }
                    None => self.fail(format!("`{}` not found by the {:?} camera", self.query.label, self.locate_camera())),
                }
                WholeBodyCommand {
                    gripper: self.held_gripper(),
                    ..WholeBodyCommand::hold()
                }
            }
            Stage::Align => {
                let (d, b) = self.range_bearing(p);
                if (d - self.params.standoff).abs() < self.params.standoff_tolerance && b.abs() < 0.1 {
                    self.start_approach(p);
                    return WholeBodyCommand::hold();
                }
                WholeBodyCommand {
                    base: self.align_command(p),
                    gripper: self.held_gripper(),
                    ..WholeBodyCommand::hold()
                }
            }
            Stage::Approach => {
                let cmd = self.track(p, self.held_gripper());
                if self.converged(p) {
                    match self.kind {
                        Manipulation::Place => self.enter(Stage::Gripper),
                        _ => self.enter(Stage::Refine),
                    }
                }
                cmd
            }
            Stage::Refine => {
                let cmd = self.track(p, self.held_gripper());
                let Some(frame) = obs.camera(CameraId::Wrist) else {
                    return cmd;
                };
                if let Some((point, _)) = locate_in_frame(frame, &self.query, self.params.detect_threshold) {
                    let old = self.target.unwrap_or(point);
                    if (point - old).norm() <= self.params.refine_radius {
                        self.target = Some(point);
                    }
                }
                self.enter(Stage::Act);
                cmd
            }
            Stage::Act => {
                let cmd = self.track(p, self.held_gripper());
                if self.converged(p) {
                    match self.kind {
                        Manipulation::Press => self.enter(Stage::Retract),
                        _ => self.enter(Stage::Gripper),
                    }
                }
                cmd
            }
            Stage::Gripper => {
                let cmd = self.track(p, self.terminal_gripper());
                let settled = match self.kind {
                    Manipulation::Place => p.gripper_open_fraction >= 1.0,
                    _ => p.gripper_open_fraction <= 0.0,
                };
                if settled && self.ticks_in_stage >= 1 {
                    if self.kind == Manipulation::Grasp && !p.holding {
                        self.fail("gripper closed on nothing".into());
                    } else {
                        self.enter(Stage::Retract);
                    }
                }
                cmd
            }
            Stage::Retract => {
                let gripper = match self.kind {
                    Manipulation::Press => None,
                    _ => self.terminal_gripper(),
                };
                let cmd = self.track(p, gripper);
                if self.converged(p) {
                    self.enter(Stage::Done);
                }
                cmd
            }
            Stage::Done if self.final_command.is_some() => self.final_command.unwrap_or_default(),
            Stage::Done | Stage::Failed => WholeBodyCommand {
                gripper: self.terminal_gripper(),
                ..WholeBodyCommand::hold()
            },
        }
    }

    fn start_approach(&mut self, p: &Proprioception) {
        self.heading = match self.kind {
            Manipulation::Press => {
                let t = self.target.unwrap_or_default();
                (t.y - p.base.y).atan2(t.x - p.base.x)
            }
            _ => p.base.yaw,
        };
        self.enter(Stage::Approach);
    }
}

trait WithTranslation {
    fn with_translation(self, t: Vector3<f64>) -> Pose;
}

impl WithTranslation for Pose {
    fn with_translation(mut self, t: Vector3<f64>) -> Pose {
        self.translation = t;
        self
    }
}

impl Skill for ManipulationSkill {
    fn name(&self) -> &str {
        &self.name
    }

    fn stage(&self) -> &str {
        self.stage.name(self.kind)
    }

    fn sensing(&self) -> Vec<CameraId> {
        match self.stage {
            Stage::Locate => vec![self.locate_camera()],
            // Ready and Approach may hand over to Locate or Refine mid-tick.
            Stage::Ready | Stage::Approach | Stage::Refine => vec![CameraId::Wrist],
            _ => Vec::new(),
        }
    }

    fn step(&mut self, obs: &Observation) -> SkillStepOutput {
        let command = self.advance(obs);
        self.ticks_in_stage += 1;
        SkillStepOutput {
            command,
            end_signal: if self.stage == Stage::Done { 1.0 } else { 0.0 },
        }
    }

    fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }
}
