//! Trial execution: plan, then run every step through the simulator.

use super::{HarnessError, Perturbation, PerturbationSpec, Setup};
use crate::attention::TextEmbedding;
use crate::demos::{Episode, EpisodeMetadata, Recorder};
use crate::planner::{plan, TaskStep};
use crate::simworld::kinematics::coordination_posture;
use crate::simworld::{
    render_observation, BodyCommand, CameraId, ControlMode, RobotConfig, RobotState, Simulator, WholeBodyCommand,
    WorldState,
};
use crate::skills::{instantiate, NavigateSkill, PdGains, Skill, TerminationDetector};
use serde::{Deserialize, Serialize};

/// Stand-in for an operator who adjusts the body posture first and only
/// then lets the arm move, as decoupled teleoperation requires.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoupledDriver {
    /// Height (m) and pitch (rad) error accepted as "there".
    pub tolerance: f64,
}

impl Default for DecoupledDriver {
    fn default() -> Self {
        Self { tolerance: 1e-3 }
    }
}

impl DecoupledDriver {
    /// Body-only command toward the posture `cmd` needs, or `None` once the
    /// body is there.
    pub fn body_command(&self, cfg: &RobotConfig, robot: &RobotState, cmd: &WholeBodyCommand, dt: f64) -> Option<WholeBodyCommand> {
        let target = cmd.ee_target?;
        let want = coordination_posture(cfg, robot, &target);
        let dh = want.height - robot.body_height;
        let dp = want.pitch - robot.body_pitch;
        if dh.abs() <= self.tolerance && dp.abs() <= self.tolerance {
            return None;
        }
        Some(WholeBodyCommand {
            body: Some(BodyCommand {
                height_rate: dh / dt,
                pitch_rate: dp / dt,
            }),
            ..WholeBodyCommand::hold()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `navigate:<node>` or `skill:<name>@<node>`.
    pub step: String,
    pub start_time: f64,
    pub end_time: f64,
    /// Tick (from the step's start) at which termination fired.
    pub termination_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub success: bool,
    /// Sim seconds until the plan finished, for successful trials.
    pub completion_time: Option<f64>,
    pub sim_time: f64,
    /// One of `planning`, `navigation`, `skill:<name>`, `timeout`.
    pub failure_stage: Option<String>,
    pub failure_reason: Option<String>,
    pub tasks: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrialOptions {
    pub mode: Option<ControlMode>,
    /// Disable the scenario's perturbation.
    pub nominal: bool,
    pub record: bool,
    pub record_features: bool,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub result: TrialResult,
    pub world: WorldState,
    /// One episode per skill invocation, when recording.
    pub episodes: Vec<Episode>,
}

/// Where an autonomously recorded episode came from, kept in its scene id
/// as `<scenario>:<trial>:<mode>:<nominal|perturbed>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeOrigin {
    pub scenario: String,
    pub trial: usize,
    pub mode: ControlMode,
    pub nominal: bool,
}

impl EpisodeOrigin {
    pub fn scene_id(&self) -> String {
        let p = if self.nominal { "nominal" } else { "perturbed" };
        format!("{}:{}:{}:{p}", self.scenario, self.trial, self.mode)
    }

    pub fn parse(scene_id: &str) -> Option<Self> {
        let mut parts = scene_id.rsplitn(4, ':');
        let nominal = match parts.next()? {
            "nominal" => true,
            "perturbed" => false,
            _ => return None,
        };
        let mode = parts.next()?.parse().ok()?;
        let trial = parts.next()?.parse().ok()?;
        Some(Self {
            scenario: parts.next()?.to_string(),
            trial,
            mode,
            nominal,
        })
    }
}

struct Failure {
    stage: String,
    reason: String,
}

fn fail(stage: impl Into<String>, reason: impl Into<String>) -> Failure {
    Failure {
        stage: stage.into(),
        reason: reason.into(),
    }
}

struct Runner<'a> {
    setup: &'a Setup,
    sim: Simulator,
    mode: ControlMode,
    driver: DecoupledDriver,
    deadline: f64,
}

impl Runner<'_> {
    /// Runs one skill to termination. `stage` names the failure stage.
    fn run_skill(
        &self,
        world: &mut WorldState,
        skill: &mut dyn Skill,
        stage: &str,
        mut recorder: Option<&mut Recorder>,
    ) -> Result<Option<usize>, Failure> {
        let cfg = &self.sim.config;
        let dt = cfg.dt;
        let bank = &self.setup.bank;
        let mut detector = TerminationDetector::new(self.setup.scenario.termination);
        let step_deadline = world.time + self.setup.scenario.budget.skill_seconds;
        let mut pending: Option<WholeBodyCommand> = None;
        loop {
            if world.time >= self.deadline - 1e-9 {
                return Err(fail("timeout", format!("instruction budget exhausted at t = {:.2} s", world.time)));
            }
            if world.time >= step_deadline - 1e-9 {
                return Err(fail(stage, format!("`{}` exceeded its budget in stage `{}`", skill.name(), skill.stage())));
            }
            if let Some(held) = pending {
                let cmd = match self.driver.body_command(cfg, &world.robot, &held, dt) {
                    Some(body) => body,
                    None => {
                        pending = None;
                        held
                    }
                };
                *world = self.sim.step(world, &cmd, dt);
                continue;
            }
            let mut cameras = skill.sensing();
            if recorder.is_some() && !cameras.contains(&CameraId::Head) {
                cameras.push(CameraId::Head);
            }
            let obs = render_observation(cfg, world, bank, &cameras).map_err(|e| fail(stage, e.to_string()))?;
            let out = skill.step(&obs);
            if let Some(why) = skill.failure() {
                return Err(fail(stage, why.to_string()));
            }
            let mut cmd = out.command;
            if self.mode == ControlMode::Decoupled {
                if let Some(body) = self.driver.body_command(cfg, &world.robot, &out.command, dt) {
                    pending = Some(out.command);
                    cmd = body;
                }
            }
            if let Some(r) = recorder.as_deref_mut() {
                r.push(&obs, &out.command).map_err(|e| fail(stage, e.to_string()))?;
            }
            *world = self.sim.step(world, &cmd, dt);
            if let Some(at) = detector.push(out.end_signal) {
                return Ok(Some(at));
            }
        }
    }
}

/// Runs trial `index` of the loaded scenario.
pub fn run_trial(setup: &Setup, index: usize, opts: &TrialOptions) -> Result<TrialOutcome, HarnessError> {
    let scenario = &setup.scenario;
    let spec = if opts.nominal {
        PerturbationSpec::none()
    } else {
        scenario.perturbation.clone()
    };
    let perturbation = Perturbation::sample(&spec, &setup.world, scenario.seed, index);
    let mode = opts.mode.unwrap_or_else(|| setup.control_mode());
    let mut world_cfg = perturbation.apply_world(&setup.world);
    world_cfg.control_mode = mode;
    let mut world = world_cfg.build(&setup.robot);
    let mut graph = setup.scene.build()?;
    perturbation.apply_scene(&mut graph);
    let instruction = perturbation.apply_instruction(&scenario.instruction);

    let mut result = TrialResult {
        index,
        success: false,
        completion_time: None,
        sim_time: 0.0,
        failure_stage: None,
        failure_reason: None,
        tasks: Vec::new(),
        steps: Vec::new(),
        perturbation,
    };

    let plan = match plan(
        &instruction,
        &graph,
        &setup.skills,
        setup.evaluator.as_ref(),
        &scenario.start_node,
        &scenario.planner,
    ) {
        Ok(p) => p,
        Err(e) => {
            result.failure_stage = Some("planning".into());
            result.failure_reason = Some(e.to_string());
            return Ok(TrialOutcome {
                result,
                world,
                episodes: Vec::new(),
            });
        }
    };
    result.tasks = plan.fragments.iter().map(|f| f.task.clone()).collect();

    let runner = Runner {
        setup,
        sim: Simulator::new(setup.robot.clone()),
        mode,
        driver: DecoupledDriver::default(),
        deadline: scenario.budget.instruction_seconds,
    };
    let dt = setup.robot.dt;
    let origin = EpisodeOrigin {
        scenario: scenario.name.clone(),
        trial: index,
        mode,
        nominal: opts.nominal,
    };
    let mut episodes = Vec::new();
    let mut last_skill: Option<String> = None;
    let mut outcome: Result<(), Failure> = Ok(());

    for (step_index, step) in plan.steps().enumerate() {
        let start_time = world.time;
        let (label, run) = match step {
            TaskStep::Navigate { node } => {
                let target = graph.node(node).and_then(|n| n.pose).expect("validated plan");
                let mut skill = NavigateSkill::new("navigate", target, PdGains::default(), dt);
                (format!("navigate:{node}"), runner.run_skill(&mut world, &mut skill, "navigation", None))
            }
            TaskStep::InvokeSkill { skill, text_queries, node } => {
                let stage = format!("skill:{skill}");
                last_skill = Some(skill.clone());
                let label = format!("{stage}@{node}");
                let spec = setup.skills.get(skill).expect("validated plan");
                if let Err(p) = spec.preconditions_hold(&world) {
                    outcome = Err(fail(stage, format!("precondition {p:?} does not hold")));
                    break;
                }
                let mut instance = match instantiate(
                    spec,
                    text_queries,
                    &setup.bank,
                    setup.policies.get(skill).cloned(),
                    None,
                    dt,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        outcome = Err(fail(stage, e.to_string()));
                        break;
                    }
                };
                let mut recorder = if opts.record {
                    let queries: Vec<TextEmbedding> =
                        text_queries.iter().filter_map(|q| setup.bank.embedding(q).ok()).collect();
                    Some(
                        Recorder::new(
                            skill,
                            queries,
                            scenario.termination,
                            setup.robot.base.max_linear_speed,
                            setup.robot.base.max_angular_speed,
                        )
                        .with_features(opts.record_features),
                    )
                } else {
                    None
                };
                let run = runner.run_skill(&mut world, instance.as_mut(), &stage, recorder.as_mut());
                if let Some(r) = recorder.filter(|r| !r.is_empty()) {
                    let metadata = EpisodeMetadata {
                        scene_id: origin.scene_id(),
                        seed: scenario.seed,
                        operator_id: format!("autonomous:{step_index}"),
                        success: run.is_ok(),
                    };
                    episodes.push(r.finish(metadata)?);
                }
                (label, run)
            }
        };
        match run {
            Ok(termination_index) => result.steps.push(StepRecord {
                step: label,
                start_time,
                end_time: world.time,
                termination_index,
            }),
            Err(f) => {
                result.steps.push(StepRecord {
                    step: label,
                    start_time,
                    end_time: world.time,
                    termination_index: None,
                });
                outcome = Err(f);
                break;
            }
        }
    }

    result.sim_time = world.time;
    match outcome {
        Ok(()) if scenario.goal.satisfied(&world) => {
            result.success = true;
            result.completion_time = Some(world.time);
        }
        Ok(()) => {
            let stage = last_skill.map_or("navigation".to_string(), |s| format!("skill:{s}"));
            result.failure_stage = Some(stage);
            result.failure_reason = Some("plan finished but the goal does not hold".into());
        }
        Err(f) => {
            result.failure_stage = Some(f.stage);
            result.failure_reason = Some(f.reason);
        }
    }
    Ok(TrialOutcome {
        result,
        world,
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub frames: usize,
    pub max_action_error: f64,
    pub max_proprio_error: f64,
    pub tolerance: f64,
    pub matches: bool,
}

/// Largest absolute difference between two commands' numeric fields;
/// infinite when their structure differs.
pub fn command_error(a: &WholeBodyCommand, b: &WholeBodyCommand) -> f64 {
    let mut err = (a.base.linear_velocity - b.base.linear_velocity).amax();
    err = err.max((a.base.angular_velocity - b.base.angular_velocity).abs());
    match (&a.ee_target, &b.ee_target) {
        (Some(x), Some(y)) => {
            err = err.max((x.rotation - y.rotation).amax()).max((x.translation - y.translation).amax());
        }
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    if a.gripper != b.gripper {
        return f64::INFINITY;
    }
    match (&a.body, &b.body) {
        (Some(x), Some(y)) => err.max((x.height_rate - y.height_rate).abs()).max((x.pitch_rate - y.pitch_rate).abs()),
        (None, None) => err,
        _ => f64::INFINITY,
    }
}

/// Re-runs the trial an autonomously recorded episode came from and
/// compares the regenerated frames with the recorded ones.
pub fn replay_check(setup: &Setup, episode: &Episode, tolerance: f64) -> Result<ReplayCheck, HarnessError> {
    let origin = EpisodeOrigin::parse(&episode.metadata.scene_id)
        .ok_or_else(|| HarnessError::Invalid(format!("episode scene id `{}` is not replayable", episode.metadata.scene_id)))?;
    if origin.scenario != setup.scenario.name {
        return Err(HarnessError::Invalid(format!(
            "episode comes from scenario `{}`, not `{}`",
            origin.scenario, setup.scenario.name
        )));
    }
    let opts = TrialOptions {
        mode: Some(origin.mode),
        nominal: origin.nominal,
        record: true,
        record_features: false,
    };
    let outcome = run_trial(setup, origin.trial, &opts)?;
    let replayed = outcome
        .episodes
        .iter()
        .find(|e| e.metadata.operator_id == episode.metadata.operator_id)
        .ok_or_else(|| HarnessError::Invalid(format!("replay produced no `{}` episode", episode.metadata.operator_id)))?;
    let mut max_action_error: f64 = 0.0;
    let mut max_proprio_error: f64 = 0.0;
    if replayed.frames.len() != episode.frames.len() {
        max_action_error = f64::INFINITY;
    }
    for (a, b) in episode.frames.iter().zip(&replayed.frames) {
        max_action_error = max_action_error.max(command_error(&a.action, &b.action));
        let p = a
            .observation
            .proprio
            .iter()
            .zip(&b.observation.proprio)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        max_proprio_error = max_proprio_error.max(p);
    }
    Ok(ReplayCheck {
        frames: episode.frames.len(),
        max_action_error,
        max_proprio_error,
        tolerance,
        matches: max_action_error <= tolerance && max_proprio_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_round_trips() {
        let o = EpisodeOrigin {
            scenario: "a:b".into(),
            trial: 4,
            mode: ControlMode::Decoupled,
            nominal: true,
        };
        assert_eq!(EpisodeOrigin::parse(&o.scene_id()), Some(o));
        assert_eq!(EpisodeOrigin::parse("teleop"), None);
    }

    #[test]
    fn decoupled_driver_moves_body_then_releases() {
        use crate::simworld::{top_down, PlanarPose};
        let cfg = RobotConfig::default();
        let sim = Simulator::new(cfg.clone());
        let mut robot = RobotState::new(&cfg, PlanarPose::default(), ControlMode::Decoupled);
        let mut target = top_down(0.0);
        target.translation = nalgebra::Vector3::new(0.45, 0.0, -0.45);
        let cmd = WholeBodyCommand {
            ee_target: Some(target),
            ..WholeBodyCommand::hold()
        };
        let driver = DecoupledDriver::default();
        let mut world = crate::simworld::WorldState {
            robot: robot.clone(),
            objects: vec![],
            waypoints: Default::default(),
            time: 0.0,
            rng_seed: 0,
            background: "background".into(),
        };
        let mut ticks = 0;
        while let Some(body) = driver.body_command(&cfg, &world.robot, &cmd, cfg.dt) {
            assert!(body.ee_target.is_none());
            world = sim.step(&world, &body, cfg.dt);
            ticks += 1;
            assert!(ticks < 500);
        }
        assert!(ticks > 0);
        robot = world.robot;
        assert!(robot.body_height < cfg.body.nominal_height || robot.body_pitch != 0.0);
    }
}
