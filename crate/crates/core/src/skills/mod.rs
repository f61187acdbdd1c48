//! Skill library: a uniform step contract, heuristic manipulation and
//! navigation skills, the chunked imitation policy and the end-signal
//! termination detector.

pub mod library;
pub mod manipulation;
pub mod navigate;
pub mod policy;
pub mod termination;

pub use library::{Behavior, Precondition, SkillKind, SkillLibrary, SkillSpec};
pub use manipulation::{Manipulation, ManipulationParams, ManipulationSkill};
pub use navigate::{navigate_waypoint, NavOutput, PdGains, PdState};
pub use policy::{policy_features, temporal_ensemble, ActionChunk, ChunkedPolicy, PolicyEntry, PolicyError, TemporalEnsembler};
pub use termination::{detect_termination, label_end_signal, TerminationConfig, TerminationDetector};

use crate::attention::{cross_attention, EmbeddingBank, TextEmbedding};
use crate::simworld::{CameraId, Observation, PlanarPose, WholeBodyCommand};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct SkillStepOutput {
    pub command: WholeBodyCommand,
    /// In `[0, 1]`.
    pub end_signal: f64,
}

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("no embedding for text query `{0}`")]
    MissingEmbedding(String),
    #[error("skill `{0}` has no text queries")]
    NoQueries(String),
    #[error("skill `{0}` needs a policy artifact")]
    MissingPolicy(String),
    #[error("navigation skill needs a target waypoint")]
    MissingWaypoint,
    #[error("skill configuration: {0}")]
    Config(String),
}

/// A stateful procedure producing one control decision per tick.
pub trait Skill: Send {
    fn name(&self) -> &str;
    /// Name of the current internal stage.
    fn stage(&self) -> &str;
    /// Cameras the next call to [`Skill::step`] needs rendered.
    fn sensing(&self) -> Vec<CameraId>;
    fn step(&mut self, obs: &Observation) -> SkillStepOutput;
    /// Set once the skill has given up.
    fn failure(&self) -> Option<&str> {
        None
    }
}

/// Base PD follower wrapped as a skill.
#[derive(Debug, Clone)]
pub struct NavigateSkill {
    name: String,
    target: PlanarPose,
    gains: PdGains,
    dt: f64,
    state: Option<PdState>,
    done: bool,
}

impl NavigateSkill {
    pub fn new(name: &str, target: PlanarPose, gains: PdGains, dt: f64) -> Self {
        Self {
            name: name.into(),
            target,
            gains,
            dt,
            state: None,
            done: false,
        }
    }
}

impl Skill for NavigateSkill {
    fn name(&self) -> &str {
        &self.name
    }

    fn stage(&self) -> &str {
        if self.done {
            "done"
        } else {
            "drive"
        }
    }

    fn sensing(&self) -> Vec<CameraId> {
        Vec::new()
    }

    fn step(&mut self, obs: &Observation) -> SkillStepOutput {
        if self.done {
            return SkillStepOutput {
                command: WholeBodyCommand::hold(),
                end_signal: 1.0,
            };
        }
        let out = navigate_waypoint(&obs.proprio.base, &self.target, &self.gains, self.state, self.dt);
        self.state = Some(out.state);
        self.done = out.done;
        SkillStepOutput {
            command: WholeBodyCommand {
                base: out.command,
                ..WholeBodyCommand::hold()
            },
            end_signal: if out.done { 1.0 } else { 0.0 },
        }
    }
}

/// Chunked nearest-neighbour policy conditioned on head-camera attention
/// for the first text query.
#[derive(Debug, Clone)]
pub struct ImitationSkill {
    name: String,
    policy: Arc<ChunkedPolicy>,
    query: TextEmbedding,
    ensembler: TemporalEnsembler,
    failure: Option<String>,
}

impl ImitationSkill {
    pub fn new(name: &str, policy: Arc<ChunkedPolicy>, query: TextEmbedding) -> Self {
        let decay = policy.ensemble_decay;
        Self {
            name: name.into(),
            policy,
            query,
            ensembler: TemporalEnsembler::new(decay),
            failure: None,
        }
    }
}

impl Skill for ImitationSkill {
    fn name(&self) -> &str {
        &self.name
    }

    fn stage(&self) -> &str {
        "policy"
    }

    fn sensing(&self) -> Vec<CameraId> {
        vec![CameraId::Head]
    }

    fn step(&mut self, obs: &Observation) -> SkillStepOutput {
        let hold = SkillStepOutput {
            command: WholeBodyCommand::hold(),
            end_signal: 0.0,
        };
        if self.failure.is_some() {
            return hold;
        }
        let att = obs.head.as_ref().and_then(|f| cross_attention(&f.features, &self.query).ok());
        let features = policy_features(&obs.proprio.to_vec(), att.as_ref());
        match self.policy.infer(&features) {
            Ok(chunk) => self.ensembler.push(chunk),
            Err(e) => {
                self.failure = Some(e.to_string());
                return hold;
            }
        }
        match self.ensembler.next() {
            Some((command, end_signal)) => SkillStepOutput { command, end_signal },
            None => hold,
        }
    }

    fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }
}

/// Builds a runnable skill. Heuristic skills localize their last text
/// query; imitation skills condition on their first.
pub fn instantiate(
    spec: &SkillSpec,
    queries: &[String],
    bank: &EmbeddingBank,
    policy: Option<Arc<ChunkedPolicy>>,
    waypoint: Option<PlanarPose>,
    dt: f64,
) -> Result<Box<dyn Skill>, SkillError> {
    let embed = |label: &String| bank.embedding(label).map_err(|_| SkillError::MissingEmbedding(label.clone()));
    let manipulation = |kind: Manipulation| -> Result<Box<dyn Skill>, SkillError> {
        let query = queries.last().ok_or_else(|| SkillError::NoQueries(spec.name.clone()))?;
        let params = ManipulationParams::for_behavior(kind, &spec.parameters)?;
        Ok(Box::new(ManipulationSkill::new(&spec.name, kind, params, embed(query)?)))
    };
    match spec.behavior {
        Behavior::Grasp => manipulation(Manipulation::Grasp),
        Behavior::Place => manipulation(Manipulation::Place),
        Behavior::Press => manipulation(Manipulation::Press),
        Behavior::Navigate => {
            let target = waypoint.ok_or(SkillError::MissingWaypoint)?;
            Ok(Box::new(NavigateSkill::new(&spec.name, target, PdGains::default(), dt)))
        }
        Behavior::Imitation => {
            let policy = policy.ok_or_else(|| SkillError::MissingPolicy(spec.name.clone()))?;
            let query = queries.first().ok_or_else(|| SkillError::NoQueries(spec.name.clone()))?;
            Ok(Box::new(ImitationSkill::new(&spec.name, policy, embed(query)?)))
        }
    }
}
