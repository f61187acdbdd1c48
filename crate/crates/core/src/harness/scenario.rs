//! Scenario files and the loaded evaluation setup.
//!
//! ```toml
//! schema_version = 1
//! name = "trash"
//! robot = "../robot.toml"          # paths are relative to this file
//! world = "../worlds/trash.toml"
//! scene = "../scenes/trash.toml"
//! skills = "../skills.toml"
//! embeddings = "../embeddings.bin"
//! instruction = "clean the trash in the hallway"
//! start_node = "entrance"
//! trials = 10
//! seed = 7
//! control_mode = "whole_body"      # optional; defaults to the world's
//!
//! [goal]
//! kind = "in_receptacle"           # or "holding", "button_pressed"
//! object = "trash_1"
//! receptacle = "bin"
//!
//! [budget]
//! skill_seconds = 30.0
//! instruction_seconds = 300.0
//!
//! [perturbation]
//! placement_sigma = 0.15
//! start_sigma = 0.05
//! start_yaw_sigma = 0.05
//! backgrounds = ["carpet", "tiles"]
//! substitutions = { trash = ["bottle", "can"] }
//!
//! [evaluator]
//! kind = "mock"                    # or "fixture" (with path), "http"
//! ```

use super::HarnessError;
use crate::attention::{load_embedding_bank, EmbeddingBank};
use crate::llm::{Evaluator, FixtureBackend, HttpChatClient, LlmEvaluator, MockEvaluator};
use crate::planner::{FinePlanConfig, SceneFile};
use crate::simworld::config::read_toml;
use crate::simworld::{ConfigError, ControlMode, RobotConfig, WorldConfig, WorldState};
use crate::skills::{ChunkedPolicy, SkillKind, SkillLibrary, TerminationConfig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Success condition, evaluated on the final world state only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    /// The object is in the gripper with its origin at least this high.
    Holding { object: String, min_height: f64 },
    /// The object rests, released, on the receptacle's top.
    InReceptacle { object: String, receptacle: String },
    ButtonPressed { button: String },
}

impl Goal {
    pub fn satisfied(&self, world: &WorldState) -> bool {
        match self {
            Goal::Holding { object, min_height } => world
                .object(object)
                .is_some_and(|o| o.attached_to_gripper && o.pose.translation.z >= *min_height),
            Goal::InReceptacle { object, receptacle } => {
                let (Some(o), Some(r)) = (world.object(object), world.object(receptacle)) else {
                    return false;
                };
                let Some(rec) = &r.receptacle else { return false };
                let d = o.pose.translation - r.pose.translation;
                !o.attached_to_gripper
                    && d.x.hypot(d.y) <= rec.radius
                    && (d.z - o.half_height).abs() < 1e-6
            }
            Goal::ButtonPressed { button } => world
                .object(button)
                .and_then(|o| o.button.as_ref())
                .is_some_and(|b| b.pressed),
        }
    }

    fn object_ids(&self) -> Vec<&str> {
        match self {
            Goal::Holding { object, .. } => vec![object],
            Goal::InReceptacle { object, receptacle } => vec![object, receptacle],
            Goal::ButtonPressed { button } => vec![button],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub skill_seconds: f64,
    pub instruction_seconds: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            skill_seconds: 30.0,
            instruction_seconds: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    /// Standard deviation of the planar offset of graspable objects, m.
    pub placement_sigma: f64,
    pub start_sigma: f64,
    pub start_yaw_sigma: f64,
    /// Background labels to draw from; empty keeps the world's.
    pub backgrounds: Vec<String>,
    /// Category → held-out replacement labels.
    pub substitutions: BTreeMap<String, Vec<String>>,
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        *self == Self::none()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSpec {
    #[default]
    Mock,
    Fixture {
        path: PathBuf,
    },
    /// Live endpoint configured from the environment.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub robot: PathBuf,
    pub world: PathBuf,
    pub scene: PathBuf,
    pub skills: PathBuf,
    pub embeddings: PathBuf,
    pub instruction: String,
    pub start_node: String,
    pub goal: Goal,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub control_mode: Option<ControlMode>,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub planner: FinePlanConfig,
    #[serde(default)]
    pub termination: TerminationConfig,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
    /// Directory the relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_trials() -> usize {
    10
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut s: Self = read_toml(path)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                expected: SCENARIO_SCHEMA_VERSION,
                found: self.schema_version,
            }
            .into());
        }
        let b = &self.budget;
        if !(b.skill_seconds > 0.0 && b.instruction_seconds > 0.0) {
            return Err(HarnessError::Invalid("budgets must be positive".into()));
        }
        let p = &self.perturbation;
        if [p.placement_sigma, p.start_sigma, p.start_yaw_sigma].iter().any(|s| !(*s >= 0.0)) {
            return Err(HarnessError::Invalid("perturbation sigmas must be non-negative".into()));
        }
        if p.substitutions.values().any(Vec::is_empty) {
            return Err(HarnessError::Invalid("substitution lists must not be empty".into()));
        }
        self.termination.validate().map_err(HarnessError::Invalid)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Everything a trial needs, loaded and cross-checked once.
pub struct Setup {
    pub scenario: Scenario,
    pub robot: RobotConfig,
    pub world: WorldConfig,
    pub scene: SceneFile,
    pub skills: SkillLibrary,
    pub bank: EmbeddingBank,
    pub evaluator: Box<dyn Evaluator>,
    pub policies: BTreeMap<String, Arc<ChunkedPolicy>>,
}

impl Setup {
    pub fn load(scenario: Scenario) -> Result<Self, HarnessError> {
        let robot = RobotConfig::load(scenario.resolve(&scenario.robot))?;
        let world = WorldConfig::load(scenario.resolve(&scenario.world))?;
        let scene = SceneFile::load(scenario.resolve(&scenario.scene))?;
        let skills = SkillLibrary::load(scenario.resolve(&scenario.skills))?;
        let bank = load_embedding_bank(scenario.resolve(&scenario.embeddings))?;
        let evaluator: Box<dyn Evaluator> = match &scenario.evaluator {
            EvaluatorSpec::Mock => Box::new(MockEvaluator),
            EvaluatorSpec::Fixture { path } => Box::new(LlmEvaluator::new(FixtureBackend::load(scenario.resolve(path))?)),
            EvaluatorSpec::Http => Box::new(LlmEvaluator::new(HttpChatClient::from_env()?)),
        };
        let mut policies = BTreeMap::new();
        for spec in skills.skills.iter().filter(|s| s.kind == SkillKind::Learned) {
            if let Some(path) = skills.policy_path(spec) {
                policies.insert(spec.name.clone(), Arc::new(ChunkedPolicy::load(&path)?));
            }
        }
        let setup = Self {
            scenario,
            robot,
            world,
            scene,
            skills,
            bank,
            evaluator,
            policies,
        };
        setup.check()?;
        Ok(setup)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::load(Scenario::load(path)?)
    }

    /// Labels the renderer may need must all have embeddings; goal objects
    /// and the start node must exist.
    fn check(&self) -> Result<(), HarnessError> {
        let p = &self.scenario.perturbation;
        let mut labels: BTreeSet<&str> = BTreeSet::new();
        labels.insert(&self.world.background);
        labels.extend(self.world.objects.iter().map(|o| o.category.as_str()));
        labels.extend(p.backgrounds.iter().map(String::as_str));
        labels.extend(p.substitutions.values().flatten().map(String::as_str));
        if let Some(missing) = labels.iter().find(|l| self.bank.vector(l).is_none()) {
            return Err(HarnessError::Invalid(format!("embedding bank has no entry for `{missing}`")));
        }
        for id in self.scenario.goal.object_ids() {
            if !self.world.objects.iter().any(|o| o.id == id) {
                return Err(HarnessError::Invalid(format!("goal refers to unknown object `{id}`")));
            }
        }
        let graph = self.scene.build()?;
        if graph.node(&self.scenario.start_node).is_none() {
            return Err(HarnessError::Invalid(format!("unknown start node `{}`", self.scenario.start_node)));
        }
        Ok(())
    }

    pub fn control_mode(&self) -> ControlMode {
        self.scenario.control_mode.unwrap_or(self.world.control_mode)
    }
}
