//! Skill library manifest.
//!
//! ```toml
//! schema_version = 1
//!
//! [[skills]]
//! name = "pick_up"
//! kind = "analytical"
//! behavior = "grasp"
//! description = "pick up an object from a table or the ground"
//! keywords = ["pick", "grasp", "collect"]
//! text_queries = ["{object}"]
//! expected_preconditions = ["gripper_empty"]
//! parameters = { approach_height = 0.15 }
//!
//! [[skills]]
//! name = "pick_up_learned"
//! kind = "learned"
//! behavior = "imitation"
//! policy = "policies/pick_up.json"
//! ```

use crate::simworld::config::read_toml;
use crate::simworld::{ConfigError, WorldState};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    Learned,
    Analytical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Grasp,
    Place,
    Press,
    Navigate,
    Imitation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precondition {
    GripperEmpty,
    Holding,
}

impl Precondition {
    pub fn holds(&self, world: &WorldState) -> bool {
        match self {
            Precondition::GripperEmpty => world.attached().is_none(),
            Precondition::Holding => world.attached().is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub name: String,
    pub kind: SkillKind,
    pub behavior: Behavior,
    #[serde(default)]
    pub description: String,
    /// Words the planner matches against task text.
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Query templates; `{object}` and `{target}` are filled from the task.
    #[serde(default)]
    pub text_queries: Vec<String>,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub expected_preconditions: Vec<Precondition>,
    /// Policy artifact, relative to the manifest directory.
    #[serde(default)]
    pub policy: Option<PathBuf>,
}

impl SkillSpec {
    pub fn resolve_queries(&self, object: Option<&str>, target: Option<&str>) -> Vec<String> {
        self.text_queries
            .iter()
            .map(|q| {
                let mut q = q.clone();
                if let Some(o) = object {
                    q = q.replace("{object}", o);
                }
                if let Some(t) = target {
                    q = q.replace("{target}", t);
                }
                q
            })
            .collect()
    }

    pub fn preconditions_hold(&self, world: &WorldState) -> Result<(), Precondition> {
        match self.expected_preconditions.iter().find(|p| !p.holds(world)) {
            Some(p) => Err(*p),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    schema_version: u32,
    #[serde(default)]
    skills: Vec<SkillSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillLibrary {
    pub skills: Vec<SkillSpec>,
    /// Directory relative policy paths are resolved against.
    pub base_dir: PathBuf,
}

impl SkillLibrary {
    pub fn new(skills: Vec<SkillSpec>, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let lib = Self {
            skills,
            base_dir: base_dir.into(),
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let file: ManifestFile = read_toml(path)?;
        Self::from_manifest(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let file: ManifestFile = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: "<inline>".into(),
            source,
        })?;
        Self::from_manifest(file, base_dir)
    }

    fn from_manifest(file: ManifestFile, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        if file.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                expected: MANIFEST_SCHEMA_VERSION,
                found: file.schema_version,
            });
        }
        Self::new(file.skills, base_dir)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for s in &self.skills {
            if s.name.is_empty() {
                return Err(ConfigError::Invalid("skill with empty name".into()));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate skill `{}`", s.name)));
            }
            let needs_policy = s.kind == SkillKind::Learned || s.behavior == Behavior::Imitation;
            if needs_policy {
                let Some(p) = &s.policy else {
                    return Err(ConfigError::Invalid(format!("learned skill `{}` has no policy artifact", s.name)));
                };
                let full = self.base_dir.join(p);
                if !full.is_file() {
                    return Err(ConfigError::Invalid(format!(
                        "learned skill `{}` references missing policy {}",
                        s.name,
                        full.display()
                    )));
                }
            }
            if matches!(s.behavior, Behavior::Grasp | Behavior::Place | Behavior::Press) && s.text_queries.is_empty() {
                return Err(ConfigError::Invalid(format!("skill `{}` needs at least one text query", s.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&SkillSpec> {
        self.skills.iter().find(|s| s.name == name)
    }

    pub fn policy_path(&self, spec: &SkillSpec) -> Option<PathBuf> {
        spec.policy.as_ref().map(|p| self.base_dir.join(p))
    }

    /// One line per skill, as shown to the planner.
    pub fn describe(&self) -> String {
        self.skills
            .iter()
            .map(|s| {
                format!(
                    "- {} ({}): {} [queries: {}]\n",
                    s.name,
                    match s.kind {
                        SkillKind::Learned => "learned",
                        SkillKind::Analytical => "analytical",
                    },
                    s.description,
                    s.text_queries.join(", ")
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"
schema_version = 1

[[skills]]
name = "pick_up"
kind = "analytical"
behavior = "grasp"
keywords = ["pick"]
text_queries = ["{object}"]
expected_preconditions = ["gripper_empty"]

[[skills]]
name = "place"
kind = "analytical"
behavior = "place"
text_queries = ["{target}"]
"#;

    #[test]
    fn parses_and_resolves() {
        let lib = SkillLibrary::from_toml_str(MANIFEST, ".").unwrap();
        let s = lib.get("place").unwrap();
        assert_eq!(s.resolve_queries(Some("trash"), Some("trash bin")), vec!["trash bin"]);
        assert!(lib.describe().contains("pick_up (analytical)"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let doubled = format!("{MANIFEST}\n[[skills]]\nname = \"place\"\nkind = \"analytical\"\nbehavior = \"navigate\"\n");
        assert!(SkillLibrary::from_toml_str(&doubled, ".").is_err());
    }

    #[test]
    fn learned_skill_needs_existing_policy() {
        let text = "schema_version = 1\n[[skills]]\nname = \"x\"\nkind = \"learned\"\nbehavior = \"imitation\"\npolicy = \"nope.json\"\n";
        assert!(SkillLibrary::from_toml_str(text, "/nonexistent").is_err());
    }

    #[test]
    fn schema_version_checked() {
        assert!(matches!(
            SkillLibrary::from_toml_str("schema_version = 2", "."),
            Err(ConfigError::SchemaVersion { .. })
        ));
    }
}
