//! Evaluator backends for the planner: a deterministic keyword mock, a
//! fixture replay backend and a minimal chat-completion HTTP client.

mod http;
mod mock;
mod parse;

pub use http::{HttpChatClient, ENV_API_KEY, ENV_AUDIT, ENV_ENDPOINT, ENV_MODEL};
pub use mock::{content_words, task_arguments, MockEvaluator, STOPWORDS};
pub use parse::{parse_score, parse_skill_choice, parse_task_list};

use crate::skills::SkillLibrary;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const DECOMPOSE_PROMPT: &str = include_str!("../../prompts/decompose.txt");
pub const SCORE_NODE_PROMPT: &str = include_str!("../../prompts/score_node.txt");
pub const SELECT_SKILL_PROMPT: &str = include_str!("../../prompts/select_skill.txt");

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM configuration: {0}")]
    Config(String),
    #[error("LLM request timed out after {0:.1} s")]
    Timeout(f64),
    #[error("LLM endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("LLM transport: {0}")]
    Network(String),
    #[error("malformed LLM response body: {0}")]
    Malformed(String),
    #[error("could not parse LLM output ({reason}); raw text: {raw:?}")]
    Parse { reason: String, raw: String },
    #[error("no fixture for request {0}")]
    FixtureMissing(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorRequest {
    pub messages: Vec<Message>,
    /// Always 0 for planning calls.
    pub temperature: f64,
    pub max_tokens: u32,
}

impl EvaluatorRequest {
    pub fn planning(prompt: String, max_tokens: u32) -> Self {
        Self {
            messages: vec![Message {
                role: Role::User,
                content: prompt,
            }],
            temperature: 0.0,
            max_tokens,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("request serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorResponse {
    pub text: String,
    pub usage: Usage,
}

/// A chat-completion transport.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse, LlmError>;
}

/// Replays recorded responses keyed by [`EvaluatorRequest::hash`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureBackend {
    pub responses: BTreeMap<String, String>,
}

impl FixtureBackend {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        let responses = serde_json::from_str(&text).map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { responses })
    }

    pub fn insert(&mut self, request: &EvaluatorRequest, text: &str) {
        self.responses.insert(request.hash(), text.to_string());
    }
}

impl ChatBackend for FixtureBackend {
    fn complete(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse, LlmError> {
        let hash = request.hash();
        self.responses
            .get(&hash)
            .map(|text| EvaluatorResponse {
                text: text.clone(),
                usage: Usage::default(),
            })
            .ok_or(LlmError::FixtureMissing(hash))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: String,
    /// In `[0, 1]`.
    pub likelihood: f64,
    pub rationale: String,
}

/// A skill picked for a task, with the arguments used to fill its query
/// templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillChoice {
    pub skill: String,
    pub object: Option<String>,
    pub target: Option<String>,
}

/// The planner's heuristic evaluator.
pub trait Evaluator: Send + Sync {
    /// Coarse decomposition of an instruction into ordered tasks.
    fn decompose(&self, instruction: &str, skills: &SkillLibrary) -> Result<Vec<String>, LlmError>;
    /// Likelihood that a place is the location for a task. `node` is only
    /// echoed into the result.
    fn score_node(&self, task: &str, node: &str, description: &str, objects: &[String]) -> Result<NodeScore, LlmError>;
    fn select_skill(&self, task: &str, skills: &SkillLibrary) -> Result<Option<SkillChoice>, LlmError>;
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let body: String = template
        .lines()
        .filter(|l| !l.starts_with("# prompt:"))
        .map(|l| format!("{l}\n"))
        .collect();
    pairs
        .iter()
        .fold(body, |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

pub fn decompose_prompt(instruction: &str, skills: &SkillLibrary) -> String {
    fill(DECOMPOSE_PROMPT, &[("skills", skills.describe().trim_end()), ("instruction", instruction)])
}

pub fn score_prompt(task: &str, description: &str, objects: &[String]) -> String {
    fill(
        SCORE_NODE_PROMPT,
        &[("task", task), ("description", description), ("objects", &objects.join(", "))],
    )
}

pub fn select_skill_prompt(task: &str, skills: &SkillLibrary) -> String {
    fill(SELECT_SKILL_PROMPT, &[("skills", skills.describe().trim_end()), ("task", task)])
}

/// Evaluator that asks a chat backend, with strict output grammars and a
/// single retry on parse failure.
pub struct LlmEvaluator<B: ChatBackend> {
    pub backend: B,
}

impl<B: ChatBackend> LlmEvaluator<B> {
    pub fn new(backend: B) -> Self {
        Self { backend }
    }

    fn ask<T>(&self, prompt: String, max_tokens: u32, parse: impl Fn(&str) -> Result<T, LlmError>) -> Result<T, LlmError> {
        let request = EvaluatorRequest::planning(prompt, max_tokens);
        let first = self.backend.complete(&request)?;
        match parse(&first.text) {
            Ok(v) => Ok(v),
            Err(_) => parse(&self.backend.complete(&request)?.text),
        }
    }
}

impl<B: ChatBackend> Evaluator for LlmEvaluator<B> {
    fn decompose(&self, instruction: &str, skills: &SkillLibrary) -> Result<Vec<String>, LlmError> {
        self.ask(decompose_prompt(instruction, skills), 512, parse_task_list)
    }

    fn score_node(&self, task: &str, node: &str, description: &str, objects: &[String]) -> Result<NodeScore, LlmError> {
        let likelihood = self.ask(score_prompt(task, description, objects), 8, parse_score)?;
        Ok(NodeScore {
            node: node.into(),
            likelihood: likelihood.clamp(0.0, 1.0),
            rationale: "llm".into(),
        })
    }

    fn select_skill(&self, task: &str, skills: &SkillLibrary) -> Result<Option<SkillChoice>, LlmError> {
        self.ask(select_skill_prompt(task, skills), 64, parse_skill_choice)
    }
}
