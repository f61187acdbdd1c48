//! Keyword evaluator used by tests and offline runs.
//!
//! Text normalization: lowercase, split on anything that is not a letter
//! or digit, exact word match (no stemming). Content words are the
//! normalized words minus [`STOPWORDS`], deduplicated in order.
//!
//! Decomposition rules, tried per clause. Clauses are separated by
//! "and then", "then", ", then" or ";".
//!
//! | clause pattern                                  | tasks                                                                                  |
//! |-------------------------------------------------|----------------------------------------------------------------------------------------|
//! | `pick up the X from\|in\|on the Y`              | `navigate to Y`, `pick up the X`                                                       |
//! | starts with navigate/go to/pick up/place/put    | the clause itself                                                                      |
//! | `press the ADA button`                          | the clause itself                                                                      |
//! | `clean\|collect the X in\|from the Y`           | `navigate to Y`, `pick up the X`, `navigate to trash bin`, `place X in the trash bin`  |
//! | `press the Y button`                            | `navigate to Y`, `press the ADA button`                                                |
//! | anything else                                   | the clause itself                                                                      |
//!
//! Node score: matched task content words / task content words, with the
//! node's description and object list as the word pool; 0 when the task has
//! no content words.
//!
//! Skill choice: the skill whose keywords overlap most with the task words
//! (ties to manifest order; none when nothing overlaps). Arguments come from
//! [`task_arguments`].

use super::{Evaluator, LlmError, NodeScore, SkillChoice};
use crate::skills::SkillLibrary;
use std::collections::BTreeSet;

pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "to", "in", "into", "inside", "on", "onto", "at", "from", "of", "with", "near", "by", "up", "it",
    "them", "and", "then", "navigate", "go", "move", "walk", "drive", "pick", "grab", "grasp", "collect", "place",
    "put", "drop", "throw", "press", "push", "clean", "tidy",
];

const LEADING: &[&str] = &[
    "navigate", "go", "move", "walk", "drive", "pick", "up", "grab", "grasp", "collect", "place", "put", "drop",
    "throw", "press", "push", "the", "a", "an", "to",
];
const SPLIT: &[&str] = &["in", "into", "inside", "on", "onto", "from"];
const ARTICLES: &[&str] = &["the", "a", "an"];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn content_words(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    words(text)
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

fn join_without_articles(tokens: &[&str]) -> Option<String> {
    let kept: Vec<&str> = tokens
        .iter()
        .copied()
        .filter(|t| !ARTICLES.contains(&t.to_lowercase().as_str()))
        .collect();
    (!kept.is_empty()).then(|| kept.join(" "))
}

/// `(object, target)` of a task: leading verbs, particles and articles are
/// dropped, then the rest splits at the first of in/into/on/onto/from.
/// Case is preserved.
pub fn task_arguments(task: &str) -> (Option<String>, Option<String>) {
    let tokens: Vec<&str> = task
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .collect();
    let start = tokens
        .iter()
        .position(|t| !LEADING.contains(&t.to_lowercase().as_str()))
        .unwrap_or(tokens.len());
    let rest = &tokens[start..];
    match rest.iter().position(|t| SPLIT.contains(&t.to_lowercase().as_str())) {
        Some(i) => (join_without_articles(&rest[..i]), join_without_articles(&rest[i + 1..])),
        None => (join_without_articles(rest), None),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockEvaluator;

fn split_clauses(instruction: &str) -> Vec<String> {
    let mut text = format!(" {} ", instruction.trim().trim_end_matches(['.', '!']));
    for sep in [", and then ", " and then ", ", then ", " then ", ";"] {
        text = text.replace(sep, "\u{1f}");
    }
    text.split('\u{1f}')
        .map(|c| c.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|c| !c.is_empty())
        .collect()
}

/// Text between `prefix` and the first of `separators`, on the lowercased
/// clause, returned from the original clause so case survives.
fn capture<'a>(clause: &'a str, prefix: &str, separators: &[&str]) -> Option<(&'a str, &'a str)> {
    let lower = clause.to_lowercase();
    if !lower.starts_with(prefix) {
        return None;
    }
    let body = &lower[prefix.len()..];
    separators.iter().find_map(|sep| {
        body.find(sep).map(|i| {
            let a = prefix.len() + i;
            (clause[prefix.len()..a].trim(), clause[a + sep.len()..].trim())
        })
    })
}

fn strip_article(s: &str) -> &str {
    for a in ["the ", "a ", "an "] {
        if s.len() > a.len() && s[..a.len()].eq_ignore_ascii_case(a) {
            return s[a.len()..].trim();
        }
    }
    s
}

fn decompose_clause(clause: &str) -> Vec<String> {
    let lower = clause.to_lowercase();
    if let Some((x, y)) = capture(clause, "pick up the ", &[" from ", " in ", " on "]) {
        return vec![format!("navigate to {}", strip_article(y)), format!("pick up the {x}")];
    }
    let atomic = ["navigate ", "go to ", "pick up ", "place ", "put "];
    if atomic.iter().any(|p| lower.starts_with(p)) || lower == "press the ada button" {
        return vec![clause.to_string()];
    }
    for verb in ["clean the ", "collect the "] {
        if let Some((x, y)) = capture(clause, verb, &[" in ", " from "]) {
            let y = strip_article(y);
            return vec![
                format!("navigate to {y}"),
                format!("pick up the {x}"),
                "navigate to trash bin".to_string(),
                format!("place {x} in the trash bin"),
            ];
        }
    }
    if let Some(y) = lower.strip_prefix("press the ").and_then(|r| r.strip_suffix(" button")) {
        let y = &clause["press the ".len().."press the ".len() + y.len()];
        return vec![format!("navigate to {y}"), "press the ADA button".to_string()];
    }
    vec![clause.to_string()]
}

impl MockEvaluator {
    pub fn decompose_text(&self, instruction: &str) -> Vec<String> {
        split_clauses(instruction).iter().flat_map(|c| decompose_clause(c)).collect()
    }

    pub fn likelihood(&self, task: &str, description: &str, objects: &[String]) -> f64 {
        let task_words = content_words(task);
        if task_words.is_empty() {
            return 0.0;
        }
        let pool: BTreeSet<String> = words(&format!("{description} {}", objects.join(" "))).into_iter().collect();
        let matched = task_words.iter().filter(|w| pool.contains(*w)).count();
        (matched as f64 / task_words.len() as f64).clamp(0.0, 1.0)
    }
}

impl Evaluator for MockEvaluator {
    fn decompose(&self, instruction: &str, _skills: &SkillLibrary) -> Result<Vec<String>, LlmError> {
        let tasks = self.decompose_text(instruction);
        if tasks.is_empty() {
            return Err(LlmError::Parse {
                reason: "empty instruction".into(),
                raw: instruction.into(),
            });
        }
        Ok(tasks)
    }

    fn score_node(&self, task: &str, node: &str, description: &str, objects: &[String]) -> Result<NodeScore, LlmError> {
        let likelihood = self.likelihood(task, description, objects);
        Ok(NodeScore {
            node: node.into(),
            likelihood,
            rationale: format!("keyword overlap {likelihood:.3}"),
        })
    }

    fn select_skill(&self, task: &str, skills: &SkillLibrary) -> Result<Option<SkillChoice>, LlmError> {
        let task_words: BTreeSet<String> = words(task).into_iter().collect();
        let mut best: Option<(usize, &str)> = None;
        for s in &skills.skills {
            let hits = s
                .keywords
                .iter()
                .filter(|k| task_words.contains(&k.to_lowercase()))
                .count();
            if hits > 0 && best.map_or(true, |(b, _)| hits > b) {
                best = Some((hits, &s.name));
            }
        }
        Ok(best.map(|(_, name)| {
            let (object, target) = task_arguments(task);
            SkillChoice {
                skill: name.to_string(),
                object,
                target,
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_decomposition_verbatim() {
        assert_eq!(
            MockEvaluator.decompose_text("clean the trash in the hallway"),
            vec!["navigate to hallway", "pick up the trash", "navigate to trash bin", "place trash in the trash bin"]
        );
    }

    #[test]
    fn atomic_and_button_rules() {
        assert_eq!(MockEvaluator.decompose_text("navigate to kitchen"), vec!["navigate to kitchen"]);
        assert_eq!(
            MockEvaluator.decompose_text("press the door button"),
            vec!["navigate to door", "press the ADA button"]
        );
        assert_eq!(MockEvaluator.decompose_text("press the ADA button"), vec!["press the ADA button"]);
        assert_eq!(
            MockEvaluator.decompose_text("pick up the cup from the table, then navigate to kitchen"),
            vec!["navigate to table", "pick up the cup", "navigate to kitchen"]
        );
    }

    #[test]
    fn keyword_scores() {
        let objs = vec!["trash".to_string(), "bench".to_string()];
        assert_eq!(MockEvaluator.likelihood("pick up the trash", "", &objs), 1.0);
        assert_eq!(MockEvaluator.likelihood("pick up the cup", "a hallway", &objs), 0.0);
        assert_eq!(MockEvaluator.likelihood("place trash in the trash bin", "", &objs), 0.5);
        assert_eq!(MockEvaluator.likelihood("pick up", "", &objs), 0.0);
    }

    #[test]
    fn arguments() {
        assert_eq!(task_arguments("pick up the trash"), (Some("trash".into()), None));
        assert_eq!(
            task_arguments("place trash in the trash bin"),
            (Some("trash".into()), Some("trash bin".into()))
        );
        assert_eq!(task_arguments("press the ADA button"), (Some("ADA button".into()), None));
        assert_eq!(task_arguments("navigate to hallway"), (Some("hallway".into()), None));
    }
}
