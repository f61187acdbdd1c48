//! Strict grammars for model output.

use super::{LlmError, SkillChoice};
use serde::Deserialize;

fn parse_error(reason: impl Into<String>, raw: &str) -> LlmError {
    LlmError::Parse {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// Tasks after the last line reading `TASKS:`, numbered `1.` (or `1)`)
/// consecutively. Blank lines are ignored; anything else is an error.
pub fn parse_task_list(raw: &str) -> Result<Vec<String>, LlmError> {
    let lines: Vec<&str> = raw.lines().collect();
    let start = lines
        .iter()
        .rposition(|l| l.trim() == "TASKS:")
        .ok_or_else(|| parse_error("missing TASKS: line", raw))?;
    let mut tasks = Vec::new();
    for line in &lines[start + 1..] {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let digits = line.bytes().take_while(u8::is_ascii_digit).count();
        let (num, rest) = line.split_at(digits);
        let expected = tasks.len() + 1;
        if num.parse::<usize>().ok() != Some(expected) {
            return Err(parse_error(format!("expected item {expected}, got `{line}`"), raw));
        }
        let task = rest
            .strip_prefix('.')
            .or_else(|| rest.strip_prefix(')'))
            .filter(|t| t.starts_with(char::is_whitespace))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| parse_error(format!("malformed item `{line}`"), raw))?;
        tasks.push(task.to_string());
    }
    if tasks.is_empty() {
        return Err(parse_error("empty task list", raw));
    }
    Ok(tasks)
}

/// A bare decimal in `[0, 1]`: `0`, `1`, `0.d+` or `1.0+`. Surrounding
/// whitespace is allowed.
pub fn parse_score(raw: &str) -> Result<f64, LlmError> {
    let s = raw.trim();
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let frac_ok = |f: &str, only_zero: bool| !f.is_empty() && f.bytes().all(|b| if only_zero { b == b'0' } else { b.is_ascii_digit() });
    let ok = match (int, frac) {
        ("0", None) | ("1", None) => true,
        ("0", Some(f)) => frac_ok(f, false),
        ("1", Some(f)) => frac_ok(f, true),
        _ => false,
    };
    if !ok {
        return Err(parse_error("expected a decimal in [0, 1]", raw));
    }
    s.parse::<f64>().map_err(|e| parse_error(e.to_string(), raw))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Choice {
    skill: Option<String>,
    object: Option<String>,
    target: Option<String>,
}

/// A single JSON object `{"skill", "object", "target"}`; a null skill
/// means no skill fits.
pub fn parse_skill_choice(raw: &str) -> Result<Option<SkillChoice>, LlmError> {
    let c: Choice = serde_json::from_str(raw.trim()).map_err(|e| parse_error(e.to_string(), raw))?;
    Ok(c.skill.map(|skill| SkillChoice {
        skill,
        object: c.object.filter(|s| !s.is_empty()),
        target: c.target.filter(|s| !s.is_empty()),
    }))
}
