//! Benchmark tasks and answer checkers.

use std::path::Path;

use copt_core::types::{SpanPattern, TokenId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checker {
    ExactMatch,
    BoxedMatch,
    #[default]
    None,
}

/// One line of a tasks file. Exactly one of `prompt_tokens` and `prompt`
/// is given; raw text needs a backend with a tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
    #[serde(default)]
    pub checker: Checker,
}

impl TaskRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty task id".into());
        }
        match (&self.prompt_tokens, &self.prompt) {
            (Some(t), None) if !t.is_empty() => {}
            (None, Some(p)) if !p.is_empty() => {}
            (Some(_), Some(_)) => return Err("give either prompt_tokens or prompt, not both".into()),
            _ => return Err("missing or empty prompt".into()),
        }
        if self.checker != Checker::None && self.expected.is_none() {
            return Err(format!("checker {:?} needs an expected answer", self.checker));
        }
        Ok(())
    }

    pub fn token_prompt(&self) -> Option<Vec<TokenId>> {
        self.prompt_tokens.as_ref().map(|t| t.iter().map(|&x| TokenId(x)).collect())
    }

    /// `None` when the task has no checker.
    pub fn check(&self, answer: &str) -> Option<bool> {
        let expected = self.expected.as_deref()?;
        match self.checker {
            Checker::None => None,
            Checker::ExactMatch => Some(normalize(answer) == normalize(expected)),
            Checker::BoxedMatch => Some(
                last_boxed(answer, &SpanPattern::default())
                    .map(|got| normalize(&got) == normalize(expected))
                    .unwrap_or(false),
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum TaskFileError {
    #[error("cannot read tasks file: {0}")]
    Io(#[from] std::io::Error),
}

/// A malformed line, reported with its 1-based number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct TaskFile {
    pub tasks: Vec<TaskRecord>,
    pub errors: Vec<LineError>,
}

/// Parses line-delimited task records. Blank lines are skipped; bad lines
/// are collected and parsing continues. Duplicate ids count as errors.
pub fn parse_tasks(text: &str) -> TaskFile {
    let mut out = TaskFile::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<TaskRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|t| t.validate().map(|_| t));
        match parsed {
            Ok(t) if !seen.insert(t.id.clone()) => out.errors.push(LineError {
                line: i + 1,
                message: format!("duplicate task id {:?}", t.id),
            }),
            Ok(t) => out.tasks.push(t),
            Err(message) => out.errors.push(LineError { line: i + 1, message }),
        }
    }
    out
}

pub fn load_tasks(path: &Path) -> Result<TaskFile, TaskFileError> {
    Ok(parse_tasks(&std::fs::read_to_string(path)?))
}

/// Content of the last complete delimited span, honouring nested braces.
pub fn last_boxed(text: &str, pattern: &SpanPattern) -> Option<String> {
    let nests = pattern.close == "}" && pattern.open.ends_with('{');
    let mut found = None;
    let mut from = 0;
    while let Some(rel) = text[from..].find(&pattern.open) {
        let start = from + rel + pattern.open.len();
        if let Some(end) = span_end(&text[start..], &pattern.close, nests) {
            found = Some(text[start..start + end].to_string());
        }
        from = start;
    }
    found
}

fn span_end(rest: &str, close: &str, nests: bool) -> Option<usize> {
    if !nests {
        return rest.find(close);
    }
    let mut depth = 0usize;
    for (i, c) in rest.char_indices() {
        match c {
            '{' => depth += 1,
            '}' if depth == 0 => return Some(i),
            '}' => depth -= 1,
            _ => {}
        }
    }
    None
}

/// Removes all whitespace; numbers also lose leading zeros in their integer
/// part (`" 007 "` becomes `7`, `".5"` becomes `0.5`).
pub fn normalize(s: &str) -> String {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let (sign, body) = match compact.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", compact.as_str()),
    };
    let is_number = !body.is_empty() && body.chars().all(|c| c.is_ascii_digit() || c == '.') && body.matches('.').count() <= 1;
    if !is_number {
        return compact;
    }
    let (int, frac) = body.split_once('.').map_or((body, None), |(a, b)| (a, Some(b)));
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    match frac {
        Some(f) => format!("{sign}{int}.{f}"),
        None => format!("{sign}{int}"),
    }
}
