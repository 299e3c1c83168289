//! Per-task rows and their aggregate.
//!
//! A draft is *flagged* when the gate sent it to thinking. Among checked
//! tasks, a *caught error* is a flagged draft that was wrong, and a
//! *corrected error* is a caught error whose final answer is right.

use copt_core::types::{Decision, Mode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub repeat: usize,
    pub seed: u64,
    pub tau_a: f64,
    pub tau_r: f64,
    pub decision: Option<Decision>,
    pub kappa_a: Option<f64>,
    /// The draft judged on its own; `None` without a checker or a draft.
    pub draft_correct: Option<bool>,
    /// The delivered answer: the draft if accepted, else the final answer.
    pub correct: Option<bool>,
    pub draft_tokens: usize,
    pub think_tokens: usize,
    pub total_tokens: usize,
    pub chunks: usize,
    pub truncated: bool,
    pub error: Option<String>,
}

impl TaskRow {
    pub fn failed(task_id: &str, repeat: usize, seed: u64, tau_a: f64, tau_r: f64, error: String) -> Self {
        TaskRow {
            task_id: task_id.to_string(),
            repeat,
            seed,
            tau_a,
            tau_r,
            decision: None,
            kappa_a: None,
            draft_correct: None,
            correct: None,
            draft_tokens: 0,
            think_tokens: 0,
            total_tokens: 0,
            chunks: 0,
            truncated: false,
            error: Some(error),
        }
    }
}

/// Aggregate over one grid point. Ratios are `None` when their denominator
/// is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mode: Mode,
    pub tau_a: f64,
    pub tau_r: f64,
    pub sessions: usize,
    pub failed: usize,
    pub checked: usize,
    pub accuracy: Option<f64>,
    pub mean_tokens: Option<f64>,
    pub flagged: usize,
    pub accepted: usize,
    pub draft_errors: usize,
    pub caught_errors: usize,
    pub precision: Option<f64>,
    pub safe_acceptance: Option<f64>,
    pub corrected_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub summary: MetricsSummary,
    pub rows: Vec<TaskRow>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn summarize(mode: Mode, tau_a: f64, tau_r: f64, rows: Vec<TaskRow>) -> RunMetrics {
    let ok: Vec<&TaskRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let flagged = ok.iter().filter(|r| r.decision == Some(Decision::ThinkTriggered)).count();
    let accepted = ok.iter().filter(|r| r.decision == Some(Decision::Accepted)).count();
    let checked: Vec<bool> = ok.iter().filter_map(|r| r.correct).collect();

    let judged_flagged: Vec<&&TaskRow> = ok
        .iter()
        .filter(|r| r.decision == Some(Decision::ThinkTriggered) && r.draft_correct.is_some())
        .collect();
    let judged_accepted: Vec<&&TaskRow> = ok
        .iter()
        .filter(|r| r.decision == Some(Decision::Accepted) && r.draft_correct.is_some())
        .collect();
    let caught = judged_flagged.iter().filter(|r| r.draft_correct == Some(false)).count();
    let corrected = judged_flagged
        .iter()
        .filter(|r| r.draft_correct == Some(false) && r.correct == Some(true))
        .count();
    let safe = judged_accepted.iter().filter(|r| r.draft_correct == Some(true)).count();
    let draft_errors = ok.iter().filter(|r| r.draft_correct == Some(false)).count();

    let summary = MetricsSummary {
        mode,
        tau_a,
        tau_r,
        sessions: rows.len(),
        failed: rows.len() - ok.len(),
        checked: checked.len(),
        accuracy: ratio(checked.iter().filter(|&&c| c).count(), checked.len()),
        mean_tokens: (!ok.is_empty()).then(|| ok.iter().map(|r| r.total_tokens as f64).sum::<f64>() / ok.len() as f64),
        flagged,
        accepted,
        draft_errors,
        caught_errors: caught,
        precision: ratio(caught, judged_flagged.len()),
        safe_acceptance: ratio(safe, judged_accepted.len()),
        corrected_errors: corrected,
    };
    RunMetrics { summary, rows }
}
