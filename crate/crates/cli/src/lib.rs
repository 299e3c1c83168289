//! Harness behind the `copt` binary: task files, batch runs over threshold
//! grids, metrics output, trace rendering and the validation suites.

pub mod backends;
pub mod bench;
pub mod config;
pub mod metrics;
pub mod output;
pub mod protocol;
pub mod render;
pub mod tasks;

use copt_core::types::Transcript;

use crate::bench::TraceLine;

/// A line of a trace file: a bare transcript from `run`, or a tagged one
/// from `bench --traces`.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedTrace {
    Bare(Transcript),
    Tagged(Box<TraceLine>),
}

impl SavedTrace {
    pub fn transcript(&self) -> &Transcript {
        match self {
            SavedTrace::Bare(t) => t,
            SavedTrace::Tagged(l) => &l.transcript,
        }
    }
}

pub fn parse_trace_file(text: &str) -> Result<Vec<SavedTrace>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<TraceLine>(line)
                .map(|l| SavedTrace::Tagged(Box::new(l)))
                .or_else(|_| Transcript::from_json_line(line).map(SavedTrace::Bare))
                .map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}
