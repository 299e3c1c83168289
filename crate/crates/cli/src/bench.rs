//! Batch runs over a task file and a threshold grid.
//!
//! Every (task, repeat) pair gets a seed derived from the base seed and the
//! task id, and keeps it across grid points, so rows differ only by their
//! thresholds. Results come back in input order whatever the parallelism.

use copt_core::backend::{SessionSource, Tokenizer};
use copt_core::controller::resolve_template;
use copt_core::sampling::session_rng;
use copt_core::types::{Mode, Segment, SessionConfig, TokenId, Transcript};
use copt_core::{run, Backend, Template};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CliConfig;
use crate::metrics::{summarize, RunMetrics, TaskRow};
use crate::tasks::{LineError, TaskRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub mode: Mode,
    pub tau_a_grid: Vec<f64>,
    pub tau_r_grid: Vec<f64>,
    pub keep_traces: bool,
}

impl BenchSpec {
    /// Grid points in row order. Cot mode has no thresholds and always
    /// yields the single configured point.
    pub fn grid(&self, session: &SessionConfig) -> Vec<(f64, f64)> {
        if self.mode == Mode::Cot {
            return vec![(session.tau_a, session.tau_r)];
        }
        let a = if self.tau_a_grid.is_empty() { vec![session.tau_a] } else { self.tau_a_grid.clone() };
        let r = if self.tau_r_grid.is_empty() { vec![session.tau_r] } else { self.tau_r_grid.clone() };
        a.iter().flat_map(|&ta| r.iter().map(move |&tr| (ta, tr))).collect()
    }
}

/// First eight bytes (little-endian) of SHA-256 over the base seed, the
/// task id and the repeat index.
pub fn task_seed(base: u64, task_id: &str, repeat: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((task_id.len() as u64).to_le_bytes());
    h.update(task_id.as_bytes());
    h.update((repeat as u64).to_le_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSeed {
    pub task_id: String,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub tool: String,
    pub tool_version: String,
    pub protocol_version: Option<u32>,
    pub backend_spec: String,
    pub backend: String,
    pub mode: Mode,
    pub grid: Vec<(f64, f64)>,
    pub config: CliConfig,
    pub template: Template,
    pub seeds: Vec<TaskSeed>,
    pub task_errors: Vec<LineError>,
}

/// One saved session, tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub task_id: String,
    pub repeat: usize,
    pub seed: u64,
    pub tau_a: f64,
    pub tau_r: f64,
    pub transcript: Transcript,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub header: RunHeader,
    pub metrics: Vec<RunMetrics>,
    pub traces: Vec<TraceLine>,
}

/// Text of a segment: decoded if possible, else space-separated ids.
pub fn segment_text(tokenizer: Option<&dyn Tokenizer>, tokens: &[TokenId]) -> String {
    if let Some(tok) = tokenizer {
        if let Ok(text) = tok.decode_all(tokens) {
            return text;
        }
    }
    tokens.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(" ")
}

fn prompt_tokens(task: &TaskRecord, backend: &dyn Backend) -> Result<Vec<TokenId>, String> {
    if let Some(t) = task.token_prompt() {
        return Ok(t);
    }
    let text = task.prompt.as_deref().unwrap_or_default();
    let tok = backend
        .tokenizer()
        .ok_or("raw-text prompt needs a backend with a tokenizer; give prompt_tokens instead")?;
    tok.encode(text).map_err(|e| e.to_string())
}

pub struct TaskRun {
    pub row: TaskRow,
    pub transcript: Option<Transcript>,
}

/// Runs one session for a task under fixed thresholds.
pub fn run_task(
    source: &dyn SessionSource,
    task: &TaskRecord,
    session: &SessionConfig,
    template: Option<&Template>,
    mode: Mode,
    repeat: usize,
    seed: u64,
) -> TaskRun {
    let fail = |e: String| TaskRun {
        row: TaskRow::failed(&task.id, repeat, seed, session.tau_a, session.tau_r, e),
        transcript: None,
    };
    let backend = match source.open(seed) {
        Ok(b) => b,
        Err(e) => return fail(e.to_string()),
    };
    let template = match resolve_template(template, &*backend) {
        Ok(t) => t,
        Err(e) => return fail(e.to_string()),
    };
    let question = match prompt_tokens(task, &*backend) {
        Ok(q) => q,
        Err(e) => return fail(e),
    };
    let mut config = session.clone();
    config.sampling.seed = seed;
    let mut rng = session_rng(seed);
    let t = match run(&*backend, &question, &config, &template, mode, &mut rng) {
        Ok(t) => t,
        Err(e) => return fail(e.to_string()),
    };
    let tok = backend.tokenizer();
    let text = |s: &Segment| segment_text(tok, &s.tokens());
    let draft_correct = match mode {
        Mode::Copt => task.check(&text(&t.draft)),
        Mode::Cot => None,
    };
    let row = TaskRow {
        task_id: task.id.clone(),
        repeat,
        seed,
        tau_a: session.tau_a,
        tau_r: session.tau_r,
        decision: Some(t.decision),
        kappa_a: t.kappa_a,
        draft_correct,
        correct: task.check(&text(t.answer())),
        draft_tokens: t.counts.draft_tokens,
        think_tokens: t.counts.think_tokens,
        total_tokens: t.counts.total,
        chunks: t.chunks.len(),
        truncated: t.truncated,
        error: None,
    };
    TaskRun { row, transcript: Some(t) }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cannot start worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("cannot resolve template: {0}")]
    Template(String),
}

pub fn run_bench(
    source: &dyn SessionSource,
    backend_spec: &str,
    protocol_version: Option<u32>,
    tasks: &[TaskRecord],
    task_errors: Vec<LineError>,
    cfg: &CliConfig,
    spec: &BenchSpec,
) -> Result<BenchResult, BenchError> {
    let template = {
        let probe = source.open(cfg.seed).map_err(|e| BenchError::Template(e.to_string()))?;
        resolve_template(cfg.template.as_ref(), &*probe).map_err(|e| BenchError::Template(e.to_string()))?
    };
    let seeds: Vec<TaskSeed> = tasks
        .iter()
        .flat_map(|t| {
            (0..cfg.repeat).map(move |r| TaskSeed {
                task_id: t.id.clone(),
                repeat: r,
                seed: task_seed(cfg.seed, &t.id, r),
            })
        })
        .collect();
    let grid = spec.grid(&cfg.session);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.unwrap_or(0))
        .build()?;
    let mut metrics = Vec::with_capacity(grid.len());
    let mut traces = Vec::new();
    for &(tau_a, tau_r) in &grid {
        let mut session = cfg.session.clone();
        session.tau_a = tau_a;
        session.tau_r = tau_r;
        let runs: Vec<TaskRun> = pool.install(|| {
            seeds
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let task = &tasks[i / cfg.repeat];
                    run_task(source, task, &session, Some(&template), spec.mode, s.repeat, s.seed)
                })
                .collect()
        });
        let mut rows = Vec::with_capacity(runs.len());
        for r in runs {
            if spec.keep_traces {
                if let Some(t) = r.transcript {
                    traces.push(TraceLine {
                        task_id: r.row.task_id.clone(),
                        repeat: r.row.repeat,
                        seed: r.row.seed,
                        tau_a,
                        tau_r,
                        transcript: t,
                    });
                }
            }
            rows.push(r.row);
        }
        metrics.push(summarize(spec.mode, tau_a, tau_r, rows));
    }

    let header = RunHeader {
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        protocol_version,
        backend_spec: backend_spec.to_string(),
        backend: source.identifier(),
        mode: spec.mode,
        grid,
        config: cfg.clone(),
        template,
        seeds,
        task_errors,
    };
    Ok(BenchResult { header, metrics, traces })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_every_input() {
        let s = task_seed(1, "a", 0);
        assert_eq!(s, task_seed(1, "a", 0));
        assert_ne!(s, task_seed(2, "a", 0));
        assert_ne!(s, task_seed(1, "b", 0));
        assert_ne!(s, task_seed(1, "a", 1));
    }

    #[test]
    fn grid_shapes() {
        let cfg = SessionConfig::default();
        let spec = BenchSpec {
            mode: Mode::Copt,
            tau_a_grid: vec![0.1, 0.3],
            tau_r_grid: vec![0.0, 0.5, 1.0],
            keep_traces: false,
        };
        assert_eq!(spec.grid(&cfg).len(), 6);
        assert_eq!(spec.grid(&cfg)[1], (0.1, 0.5));
        let cot = BenchSpec { mode: Mode::Cot, ..spec.clone() };
        assert_eq!(cot.grid(&cfg), vec![(cfg.tau_a, cfg.tau_r)]);
        let empty = BenchSpec {
            tau_a_grid: vec![],
            tau_r_grid: vec![],
            ..spec
        };
        assert_eq!(empty.grid(&cfg), vec![(cfg.tau_a, cfg.tau_r)]);
    }
}
