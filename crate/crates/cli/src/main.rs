use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use copt_cli::backends::{load_backend, load_local, ENDPOINT_ENV};
use copt_cli::bench::{run_bench, BenchSpec};
use copt_cli::config::SessionFlags;
use copt_cli::output::{write_outputs, write_traces};
use copt_cli::protocol::protocol_suite;
use copt_cli::render::render;
use copt_cli::tasks::load_tasks;
use copt_cli::parse_trace_file;
use copt_core::controller::resolve_template;
use copt_core::sampling::session_rng;
use copt_core::types::{Mode, TokenId};
use copt_core::validation::{run_suite, Report, Suite};
use copt_remote::ServerConfig;

#[derive(Parser)]
#[command(name = "copt", version, about = "Draft-then-think decoding sessions, benchmarks and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Copt,
    Cot,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Copt => Mode::Copt,
            ModeArg::Cot => Mode::Cot,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SuiteArg {
    Theory,
    Estimators,
    Protocol,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session and print its trace.
    Run {
        #[command(flatten)]
        flags: SessionFlags,
        /// Raw-text prompt (needs a backend tokenizer).
        #[arg(long, conflicts_with = "prompt_tokens", required_unless_present = "prompt_tokens")]
        prompt: Option<String>,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        prompt_tokens: Option<Vec<u32>>,
        #[arg(long, value_enum, default_value = "copt")]
        mode: ModeArg,
        /// Append the JSON trace line here instead of printing it.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Run every task in a file over a threshold grid.
    Bench {
        #[command(flatten)]
        flags: SessionFlags,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_enum, default_value = "copt")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',')]
        tau_a_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        tau_r_grid: Vec<f64>,
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Output prefix; writes PREFIX.jsonl and PREFIX.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every transcript to this file.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Run oracle suites; exits nonzero if any check fails.
    Validate {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Server for the protocol suite.
        #[arg(long, env = ENDPOINT_ENV)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 30)]
        timeout: u64,
        /// Comma-separated question tokens for the protocol rollouts.
        #[arg(long, value_delimiter = ',')]
        probe_tokens: Option<Vec<u32>>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Pretty-print a saved trace file.
    Trace {
        path: PathBuf,
        /// Backend used to decode tokens to text.
        #[arg(long)]
        backend: Option<String>,
    },
    /// Serve a local backend over the HTTP protocol.
    Serve {
        #[arg(long)]
        backend: String,
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: String,
        #[arg(long, default_value_t = 1024)]
        max_sessions: usize,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            flags,
            prompt,
            prompt_tokens,
            mode,
            trace_out,
        } => cmd_run(flags, prompt, prompt_tokens, mode.into(), trace_out),
        Command::Bench {
            flags,
            tasks,
            mode,
            tau_a_grid,
            tau_r_grid,
            repeat,
            parallelism,
            out,
            traces,
        } => {
            let mut cfg = flags.resolve()?;
            if let Some(r) = repeat {
                cfg.repeat = r;
            }
            if parallelism.is_some() {
                cfg.parallelism = parallelism;
            }
            cfg.validate()?;
            let spec = BenchSpec {
                mode: mode.into(),
                tau_a_grid,
                tau_r_grid,
                keep_traces: traces.is_some(),
            };
            cmd_bench(cfg, spec, tasks, out, traces)
        }
        Command::Validate {
            suite,
            seed,
            endpoint,
            timeout,
            probe_tokens,
            json,
        } => {
            let probe: Option<Vec<TokenId>> = probe_tokens.map(|v| v.into_iter().map(TokenId).collect());
            cmd_validate(suite, seed, endpoint, probe, Duration::from_secs(timeout), json)
        }
        Command::Trace { path, backend } => cmd_trace(path, backend),
        Command::Serve {
            backend,
            bind,
            max_sessions,
        } => {
            let b = load_local(&backend)?;
            let handle = copt_remote::spawn(b, &bind, ServerConfig { max_sessions })?;
            println!("serving {backend} at {}", handle.url());
            handle.wait()?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_run(flags: SessionFlags, prompt: Option<String>, prompt_tokens: Option<Vec<u32>>, mode: Mode, trace_out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = flags.resolve()?;
    let spec = cfg.backend.clone().context("no backend: pass --backend or set it in the config")?;
    let loaded = load_backend(&spec, Duration::from_secs(cfg.timeout_secs))?;
    let backend = loaded.source.open(cfg.seed)?;
    let template = resolve_template(cfg.template.as_ref(), &*backend)?;
    let question: Vec<TokenId> = match (prompt_tokens, prompt) {
        (Some(ids), _) => ids.into_iter().map(TokenId).collect(),
        (None, Some(text)) => backend
            .tokenizer()
            .context("this backend has no tokenizer; use --prompt-tokens")?
            .encode(&text)?,
        (None, None) => bail!("give --prompt or --prompt-tokens"),
    };
    let mut session = cfg.session.clone();
    session.sampling.seed = cfg.seed;
    let transcript = copt_core::run(&*backend, &question, &session, &template, mode, &mut session_rng(cfg.seed))?;
    print!("{}", render(&transcript, backend.tokenizer(), Some((session.tau_a, session.tau_r))));
    let line = transcript.to_json_line();
    match trace_out {
        Some(path) => {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .with_context(|| format!("cannot open {}", path.display()))?;
            writeln!(f, "{line}")?;
        }
        None => println!("{line}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(cfg: copt_cli::config::CliConfig, spec: BenchSpec, tasks: PathBuf, out: Option<PathBuf>, traces: Option<PathBuf>) -> Result<ExitCode> {
    let backend_spec = cfg.backend.clone().context("no backend: pass --backend or set it in the config")?;
    let file = load_tasks(&tasks)?;
    for e in &file.errors {
        eprintln!("{}:{}: {}", tasks.display(), e.line, e.message);
    }
    if file.tasks.is_empty() {
        bail!("no usable tasks in {}", tasks.display());
    }
    let loaded = load_backend(&backend_spec, Duration::from_secs(cfg.timeout_secs))?;
    let result = run_bench(
        &*loaded.source,
        &backend_spec,
        loaded.protocol_version,
        &file.tasks,
        file.errors.clone(),
        &cfg,
        &spec,
    )?;

    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!("tau_a    tau_r    acc      tokens   flagged  accepted caught   prec     safe     corrected failed");
    for m in &result.metrics {
        let s = &m.summary;
        println!(
            "{:<8} {:<8} {:<8} {:<8} {:<8} {:<8} {:<8} {:<8} {:<8} {:<9} {}",
            s.tau_a,
            s.tau_r,
            fmt(s.accuracy),
            s.mean_tokens.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()),
            s.flagged,
            s.accepted,
            s.caught_errors,
            fmt(s.precision),
            fmt(s.safe_acceptance),
            s.corrected_errors,
            s.failed
        );
    }
    if let Some(prefix) = out {
        let (jsonl, csv) = write_outputs(&result, &prefix).map_err(|e| anyhow::anyhow!("{e}"))?;
        eprintln!("wrote {} and {}", jsonl.display(), csv.display());
    }
    if let Some(path) = traces {
        write_traces(&result.traces, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        eprintln!("wrote {} traces to {}", result.traces.len(), path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(suite: SuiteArg, seed: u64, endpoint: Option<String>, probe: Option<Vec<TokenId>>, timeout: Duration, json: bool) -> Result<ExitCode> {
    let mut report = Report::default();
    if matches!(suite, SuiteArg::Theory | SuiteArg::All) {
        report.checks.extend(run_suite(Suite::Theory, seed).checks);
    }
    if matches!(suite, SuiteArg::Estimators | SuiteArg::All) {
        report.checks.extend(run_suite(Suite::Estimators, seed).checks);
    }
    if matches!(suite, SuiteArg::Protocol | SuiteArg::All) {
        report.checks.extend(protocol_suite(endpoint.as_deref(), probe.as_deref(), timeout).checks);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for c in &report.checks {
            println!("{c}");
        }
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_trace(path: PathBuf, backend: Option<String>) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let traces = parse_trace_file(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let decoder = match backend {
        Some(spec) => Some(load_backend(&spec, Duration::from_secs(30))?.source.open(0)?),
        None => None,
    };
    let tok = decoder.as_ref().and_then(|b| b.tokenizer());
    for (i, saved) in traces.iter().enumerate() {
        if i > 0 {
            println!();
        }
        let thresholds = match saved {
            copt_cli::SavedTrace::Tagged(l) => {
                println!("task      {} (repeat {}, seed {})", l.task_id, l.repeat, l.seed);
                Some((l.tau_a, l.tau_r))
            }
            copt_cli::SavedTrace::Bare(_) => None,
        };
        print!("{}", render(saved.transcript(), tok, thresholds));
    }
    Ok(ExitCode::SUCCESS)
}
