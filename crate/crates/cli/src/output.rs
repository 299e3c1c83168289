//! Bench results on disk: line-delimited JSON and a flat CSV.
//!
//! The JSON file starts with a `header` line, then one `metrics` line per
//! grid point, then every `task` row. The CSV carries the header as `#`
//! comment lines followed by one summary row per grid point.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchResult, RunHeader, TraceLine};
use crate::metrics::{MetricsSummary, TaskRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputLine {
    Header(Box<RunHeader>),
    Metrics(MetricsSummary),
    Task(TaskRow),
}

pub fn jsonl_lines(result: &BenchResult) -> Vec<OutputLine> {
    let mut out = vec![OutputLine::Header(Box::new(result.header.clone()))];
    out.extend(result.metrics.iter().map(|m| OutputLine::Metrics(m.summary.clone())));
    out.extend(result.metrics.iter().flat_map(|m| m.rows.iter().cloned().map(OutputLine::Task)));
    out
}

pub fn write_jsonl<W: Write>(result: &BenchResult, mut w: W) -> std::io::Result<()> {
    for line in jsonl_lines(result) {
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_csv<W: Write>(result: &BenchResult, mut w: W) -> Result<(), Box<dyn std::error::Error>> {
    let h = &result.header;
    writeln!(w, "# {} {}", h.tool, h.tool_version)?;
    writeln!(w, "# backend: {} ({})", h.backend_spec, h.backend)?;
    if let Some(v) = h.protocol_version {
        writeln!(w, "# protocol_version: {v}")?;
    }
    writeln!(w, "# base_seed: {} repeat: {} tasks: {}", h.config.seed, h.config.repeat, h.seeds.len())?;
    writeln!(w, "# config: {}", serde_json::to_string(&h.config)?)?;
    let mut csv = csv::Writer::from_writer(w);
    for m in &result.metrics {
        csv.serialize(&m.summary)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_traces<W: Write>(traces: &[TraceLine], mut w: W) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        writeln!(w)?;
    }
    w.flush()
}

/// Writes `PREFIX.jsonl` and `PREFIX.csv`; returns both paths.
pub fn write_outputs(result: &BenchResult, prefix: &Path) -> Result<(PathBuf, PathBuf), Box<dyn std::error::Error>> {
    let jsonl = prefix.with_extension("jsonl");
    let csv = prefix.with_extension("csv");
    write_jsonl(result, std::io::BufWriter::new(std::fs::File::create(&jsonl)?))?;
    write_csv(result, std::io::BufWriter::new(std::fs::File::create(&csv)?))?;
    Ok((jsonl, csv))
}

/// Reads a metrics file back.
pub fn read_jsonl(text: &str) -> Result<Vec<OutputLine>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
