//! Human-readable session traces.

use std::fmt::Write;

use copt_core::backend::Tokenizer;
use copt_core::types::{Decision, Mode, Segment, StopReason, Transcript};

use crate::bench::segment_text;

fn quoted(tok: Option<&dyn Tokenizer>, seg: &Segment) -> String {
    match tok {
        Some(_) => format!("{:?}", segment_text(tok, &seg.tokens())),
        None => format!("[{}]", segment_text(None, &seg.tokens())),
    }
}

fn stop(s: StopReason) -> &'static str {
    match s {
        StopReason::StopToken => "stop token",
        StopReason::Eos => "eos",
        StopReason::Budget => "budget",
    }
}

fn visibility(v: bool) -> &'static str {
    if v {
        "draft visible"
    } else {
        "draft hidden"
    }
}

/// Draft, gate score and decision, each chunk with its score and
/// visibility, the final answer and the token counts. `thresholds` adds the
/// gate comparison when known.
pub fn render(t: &Transcript, tok: Option<&dyn Tokenizer>, thresholds: Option<(f64, f64)>) -> String {
    let mut s = String::new();
    let mode = match t.mode {
        Mode::Copt => "copt",
        Mode::Cot => "cot",
    };
    let _ = writeln!(s, "mode      {mode}");
    let _ = writeln!(s, "question  {}", segment_text(tok, &t.question));
    if t.mode == Mode::Copt {
        let ended = t.draft_stop.map(stop).unwrap_or("-");
        let _ = writeln!(s, "draft     {} ({} tokens, {ended})", quoted(tok, &t.draft), t.draft.len());
        if let Some(k) = t.kappa_a {
            let _ = write!(s, "kappa_a   {k:.6}");
            if let Some((tau_a, _)) = thresholds {
                let cmp = if k > tau_a { ">" } else { "<=" };
                let _ = write!(s, " {cmp} tau_a {tau_a}");
            }
            if let Some(span) = t.gate_span {
                let _ = write!(s, " over positions {}..{}", span.start, span.end);
                if span.fallback {
                    let _ = write!(s, " (no answer span, whole draft)");
                }
            }
            let _ = writeln!(s);
        }
        if t.empty_draft {
            let _ = writeln!(s, "          empty draft, thinking forced");
        }
    }
    let decision = match t.decision {
        Decision::Accepted => "accepted",
        Decision::ThinkTriggered => "think triggered",
    };
    let _ = writeln!(s, "decision  {decision}");
    for (i, c) in t.chunks.iter().enumerate() {
        let score = c.kappa_r.map(|k| format!("kappa_r {k:.6}")).unwrap_or_else(|| "kappa_r -".into());
        let _ = writeln!(
            s,
            "chunk {:<3} {score}, {}, {} tokens, {}: {}",
            i + 1,
            visibility(c.visible),
            c.segment.len(),
            stop(c.stop),
            quoted(tok, &c.segment)
        );
    }
    if t.decision == Decision::ThinkTriggered {
        if t.truncated {
            let _ = writeln!(s, "          thinking truncated at budget");
        }
        let _ = writeln!(
            s,
            "final     {} ({}, {} tokens)",
            quoted(tok, &t.final_answer),
            visibility(t.final_visible),
            t.final_answer.len()
        );
    }
    let _ = writeln!(
        s,
        "tokens    draft {}, thinking {}, total {}",
        t.counts.draft_tokens, t.counts.think_tokens, t.counts.total
    );
    s
}
