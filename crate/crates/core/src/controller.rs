//! Session controller: draft an answer behind a forced empty thinking
//! block, gate it on its reliability score, and when flagged, think in
//! chunks while toggling whether the draft is in context.
//!
//! Forced markers (`think_open` / `think_close`) are injected into the
//! context without sampling. They never appear in records, scores or token
//! counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::estimators::{self, chunk_layout, draft_decision, kappa_hat, EstimatorError, VisibilityState};
use crate::sampling::SessionRng;
use crate::types::{
    discrete, transcript_counts, ChunkPolicy, ChunkTrace, Decision, GateSpan, Granularity, Mode, PrefixItem, SamplingParams, Segment,
    SegmentRole, SessionConfig, StepRecord, StopReason, TokenId, Transcript, TypeError,
};

/// Token sequences the controller injects around the question and the
/// thinking block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub think_open: Vec<TokenId>,
    pub think_close: Vec<TokenId>,
    /// Placed before the question (e.g. a user-turn marker).
    #[serde(default)]
    pub prompt_prefix: Vec<TokenId>,
    /// Placed after the question (e.g. an assistant-turn marker).
    #[serde(default)]
    pub prompt_suffix: Vec<TokenId>,
}

impl Template {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.think_open.is_empty() || self.think_close.is_empty() {
            return Err(SessionError::InvalidTemplate("think markers must be non-empty".into()));
        }
        if self.think_open == self.think_close {
            return Err(SessionError::InvalidTemplate("think_open and think_close must differ".into()));
        }
        Ok(())
    }

    fn prompt(&self, question: &[TokenId]) -> Vec<TokenId> {
        let mut out = self.prompt_prefix.clone();
        out.extend_from_slice(question);
        out.extend_from_slice(&self.prompt_suffix);
        out
    }

    /// Context the draft is generated in: the prompt followed by an empty
    /// thinking block.
    pub fn draft_context(&self, question: &[TokenId]) -> Vec<PrefixItem> {
        let mut ids = self.prompt(question);
        ids.extend_from_slice(&self.think_open);
        ids.extend_from_slice(&self.think_close);
        discrete(&ids)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] TypeError),
    #[error("question must contain at least one token")]
    EmptyQuestion,
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("no template configured and the backend offers none")]
    NoTemplate,
    #[error("generation budget must be at least 1")]
    ZeroBudget,
    #[error("draft marked visible but no draft exists")]
    VisibleWithoutDraft,
    #[error("illegal phase transition {from:?} -> {to:?}")]
    IllegalTransition { from: Phase, to: Phase },
    #[error("backend failed after {} generated tokens: {source}", partial.len())]
    Generation {
        partial: Vec<StepRecord>,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Drafting,
    Gating,
    Thinking(usize),
    Finalizing,
    Done,
}

impl Phase {
    pub fn can_move_to(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Drafting, Gating) | (Gating, Done) | (Gating, Thinking(1)) | (Thinking(_), Finalizing) | (Finalizing, Done)
        ) || matches!((self, next), (Thinking(k), Thinking(j)) if j == k + 1)
    }
}

/// Phase tracker that refuses illegal transitions.
#[derive(Debug)]
pub struct SessionState {
    phase: Phase,
}

impl SessionState {
    pub fn new() -> Self {
        SessionState { phase: Phase::Drafting }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn advance(&mut self, next: Phase) -> Result<(), SessionError> {
        if !self.phase.can_move_to(next) {
            return Err(SessionError::IllegalTransition { from: self.phase, to: next });
        }
        self.phase = next;
        Ok(())
    }
}

impl Default for SessionState {
    fn default() -> Self {
        Self::new()
    }
}

/// Context for a thinking chunk: the prompt, the draft when `visible`, the
/// opening think marker, then every thinking token so far. The draft is
/// entirely absent when hidden.
pub fn build_context(
    question: &[TokenId],
    draft: Option<&[TokenId]>,
    visible: bool,
    thinking: &[TokenId],
    template: &Template,
) -> Result<Vec<PrefixItem>, SessionError> {
    let mut ids = template.prompt(question);
    if visible {
        ids.extend_from_slice(draft.ok_or(SessionError::VisibleWithoutDraft)?);
    }
    ids.extend_from_slice(&template.think_open);
    ids.extend_from_slice(thinking);
    Ok(discrete(&ids))
}

/// When to stop generating.
#[derive(Debug, Clone, Default)]
pub struct StopCriteria {
    /// Ends the segment without being recorded.
    pub eos: Option<TokenId>,
    /// Any of these appearing at the end of `history ++ generated` ends the
    /// segment; the tokens stay in the records.
    pub sequences: Vec<Vec<TokenId>>,
    /// Tokens generated before this segment, so a stop sequence can
    /// straddle a chunk boundary.
    pub history: Vec<TokenId>,
}

impl StopCriteria {
    fn hit(&self, generated: &[TokenId]) -> bool {
        self.sequences.iter().any(|seq| {
            let n = seq.len();
            if n == 0 || n > self.history.len() + generated.len() {
                return false;
            }
            let from_gen = n.min(generated.len());
            let from_hist = n - from_gen;
            seq[n - from_gen..] == generated[generated.len() - from_gen..]
                && seq[..from_hist] == self.history[self.history.len() - from_hist..]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub records: Vec<StepRecord>,
    pub stop: StopReason,
}

/// Generates up to `budget` tokens, caching `(p_t, e_t)` for each.
pub fn generate_segment<B: Backend + ?Sized>(
    backend: &B,
    context: &[PrefixItem],
    stops: &StopCriteria,
    budget: usize,
    sampling: &SamplingParams,
    rng: &mut SessionRng,
) -> Result<Generation, SessionError> {
    if budget == 0 {
        return Err(SessionError::ZeroBudget);
    }
    let mut prefix = context.to_vec();
    let mut records: Vec<StepRecord> = Vec::new();
    let mut generated: Vec<TokenId> = Vec::new();
    while records.len() < budget {
        let rec = match backend.step(&prefix, sampling, rng) {
            Ok(r) => r,
            Err(source) => return Err(SessionError::Generation { partial: records, source }),
        };
        if Some(rec.token) == stops.eos {
            return Ok(Generation {
                records,
                stop: StopReason::Eos,
            });
        }
        prefix.push(PrefixItem::Discrete(rec.token));
        generated.push(rec.token);
        records.push(rec);
        if stops.hit(&generated) {
            return Ok(Generation {
                records,
                stop: StopReason::StopToken,
            });
        }
    }
    Ok(Generation {
        records,
        stop: StopReason::Budget,
    })
}

/// Template from the config when given, otherwise the backend's own.
pub fn resolve_template<B: Backend + ?Sized>(configured: Option<&Template>, backend: &B) -> Result<Template, SessionError> {
    let t = configured.cloned().or_else(|| backend.default_template()).ok_or(SessionError::NoTemplate)?;
    t.validate()?;
    Ok(t)
}

fn gate_span<B: Backend + ?Sized>(backend: &B, records: &[StepRecord], granularity: &Granularity) -> Result<GateSpan, SessionError> {
    let whole = GateSpan {
        start: 0,
        end: records.len(),
        fallback: false,
    };
    match granularity {
        Granularity::WholeDraft => Ok(whole),
        Granularity::AnswerSpan(pattern) => {
            let Some(tok) = backend.tokenizer() else {
                return Ok(GateSpan { fallback: true, ..whole });
            };
            let texts = records.iter().map(|r| tok.decode(r.token)).collect::<Result<Vec<_>, _>>()?;
            Ok(estimators::answer_span(&texts, pattern))
        }
    }
}

/// Reliability score of a draft over `span`. The teacher pass covers every
/// position up to the end of the span because later positions condition on
/// all earlier cached embeddings.
pub fn score_draft<B: Backend + ?Sized>(
    backend: &B,
    context: &[PrefixItem],
    records: &[StepRecord],
    span: GateSpan,
    temperature: f64,
) -> Result<f64, SessionError> {
    let scored = &records[..span.end];
    let teacher = backend.teacher_probs(context, scored, temperature)?;
    let mut tail = teacher;
    tail.probs.drain(..span.start);
    Ok(kappa_hat(&records[span.start..span.end], &tail)?)
}

/// Score of one thinking chunk with intra-chunk embedding substitution.
pub fn score_chunk<B: Backend + ?Sized>(backend: &B, context: &[PrefixItem], records: &[StepRecord], temperature: f64) -> Result<f64, SessionError> {
    let teacher = backend.teacher_probs(context, records, temperature)?;
    Ok(kappa_hat(records, &teacher)?)
}

fn check_inputs(question: &[TokenId], config: &SessionConfig, template: &Template) -> Result<(), SessionError> {
    config.validate()?;
    template.validate()?;
    if question.is_empty() {
        return Err(SessionError::EmptyQuestion);
    }
    Ok(())
}

/// One full draft → gate → (think → finalize) session.
pub fn run_session<B: Backend + ?Sized>(
    backend: &B,
    question: &[TokenId],
    config: &SessionConfig,
    template: &Template,
    rng: &mut SessionRng,
) -> Result<Transcript, SessionError> {
    check_inputs(question, config, template)?;
    let eos = backend.info()?.eos_token;
    let temperature = config.sampling.temperature;
    let mut state = SessionState::new();

    let draft_ctx = template.draft_context(question);
    let draft_stops = StopCriteria {
        eos,
        ..StopCriteria::default()
    };
    let draft = generate_segment(backend, &draft_ctx, &draft_stops, config.max_draft_len, &config.sampling, rng)?;
    let draft_tokens: Vec<TokenId> = draft.records.iter().map(|r| r.token).collect();
    let empty_draft = draft.records.is_empty();
    state.advance(Phase::Gating)?;

    let (kappa_a, span, decision) = if empty_draft {
        (None, None, Decision::ThinkTriggered)
    } else {
        let span = gate_span(backend, &draft.records, &config.granularity)?;
        let k = score_draft(backend, &draft_ctx, &draft.records, span, temperature)?;
        (Some(k), Some(span), draft_decision(k, config.tau_a))
    };

    let mut transcript = Transcript {
        mode: Mode::Copt,
        question: question.to_vec(),
        draft: Segment::new(SegmentRole::DraftAnswer, draft.records),
        draft_stop: Some(draft.stop),
        kappa_a,
        gate_span: span,
        decision,
        chunks: Vec::new(),
        final_visible: false,
        final_answer: Segment::empty(SegmentRole::FinalAnswer),
        counts: Default::default(),
        truncated: false,
        empty_draft,
    };

    if decision == Decision::Accepted {
        state.advance(Phase::Done)?;
        transcript.counts = transcript_counts(&transcript)?;
        return Ok(transcript);
    }

    let policy = if empty_draft { ChunkPolicy::Fixed(1) } else { config.chunk_policy };
    let layout = chunk_layout(draft_tokens.len(), policy);
    let mut visibility = VisibilityState::new(config.first_chunk_visible);
    let mut thinking: Vec<TokenId> = Vec::new();
    let mut closed_by_model = false;
    let mut k = 0;
    loop {
        let remaining = config.max_think_budget - thinking.len();
        if remaining == 0 {
            transcript.truncated = true;
            break;
        }
        k += 1;
        state.advance(Phase::Thinking(k))?;
        let visible = visibility.current();
        let ctx = build_context(question, Some(&draft_tokens), visible, &thinking, template)?;
        let stops = StopCriteria {
            eos,
            sequences: vec![template.think_close.clone()],
            history: thinking.clone(),
        };
        let chunk = generate_segment(backend, &ctx, &stops, layout.chunk_size.min(remaining), &config.sampling, rng)?;
        if chunk.records.is_empty() {
            // end-of-sequence before any thinking token in this chunk
            break;
        }
        let kappa_r = score_chunk(backend, &ctx, &chunk.records, temperature)?;
        visibility.update(kappa_r, config.tau_r);
        thinking.extend(chunk.records.iter().map(|r| r.token));
        let stop = chunk.stop;
        transcript.chunks.push(ChunkTrace {
            segment: Segment::new(SegmentRole::ThinkChunk(k as u32), chunk.records),
            kappa_r: Some(kappa_r),
            visible,
            stop,
        });
        match stop {
            StopReason::StopToken => {
                closed_by_model = true;
                break;
            }
            StopReason::Eos => break,
            StopReason::Budget => {}
        }
    }

    state.advance(Phase::Finalizing)?;
    transcript.final_visible = visibility.current();
    let mut final_ctx = build_context(question, Some(&draft_tokens), transcript.final_visible, &thinking, template)?;
    if !closed_by_model {
        final_ctx.extend(discrete(&template.think_close));
    }
    let answer = generate_segment(
        backend,
        &final_ctx,
        &StopCriteria {
            eos,
            ..StopCriteria::default()
        },
        config.max_answer_len,
        &config.sampling,
        rng,
    )?;
    transcript.final_answer = Segment::new(SegmentRole::FinalAnswer, answer.records);
    state.advance(Phase::Done)?;
    transcript.counts = transcript_counts(&transcript)?;
    Ok(transcript)
}

/// Plain think-then-answer decoding. No draft is produced and no estimator
/// is evaluated; the whole thinking trace is stored as a single chunk.
pub fn run_cot_session<B: Backend + ?Sized>(
    backend: &B,
    question: &[TokenId],
    config: &SessionConfig,
    template: &Template,
    rng: &mut SessionRng,
) -> Result<Transcript, SessionError> {
    check_inputs(question, config, template)?;
    let eos = backend.info()?.eos_token;
    let ctx = build_context(question, None, false, &[], template)?;
    let thought = generate_segment(
        backend,
        &ctx,
        &StopCriteria {
            eos,
            sequences: vec![template.think_close.clone()],
            history: Vec::new(),
        },
        config.max_think_budget,
        &config.sampling,
        rng,
    )?;
    let thinking: Vec<TokenId> = thought.records.iter().map(|r| r.token).collect();
    let mut final_ctx = build_context(question, None, false, &thinking, template)?;
    if thought.stop != StopReason::StopToken {
        final_ctx.extend(discrete(&template.think_close));
    }
    let answer = generate_segment(
        backend,
        &final_ctx,
        &StopCriteria {
            eos,
            ..StopCriteria::default()
        },
        config.max_answer_len,
        &config.sampling,
        rng,
    )?;
    let truncated = thought.stop == StopReason::Budget;
    let chunks = if thought.records.is_empty() {
        Vec::new()
    } else {
        vec![ChunkTrace {
            segment: Segment::new(SegmentRole::ThinkChunk(1), thought.records),
            kappa_r: None,
            visible: false,
            stop: thought.stop,
        }]
    };
    let mut transcript = Transcript {
        mode: Mode::Cot,
        question: question.to_vec(),
        draft: Segment::empty(SegmentRole::DraftAnswer),
        draft_stop: None,
        kappa_a: None,
        gate_span: None,
        decision: Decision::ThinkTriggered,
        chunks,
        final_visible: false,
        final_answer: Segment::new(SegmentRole::FinalAnswer, answer.records),
        counts: Default::default(),
        truncated,
        empty_draft: false,
    };
    transcript.counts = transcript_counts(&transcript)?;
    Ok(transcript)
}

pub fn run<B: Backend + ?Sized>(
    backend: &B,
    question: &[TokenId],
    config: &SessionConfig,
    template: &Template,
    mode: Mode,
    rng: &mut SessionRng,
) -> Result<Transcript, SessionError> {
    match mode {
        Mode::Copt => run_session(backend, question, config, template, rng),
        Mode::Cot => run_cot_session(backend, question, config, template, rng),
    }
}

/// Outcome of recomputing every stored score from the stored records.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    /// `(stored, recomputed)`.
    pub kappa_a: Option<(f64, f64)>,
    /// `(stored, recomputed)` per chunk.
    pub kappa_r: Vec<(f64, f64)>,
    /// Every `m_{k+1}` follows from `kappa_r^(k)` and `m_1` matches config.
    pub visibility_consistent: bool,
    /// Every chunk but the last is exactly `C` long and none is longer.
    pub layout_consistent: bool,
}

impl ReplayReport {
    /// All recomputed scores equal the stored ones bit for bit.
    pub fn is_exact(&self) -> bool {
        self.kappa_a.is_none_or(|(a, b)| a.to_bits() == b.to_bits())
            && self.kappa_r.iter().all(|(a, b)| a.to_bits() == b.to_bits())
            && self.visibility_consistent
            && self.layout_consistent
    }
}

/// Rebuilds every scoring context of a copt transcript and recomputes its
/// scores from the stored records.
pub fn replay<B: Backend + ?Sized>(backend: &B, transcript: &Transcript, config: &SessionConfig, template: &Template) -> Result<ReplayReport, SessionError> {
    let temperature = config.sampling.temperature;
    let draft_ctx = template.draft_context(&transcript.question);
    let kappa_a = match (transcript.kappa_a, transcript.gate_span) {
        (Some(stored), Some(span)) => Some((stored, score_draft(backend, &draft_ctx, &transcript.draft.records, span, temperature)?)),
        _ => None,
    };

    let draft_tokens = transcript.draft.tokens();
    let mut thinking: Vec<TokenId> = Vec::new();
    let mut kappa_r = Vec::with_capacity(transcript.chunks.len());
    let mut visibility_consistent = transcript.chunks.first().is_none_or(|c| c.visible == config.first_chunk_visible);
    for (i, chunk) in transcript.chunks.iter().enumerate() {
        let ctx = build_context(&transcript.question, Some(&draft_tokens), chunk.visible, &thinking, template)?;
        if let Some(stored) = chunk.kappa_r {
            let recomputed = score_chunk(backend, &ctx, &chunk.segment.records, temperature)?;
            kappa_r.push((stored, recomputed));
            let next = transcript.chunks.get(i + 1).map_or(transcript.final_visible, |c| c.visible);
            visibility_consistent &= next == estimators::visibility_update(stored, config.tau_r);
        }
        thinking.extend(chunk.segment.tokens());
    }

    let policy = if transcript.empty_draft { ChunkPolicy::Fixed(1) } else { config.chunk_policy };
    let c = chunk_layout(draft_tokens.len(), policy).chunk_size;
    let n = transcript.chunks.len();
    let layout_consistent = transcript.mode == Mode::Cot
        || transcript
            .chunks
            .iter()
            .enumerate()
            .all(|(i, ch)| ch.segment.len() <= c && (i + 1 == n || ch.segment.len() == c));

    Ok(ReplayReport {
        kappa_a,
        kappa_r,
        visibility_consistent,
        layout_consistent,
    })
}
