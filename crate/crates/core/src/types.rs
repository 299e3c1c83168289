//! Domain types shared by every module: tokens, distributions, embeddings,
//! cached generation steps, session configuration and transcripts.
//!
//! All of these are plain values. Once built they are never mutated in
//! place by the controller, so they can be shared freely between threads.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the total mass of a [`ProbVector`].
pub const PROB_TOLERANCE: f64 = 1e-6;

/// Tolerance on `exp(chosen_logprob) == chosen_prob` for a [`StepRecord`].
pub const LOGPROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("not a probability vector (len {len}, sum {sum}, min {min})")]
    InvalidDistribution { len: usize, sum: f64, min: f64 },
    #[error("embedding contains a non-finite entry at index {0}")]
    NonFiniteEmbedding(usize),
    #[error("chosen probability {0} outside (0, 1]")]
    InvalidProbability(f64),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("draft segment is empty")]
    EmptyDraft,
    #[error("corrupted transcript: {0}")]
    CorruptTranscript(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

/// True iff every entry is non-negative and the entries sum to one within
/// [`PROB_TOLERANCE`].
pub fn validate_prob_vector(entries: &[f64]) -> bool {
    if entries.is_empty() {
        return false;
    }
    let mut sum = 0.0;
    for &p in entries {
        if !(p >= 0.0) || !p.is_finite() {
            return false;
        }
        sum += p;
    }
    (sum - 1.0).abs() <= PROB_TOLERANCE
}

/// A next-token distribution over the full vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, TypeError> {
        if validate_prob_vector(&entries) {
            Ok(ProbVector(entries))
        } else {
            let sum = entries.iter().sum();
            let min = entries.iter().copied().fold(f64::INFINITY, f64::min);
            Err(TypeError::InvalidDistribution {
                len: entries.len(),
                sum,
                min,
            })
        }
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, TypeError> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() || weights.iter().any(|&w| !(w >= 0.0)) {
            let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
            return Err(TypeError::InvalidDistribution {
                len: weights.len(),
                sum,
                min,
            });
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        assert!(index < len, "one-hot index {index} out of range {len}");
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        ProbVector(v)
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        ProbVector(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0.get(token.index()).copied().unwrap_or(0.0)
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = TypeError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, TypeError> {
        if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
            return Err(TypeError::NonFiniteEmbedding(i));
        }
        Ok(EmbeddingVector(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = TypeError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(e: EmbeddingVector) -> Self {
        e.0
    }
}

/// A continuous input, either carried by value or as a reference to a
/// vector cached by a remote backend for the current session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingRef {
    Vector(EmbeddingVector),
    Handle(String),
}

impl EmbeddingRef {
    pub fn vector(&self) -> Option<&EmbeddingVector> {
        match self {
            EmbeddingRef::Vector(v) => Some(v),
            EmbeddingRef::Handle(_) => None,
        }
    }
}

impl From<EmbeddingVector> for EmbeddingRef {
    fn from(v: EmbeddingVector) -> Self {
        EmbeddingRef::Vector(v)
    }
}

/// One unit of model context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixItem {
    Discrete(TokenId),
    Continuous(EmbeddingRef),
}

impl PrefixItem {
    pub fn token(&self) -> Option<TokenId> {
        match self {
            PrefixItem::Discrete(t) => Some(*t),
            PrefixItem::Continuous(_) => None,
        }
    }
}

pub fn discrete(ids: &[TokenId]) -> Vec<PrefixItem> {
    ids.iter().copied().map(PrefixItem::Discrete).collect()
}

/// What the controller caches for every generated token: the token, its
/// probability under the decoding distribution, and the probability-weighted
/// embedding average of that same distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: TokenId,
    pub chosen_prob: f64,
    pub chosen_logprob: f64,
    pub embedding: EmbeddingRef,
}

impl StepRecord {
    pub fn new(token: TokenId, chosen_prob: f64, embedding: EmbeddingRef) -> Result<Self, TypeError> {
        if !(chosen_prob > 0.0 && chosen_prob <= 1.0) {
            return Err(TypeError::InvalidProbability(chosen_prob));
        }
        Ok(StepRecord {
            token,
            chosen_prob,
            chosen_logprob: chosen_prob.ln(),
            embedding,
        })
    }

    pub fn is_consistent(&self) -> bool {
        (self.chosen_logprob.exp() - self.chosen_prob).abs() <= LOGPROB_TOLERANCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentRole {
    Question,
    DraftAnswer,
    ThinkChunk(u32),
    FinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub role: SegmentRole,
    pub records: Vec<StepRecord>,
}

impl Segment {
    pub fn new(role: SegmentRole, records: Vec<StepRecord>) -> Self {
        Segment { role, records }
    }

    pub fn empty(role: SegmentRole) -> Self {
        Segment { role, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.records.iter().map(|r| r.token).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    /// 0 disables top-k.
    pub top_k: usize,
    pub top_p: f64,
    pub min_p: f64,
    pub seed: u64,
    /// Pick the argmax instead of drawing; the cached distribution still
    /// uses `temperature`.
    pub greedy: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.6,
            top_k: 20,
            top_p: 0.95,
            min_p: 0.0,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            min_p: 0.0,
            seed: 0,
            greedy: true,
        }
    }

    /// Plain ancestral sampling from the unmodified distribution.
    pub fn ancestral(seed: u64) -> Self {
        SamplingParams {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            min_p: 0.0,
            seed,
            greedy: false,
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(TypeError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(TypeError::InvalidConfig(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.min_p >= 0.0 && self.min_p < 1.0) {
            return Err(TypeError::InvalidConfig(format!("min_p must lie in [0, 1), got {}", self.min_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkPolicy {
    /// `C = max(1, floor(T_a / 4))`.
    QuarterDraft,
    Fixed(usize),
}

/// Delimiters around the answer content inside a draft, matched on
/// detokenized text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanPattern {
    pub open: String,
    pub close: String,
}

impl Default for SpanPattern {
    fn default() -> Self {
        SpanPattern {
            open: "\\boxed{".to_string(),
            close: "}".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    WholeDraft,
    AnswerSpan(SpanPattern),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub tau_a: f64,
    pub tau_r: f64,
    pub max_draft_len: usize,
    pub max_think_budget: usize,
    pub max_answer_len: usize,
    pub chunk_policy: ChunkPolicy,
    pub sampling: SamplingParams,
    pub granularity: Granularity,
    pub first_chunk_visible: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            tau_a: 0.3,
            tau_r: 0.0,
            max_draft_len: 1024,
            max_think_budget: 32768,
            max_answer_len: 1024,
            chunk_policy: ChunkPolicy::QuarterDraft,
            sampling: SamplingParams::default(),
            granularity: Granularity::WholeDraft,
            first_chunk_visible: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.max_draft_len < 1 {
            return Err(TypeError::InvalidConfig("max_draft_len must be at least 1".into()));
        }
        if self.max_think_budget < 1 {
            return Err(TypeError::InvalidConfig("max_think_budget must be at least 1".into()));
        }
        if self.max_answer_len < 1 {
            return Err(TypeError::InvalidConfig("max_answer_len must be at least 1".into()));
        }
        if let ChunkPolicy::Fixed(c) = self.chunk_policy {
            if c < 1 {
                return Err(TypeError::InvalidConfig("fixed chunk size must be at least 1".into()));
            }
        }
        if !self.tau_a.is_finite() || !self.tau_r.is_finite() {
            return Err(TypeError::InvalidConfig("thresholds must be finite".into()));
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    ThinkTriggered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Draft first, gate on the reliability score, think only when flagged.
    Copt,
    /// Ordinary think-then-answer decoding with no draft and no estimators.
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopToken,
    Eos,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrace {
    pub segment: Segment,
    /// `None` only in cot mode, where no estimator runs.
    pub kappa_r: Option<f64>,
    /// Whether the draft was in context while this chunk was generated.
    pub visible: bool,
    pub stop: StopReason,
}

/// Draft positions the gate score was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSpan {
    pub start: usize,
    pub end: usize,
    /// The answer delimiter was not found and the whole draft was scored.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCounts {
    pub draft_tokens: usize,
    pub think_tokens: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub mode: Mode,
    pub question: Vec<TokenId>,
    pub draft: Segment,
    pub draft_stop: Option<StopReason>,
    pub kappa_a: Option<f64>,
    pub gate_span: Option<GateSpan>,
    pub decision: Decision,
    pub chunks: Vec<ChunkTrace>,
    /// Draft visibility while the post-thinking answer was generated.
    pub final_visible: bool,
    #[serde(rename = "final")]
    pub final_answer: Segment,
    pub counts: TokenCounts,
    /// Thinking hit its budget and was closed by injection.
    pub truncated: bool,
    /// The draft ended before its first token.
    pub empty_draft: bool,
}

/// Recomputes token accounting from the segments.
pub fn transcript_counts(t: &Transcript) -> Result<TokenCounts, TypeError> {
    if t.draft.is_empty() && t.mode == Mode::Copt && !t.empty_draft {
        return Err(TypeError::EmptyDraft);
    }
    let draft_tokens = t.draft.len();
    let think_tokens: usize = t.chunks.iter().map(|c| c.segment.len()).sum();
    Ok(TokenCounts {
        draft_tokens,
        think_tokens,
        total: draft_tokens + think_tokens + t.final_answer.len(),
    })
}

impl Transcript {
    /// Structural checks: decision/chunk consistency, contiguous chunk
    /// indices, and stored counts matching the segments.
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.decision == Decision::Accepted && !self.chunks.is_empty() {
            return Err(TypeError::CorruptTranscript("accepted session carries thinking chunks".into()));
        }
        for (i, c) in self.chunks.iter().enumerate() {
            let expected = SegmentRole::ThinkChunk(i as u32 + 1);
            if c.segment.role != expected {
                return Err(TypeError::CorruptTranscript(format!(
                    "chunk {} has role {:?}, expected {:?}",
                    i + 1,
                    c.segment.role,
                    expected
                )));
            }
        }
        if let Some(r) = self
            .draft
            .records
            .iter()
            .chain(self.chunks.iter().flat_map(|c| c.segment.records.iter()))
            .chain(self.final_answer.records.iter())
            .find(|r| !r.is_consistent())
        {
            return Err(TypeError::CorruptTranscript(format!(
                "record for token {} has inconsistent log-probability",
                r.token
            )));
        }
        let counts = transcript_counts(self)?;
        if counts != self.counts {
            return Err(TypeError::CorruptTranscript(format!(
                "stored counts {:?} disagree with segments {:?}",
                self.counts, counts
            )));
        }
        Ok(())
    }

    /// `m_1 .. m_K` followed by the bit used for the final answer.
    pub fn visibility_bits(&self) -> Vec<bool> {
        let mut bits: Vec<bool> = self.chunks.iter().map(|c| c.visible).collect();
        if !self.chunks.is_empty() {
            bits.push(self.final_visible);
        }
        bits
    }

    /// The answer the session commits to.
    pub fn answer(&self) -> &Segment {
        match self.decision {
            Decision::Accepted => &self.draft,
            Decision::ThinkTriggered => &self.final_answer,
        }
    }

    pub fn thinking_tokens(&self) -> Vec<TokenId> {
        self.chunks.iter().flat_map(|c| c.segment.tokens()).collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("transcript serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(token: u32, p: f64) -> StepRecord {
        StepRecord::new(TokenId(token), p, EmbeddingVector::zeros(2).into()).unwrap()
    }

    fn seg(role: SegmentRole, n: usize) -> Segment {
        Segment::new(role, (0..n).map(|i| rec(i as u32, 0.5)).collect())
    }

    fn transcript(draft: usize, chunks: &[usize], final_len: usize) -> Transcript {
        let decision = if chunks.is_empty() {
            Decision::Accepted
        } else {
            Decision::ThinkTriggered
        };
        let mut t = Transcript {
            mode: Mode::Copt,
            question: tokens(&[1, 2]),
            draft: seg(SegmentRole::DraftAnswer, draft),
            draft_stop: Some(StopReason::Eos),
            kappa_a: Some(0.0),
            gate_span: None,
            decision,
            chunks: chunks
                .iter()
                .enumerate()
                .map(|(i, &n)| ChunkTrace {
                    segment: seg(SegmentRole::ThinkChunk(i as u32 + 1), n),
                    kappa_r: Some(0.1),
                    visible: false,
                    stop: StopReason::Budget,
                })
                .collect(),
            final_visible: false,
            final_answer: seg(SegmentRole::FinalAnswer, final_len),
            counts: TokenCounts::default(),
            truncated: false,
            empty_draft: draft == 0,
        };
        t.counts = transcript_counts(&t).unwrap();
        t
    }

    #[test]
    fn prob_vector_predicate() {
        assert!(validate_prob_vector(&[0.3, 0.7]));
        assert!(!validate_prob_vector(&[0.5, 0.6]));
        assert!(validate_prob_vector(&[1.0, 0.0]));
        assert!(!validate_prob_vector(&[1.2, -0.2]));
        assert!(!validate_prob_vector(&[]));
        assert!(!validate_prob_vector(&[f64::NAN, 1.0]));
    }

    #[test]
    fn counts_arithmetic() {
        let t = transcript(10, &[], 0);
        assert_eq!(
            t.counts,
            TokenCounts {
                draft_tokens: 10,
                think_tokens: 0,
                total: 10
            }
        );
        let t = transcript(10, &[2, 2], 3);
        assert_eq!(
            t.counts,
            TokenCounts {
                draft_tokens: 10,
                think_tokens: 4,
                total: 17
            }
        );
        t.validate().unwrap();
    }

    #[test]
    fn empty_draft_is_rejected_unless_flagged() {
        let mut t = transcript(3, &[], 0);
        t.draft.records.clear();
        assert_eq!(transcript_counts(&t), Err(TypeError::EmptyDraft));
        t.empty_draft = true;
        assert!(transcript_counts(&t).is_ok());
    }

    #[test]
    fn stored_counts_must_match() {
        let mut t = transcript(4, &[2], 1);
        t.counts.total += 1;
        assert!(matches!(t.validate(), Err(TypeError::CorruptTranscript(_))));
    }

    #[test]
    fn chunk_indices_must_be_contiguous() {
        let mut t = transcript(4, &[2, 2], 1);
        t.chunks[1].segment.role = SegmentRole::ThinkChunk(3);
        assert!(t.validate().is_err());
    }

    #[test]
    fn accepted_with_chunks_is_corrupt() {
        let mut t = transcript(4, &[2], 1);
        t.decision = Decision::Accepted;
        assert!(t.validate().is_err());
    }

    #[test]
    fn step_record_logprob() {
        let r = rec(3, 0.25);
        assert!((r.chosen_logprob - 0.25f64.ln()).abs() < 1e-15);
        assert!(r.is_consistent());
        assert!(StepRecord::new(TokenId(0), 0.0, EmbeddingVector::zeros(1).into()).is_err());
        assert!(StepRecord::new(TokenId(0), 1.5, EmbeddingVector::zeros(1).into()).is_err());
    }

    #[test]
    fn visibility_bits_append_final() {
        let mut t = transcript(4, &[2, 2], 1);
        t.chunks[1].visible = true;
        t.final_visible = true;
        assert_eq!(t.visibility_bits(), vec![false, true, true]);
        assert!(transcript(4, &[], 0).visibility_bits().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(SessionConfig::default().validate().is_ok());
        let mut c = SessionConfig::default();
        c.max_draft_len = 0;
        assert!(c.validate().is_err());
        let mut c = SessionConfig::default();
        c.chunk_policy = ChunkPolicy::Fixed(0);
        assert!(c.validate().is_err());
        let mut c = SessionConfig::default();
        c.sampling.temperature = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn prefix_item_wire_shape() {
        let item = PrefixItem::Discrete(TokenId(4));
        assert_eq!(serde_json::to_string(&item).unwrap(), r#"{"discrete":4}"#);
        let item = PrefixItem::Continuous(EmbeddingRef::Handle("h1".into()));
        assert_eq!(serde_json::to_string(&item).unwrap(), r#"{"continuous":{"handle":"h1"}}"#);
    }

    #[test]
    fn config_parses_partial_json() {
        let c: SessionConfig =
            serde_json::from_str(r#"{"tau_a": 0.5, "chunk_policy": {"fixed": 3}, "granularity": "whole_draft"}"#).unwrap();
        assert_eq!(c.tau_a, 0.5);
        assert_eq!(c.chunk_policy, ChunkPolicy::Fixed(3));
        assert_eq!(c.max_draft_len, 1024);
    }
}
