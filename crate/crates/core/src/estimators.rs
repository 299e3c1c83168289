//! The reverse-KL reliability estimator and the rules built on it: chunk
//! layout for the thinking phase, draft gating, visibility updates, and
//! answer-span selection.

use thiserror::Error;

use crate::backend::TeacherScores;
use crate::types::{ChunkPolicy, Decision, GateSpan, SpanPattern, StepRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("cannot score an empty segment")]
    Empty,
    #[error("{records} records but {teacher} teacher probabilities")]
    LengthMismatch { records: usize, teacher: usize },
    #[error("teacher probability at position {0} is zero (numerical underflow upstream)")]
    ZeroTeacherProb(usize),
}

/// Length-normalized sum of `log p_t - log p_t^e` over a segment.
pub fn kappa_hat(records: &[StepRecord], teacher: &TeacherScores) -> Result<f64, EstimatorError> {
    if records.len() != teacher.probs.len() {
        return Err(EstimatorError::LengthMismatch {
            records: records.len(),
            teacher: teacher.probs.len(),
        });
    }
    if records.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let mut acc = 0.0;
    for (t, (r, &q)) in records.iter().zip(&teacher.probs).enumerate() {
        if !(q > 0.0) {
            return Err(EstimatorError::ZeroTeacherProb(t));
        }
        acc += r.chosen_logprob - q.ln();
    }
    Ok(acc / records.len() as f64)
}

/// Chunk boundaries for the thinking phase. Positions are 1-based and
/// continue the draft's numbering, so chunk `k` starts at
/// `T_a + 1 + (k - 1) C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub draft_len: usize,
    pub chunk_size: usize,
}

impl ChunkLayout {
    /// Start position of chunk `k` (1-based).
    pub fn start(&self, k: usize) -> usize {
        assert!(k >= 1, "chunks are numbered from 1");
        self.draft_len + 1 + (k - 1) * self.chunk_size
    }

    /// Last position of chunk `k`, inclusive.
    pub fn end(&self, k: usize) -> usize {
        self.start(k) + self.chunk_size - 1
    }

    pub fn starts(&self, count: usize) -> Vec<usize> {
        (1..=count).map(|k| self.start(k)).collect()
    }

    /// Number of chunks needed to hold `think_len` tokens.
    pub fn count_for(&self, think_len: usize) -> usize {
        think_len.div_ceil(self.chunk_size)
    }
}

/// `C = max(1, floor(T_a / 4))` under the default policy.
pub fn chunk_layout(draft_len: usize, policy: ChunkPolicy) -> ChunkLayout {
    let chunk_size = match policy {
        ChunkPolicy::QuarterDraft => (draft_len / 4).max(1),
        ChunkPolicy::Fixed(c) => c.max(1),
    };
    ChunkLayout { draft_len, chunk_size }
}

/// Draft visibility for the next chunk: visible iff `kappa_r < tau_r`.
pub fn visibility_update(kappa_r: f64, tau_r: f64) -> bool {
    kappa_r < tau_r
}

/// Think iff `kappa_a > tau_a`; a score on the threshold accepts.
pub fn draft_decision(kappa_a: f64, tau_a: f64) -> Decision {
    if kappa_a > tau_a {
        Decision::ThinkTriggered
    } else {
        Decision::Accepted
    }
}

/// Visibility bits `m_1, m_2, ..` as a session accumulates them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityState {
    bits: Vec<bool>,
}

impl VisibilityState {
    pub fn new(first_chunk_visible: bool) -> Self {
        VisibilityState {
            bits: vec![first_chunk_visible],
        }
    }

    pub fn current(&self) -> bool {
        *self.bits.last().expect("at least m_1 is present")
    }

    /// Applies the update rule to the score of the chunk just finished and
    /// returns the bit for the next one.
    pub fn update(&mut self, kappa_r: f64, tau_r: f64) -> bool {
        let next = visibility_update(kappa_r, tau_r);
        self.bits.push(next);
        next
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Token range covering the last complete `open .. close` span in the
/// detokenized draft, delimiters included. Falls back to the whole draft
/// when no complete span exists.
///
/// Matching runs on the concatenated text, so delimiters may straddle token
/// boundaries. When `close` is `}` and `open` ends with `{`, braces nest.
pub fn answer_span<S: AsRef<str>>(token_texts: &[S], pattern: &SpanPattern) -> GateSpan {
    let whole = GateSpan {
        start: 0,
        end: token_texts.len(),
        fallback: true,
    };
    if pattern.open.is_empty() || pattern.close.is_empty() {
        return whole;
    }
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(token_texts.len());
    for t in token_texts {
        offsets.push(text.len());
        text.push_str(t.as_ref());
    }

    let nested = pattern.close == "}" && pattern.open.ends_with('{');
    let mut search_end = text.len();
    while let Some(open_at) = text[..search_end].rfind(&pattern.open) {
        let body_start = open_at + pattern.open.len();
        let close_at = if nested {
            matching_brace(&text[body_start..]).map(|i| body_start + i)
        } else {
            text[body_start..].find(&pattern.close).map(|i| body_start + i)
        };
        if let Some(close_at) = close_at {
            let span_end = close_at + pattern.close.len();
            return token_range(token_texts, &offsets, open_at, span_end).unwrap_or(whole);
        }
        search_end = open_at;
    }
    whole
}

/// Byte index of the `}` closing an already opened brace.
fn matching_brace(s: &str) -> Option<usize> {
    let mut depth = 1usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn token_range<S: AsRef<str>>(token_texts: &[S], offsets: &[usize], from: usize, to: usize) -> Option<GateSpan> {
    let mut first = None;
    let mut last = None;
    for (i, (t, &off)) in token_texts.iter().zip(offsets).enumerate() {
        let len = t.as_ref().len();
        if len > 0 && off < to && off + len > from {
            first.get_or_insert(i);
            last = Some(i);
        }
    }
    Some(GateSpan {
        start: first?,
        end: last? + 1,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EmbeddingVector, TokenId};
    use proptest::prelude::*;

    fn rec(p: f64) -> StepRecord {
        StepRecord::new(TokenId(0), p, EmbeddingVector::zeros(1).into()).unwrap()
    }

    #[test]
    fn kappa_of_identical_support_is_zero() {
        let records: Vec<_> = [0.3, 0.9, 0.05].iter().map(|&p| rec(p)).collect();
        let teacher = TeacherScores {
            probs: records.iter().map(|r| r.chosen_prob).collect(),
        };
        assert_eq!(kappa_hat(&records, &teacher).unwrap(), 0.0);
    }

    #[test]
    fn kappa_single_term() {
        let k = kappa_hat(&[rec(0.8)], &TeacherScores { probs: vec![0.4] }).unwrap();
        assert!((k - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kappa_errors() {
        assert_eq!(
            kappa_hat(&[rec(0.5)], &TeacherScores { probs: vec![] }),
            Err(EstimatorError::LengthMismatch { records: 1, teacher: 0 })
        );
        assert_eq!(kappa_hat(&[], &TeacherScores { probs: vec![] }), Err(EstimatorError::Empty));
        assert_eq!(
            kappa_hat(&[rec(0.5), rec(0.5)], &TeacherScores { probs: vec![0.5, 0.0] }),
            Err(EstimatorError::ZeroTeacherProb(1))
        );
    }

    #[test]
    fn layout_examples() {
        let l = chunk_layout(10, ChunkPolicy::QuarterDraft);
        assert_eq!(l.chunk_size, 2);
        assert_eq!(l.starts(3), vec![11, 13, 15]);
        assert_eq!(chunk_layout(3, ChunkPolicy::QuarterDraft).chunk_size, 1);
        let l = chunk_layout(10, ChunkPolicy::Fixed(4));
        assert_eq!(l.chunk_size, 4);
        assert_eq!(l.starts(2), vec![11, 15]);
        assert_eq!(l.count_for(9), 3);
        assert_eq!(chunk_layout(0, ChunkPolicy::QuarterDraft).chunk_size, 1);
    }

    #[test]
    fn visibility_rule_is_strict() {
        assert!(!visibility_update(0.5, 0.0));
        assert!(visibility_update(-0.1, 0.0));
        assert!(!visibility_update(0.0, 0.0));
    }

    #[test]
    fn gate_is_strict() {
        assert_eq!(draft_decision(0.4, 0.3), Decision::ThinkTriggered);
        assert_eq!(draft_decision(0.3, 0.3), Decision::Accepted);
        assert_eq!(draft_decision(0.0, 0.0), Decision::Accepted);
        assert_eq!(draft_decision(0.0, 0.7), Decision::Accepted);
    }

    #[test]
    fn visibility_state_tracks_bits() {
        let mut v = VisibilityState::new(false);
        assert!(!v.current());
        v.update(0.5, 0.0);
        v.update(-0.2, 0.0);
        v.update(0.5, 0.0);
        assert_eq!(v.bits(), &[false, false, true, false]);
    }

    fn texts(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn span_covers_boxed_answer() {
        let t = texts(&["So ", "the ", "answer ", "is ", "\\boxed{", "42", "}", "."]);
        let s = answer_span(&t, &SpanPattern::default());
        assert_eq!((s.start, s.end, s.fallback), (4, 7, false));
    }

    #[test]
    fn span_with_split_delimiters() {
        let t = texts(&["x ", "\\box", "ed{4", "2}", " done"]);
        let s = answer_span(&t, &SpanPattern::default());
        assert_eq!((s.start, s.end, s.fallback), (1, 4, false));
    }

    #[test]
    fn span_falls_back_when_absent() {
        let t = texts(&["no ", "answer ", "here"]);
        let s = answer_span(&t, &SpanPattern::default());
        assert_eq!((s.start, s.end, s.fallback), (0, 3, true));
        let t = texts(&["\\boxed{", "4"]);
        assert!(answer_span(&t, &SpanPattern::default()).fallback);
    }

    #[test]
    fn span_picks_last_of_two() {
        let t = texts(&["\\boxed{", "1", "}", " or ", "\\boxed{", "2", "}", " end"]);
        let s = answer_span(&t, &SpanPattern::default());
        assert_eq!((s.start, s.end), (4, 7));
    }

    #[test]
    fn span_skips_unclosed_trailing_open() {
        let t = texts(&["\\boxed{", "1", "}", " ", "\\boxed{", "2"]);
        let s = answer_span(&t, &SpanPattern::default());
        assert_eq!((s.start, s.end, s.fallback), (0, 3, false));
    }

    #[test]
    fn span_handles_nested_braces() {
        let t = texts(&["\\boxed{", "\\frac{1}", "{2}", "}", "!"]);
        let s = answer_span(&t, &SpanPattern::default());
        assert_eq!((s.start, s.end), (0, 4));
    }

    #[test]
    fn span_with_custom_pattern() {
        let p = SpanPattern {
            open: "<answer>".into(),
            close: "</answer>".into(),
        };
        let t = texts(&["a", "<answer>", "7", "</answer>"]);
        let s = answer_span(&t, &p);
        assert_eq!((s.start, s.end), (1, 4));
    }

    proptest! {
        #[test]
        fn kappa_is_invariant_to_common_scaling(
            pairs in proptest::collection::vec((0.05f64..1.0, 0.05f64..1.0), 1..10),
            scale in 0.1f64..1.0,
            pos in 0usize..10,
        ) {
            let records: Vec<_> = pairs.iter().map(|&(p, _)| rec(p)).collect();
            let teacher = TeacherScores { probs: pairs.iter().map(|&(_, q)| q).collect() };
            let base = kappa_hat(&records, &teacher).unwrap();
            let i = pos % pairs.len();
            let mut scaled_records = records.clone();
            scaled_records[i] = rec(pairs[i].0 * scale);
            let mut scaled_teacher = teacher.clone();
            scaled_teacher.probs[i] *= scale;
            let scaled = kappa_hat(&scaled_records, &scaled_teacher).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        #[test]
        fn layout_tiles_thinking_without_gaps(t_a in 0usize..200, fixed in 1usize..12, use_fixed: bool, k in 1usize..20) {
            let policy = if use_fixed { ChunkPolicy::Fixed(fixed) } else { ChunkPolicy::QuarterDraft };
            let l = chunk_layout(t_a, policy);
            prop_assert_eq!(l.start(1), t_a + 1);
            for j in 1..k {
                prop_assert_eq!(l.end(j) + 1, l.start(j + 1));
            }
            prop_assert_eq!(l.end(k), t_a + k * l.chunk_size);
        }
    }
}
