//! Hand-programmable backends for fixtures.
//!
//! [`ScriptedBackend`] wraps a rule closure over the prefix. Tokens embed
//! as one-hot vectors, and any continuous input that equals a token's
//! embedding is rewritten to that token before the rule sees it, so
//! substituting `Discrete(v)` with `Continuous(E(v))` never changes the
//! output. Only genuine mixtures reach the rule as continuous items.
//!
//! [`QuizBackend`] is a family of multiple-choice style questions whose
//! drafts, thinking traces and final answers are fully determined by a
//! small JSON spec. It has a tokenizer, so answer-span gating and boxed
//! answer checking work against it.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{check_token, expect_vector, Backend, BackendError, BackendInfo, Tokenizer};
use crate::controller::Template;
use crate::types::{EmbeddingRef, EmbeddingVector, PrefixItem, ProbVector, TokenId};

pub type Rule = dyn Fn(&[PrefixItem]) -> Result<ProbVector, BackendError> + Send + Sync;

const ONE_HOT_TOLERANCE: f64 = 1e-12;

pub struct ScriptedBackend {
    vocab: Vec<String>,
    eos: Option<TokenId>,
    template: Option<Template>,
    name: String,
    rule: Arc<Rule>,
}

impl ScriptedBackend {
    pub fn new<F>(vocab: &[&str], rule: F) -> Self
    where
        F: Fn(&[PrefixItem]) -> Result<ProbVector, BackendError> + Send + Sync + 'static,
    {
        assert!(vocab.len() >= 2, "scripted vocabulary needs at least two tokens");
        ScriptedBackend {
            vocab: vocab.iter().map(|s| s.to_string()).collect(),
            eos: None,
            template: None,
            name: "scripted".to_string(),
            rule: Arc::new(rule),
        }
    }

    pub fn with_eos(mut self, eos: TokenId) -> Self {
        self.eos = Some(eos);
        self
    }

    pub fn with_template(mut self, template: Template) -> Self {
        self.template = Some(template);
        self
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// Rewrites continuous items that are exactly a token embedding.
    fn canonical(&self, prefix: &[PrefixItem]) -> Result<Vec<PrefixItem>, BackendError> {
        let dim = self.vocab.len();
        prefix
            .iter()
            .map(|item| match item {
                PrefixItem::Discrete(t) => {
                    check_token(*t, dim)?;
                    Ok(item.clone())
                }
                PrefixItem::Continuous(e) => {
                    let v = expect_vector(e, dim)?;
                    Ok(match one_hot_index(v.as_slice()) {
                        Some(i) => PrefixItem::Discrete(TokenId(i as u32)),
                        None => item.clone(),
                    })
                }
            })
            .collect()
    }
}

fn one_hot_index(v: &[f64]) -> Option<usize> {
    let i = v.iter().position(|&x| (x - 1.0).abs() <= ONE_HOT_TOLERANCE)?;
    v.iter()
        .enumerate()
        .all(|(j, &x)| j == i || x.abs() <= ONE_HOT_TOLERANCE)
        .then_some(i)
}

impl Backend for ScriptedBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            vocab_size: self.vocab.len(),
            embedding_dim: self.vocab.len(),
            identifier: self.name.clone(),
            eos_token: self.eos,
        })
    }

    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError> {
        check_token(token, self.vocab.len())?;
        let mut e = vec![0.0; self.vocab.len()];
        e[token.index()] = 1.0;
        Ok(EmbeddingVector::new(e)?)
    }

    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
        if prefix.is_empty() {
            return Err(BackendError::EmptyPrefix);
        }
        let canonical = self.canonical(prefix)?;
        let dist = (self.rule)(&canonical)?;
        if dist.len() != self.vocab.len() {
            return Err(BackendError::InvalidInput(format!(
                "rule produced {} entries for a vocabulary of {}",
                dist.len(),
                self.vocab.len()
            )));
        }
        Ok(dist)
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        Some(self)
    }

    fn default_template(&self) -> Option<Template> {
        self.template.clone()
    }
}

impl Tokenizer for ScriptedBackend {
    /// Greedy longest match against the vocabulary strings.
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let best = self
                .vocab
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.is_empty() && rest.starts_with(s.as_str()))
                .max_by_key(|(i, s)| (s.len(), std::cmp::Reverse(*i)));
            let Some((i, s)) = best else {
                return Err(BackendError::InvalidInput(format!("cannot tokenize {rest:?}")));
            };
            out.push(TokenId(i as u32));
            rest = &rest[s.len()..];
        }
        Ok(out)
    }

    fn decode(&self, token: TokenId) -> Result<String, BackendError> {
        self.vocab
            .get(token.index())
            .cloned()
            .ok_or(BackendError::TokenOutOfRange {
                token,
                vocab: self.vocab.len(),
            })
    }
}

/// Items after the last occurrence of `token`, or `None` if absent.
pub fn count_after_last(prefix: &[PrefixItem], token: TokenId) -> Option<usize> {
    prefix
        .iter()
        .rposition(|i| i.token() == Some(token))
        .map(|p| prefix.len() - p - 1)
}

/// One-hot distribution helper for rules.
pub fn point(vocab: usize, token: TokenId) -> ProbVector {
    ProbVector::one_hot(vocab, token.index())
}

/// Distribution from sparse `(token, weight)` pairs.
pub fn sparse(vocab: usize, entries: &[(TokenId, f64)]) -> Result<ProbVector, BackendError> {
    let mut v = vec![0.0; vocab];
    for &(t, w) in entries {
        check_token(t, vocab)?;
        v[t.index()] += w;
    }
    Ok(ProbVector::from_weights(v)?)
}

/// One question of a [`QuizSpec`]. The draft first commits to a reasoning
/// path drawn from `weights`, then boxes the digit that path leads to.
/// Thinking emits `think_len` filler tokens and closes; the final answer
/// boxes `corrected` unless the draft is visible, in which case it copies
/// the draft's digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizQuestion {
    pub weights: Vec<f64>,
    pub path_answers: Vec<u8>,
    pub corrected: u8,
    pub think_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizSpec {
    pub questions: Vec<QuizQuestion>,
}

impl QuizSpec {
    /// Random questions with 2..=4 paths each, answers in 0..=9.
    pub fn random(seed: u64, n_questions: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let questions = (0..n_questions)
            .map(|_| {
                let n_paths = rng.random_range(2..=4usize);
                let raw: Vec<f64> = (0..n_paths).map(|_| rng.random::<f64>() + 0.05).collect();
                let total: f64 = raw.iter().sum();
                let corrected = rng.random_range(0..10u8);
                // some paths agree with the right answer, some do not
                let path_answers = (0..n_paths)
                    .map(|_| if rng.random_bool(0.5) { corrected } else { rng.random_range(0..10u8) })
                    .collect();
                QuizQuestion {
                    weights: raw.into_iter().map(|w| w / total).collect(),
                    path_answers,
                    corrected,
                    think_len: rng.random_range(1..=12usize),
                }
            })
            .collect();
        QuizSpec { questions }
    }
}

/// Fixed token ids of the quiz vocabulary.
pub mod quiz_tokens {
    use crate::types::TokenId;
    pub const EOS: TokenId = TokenId(0);
    pub const THINK_OPEN: TokenId = TokenId(1);
    pub const THINK_CLOSE: TokenId = TokenId(2);
    pub const BOX_OPEN: TokenId = TokenId(3);
    pub const BOX_CLOSE: TokenId = TokenId(4);
    pub const DIGIT_0: u32 = 5;
    pub const FILLER_A: TokenId = TokenId(15);
    pub const FILLER_B: TokenId = TokenId(16);
    pub const FIRST_PATH: u32 = 17;
}

pub struct QuizBackend {
    spec: Arc<QuizSpec>,
    inner: ScriptedBackend,
    max_paths: usize,
}

impl QuizBackend {
    pub fn new(spec: QuizSpec) -> Result<Self, BackendError> {
        use quiz_tokens::*;
        if spec.questions.is_empty() {
            return Err(BackendError::InvalidInput("quiz needs at least one question".into()));
        }
        for (i, q) in spec.questions.iter().enumerate() {
            if q.weights.is_empty() || q.weights.len() != q.path_answers.len() {
                return Err(BackendError::InvalidInput(format!("question {i}: weights and path answers differ in length")));
            }
            ProbVector::new(q.weights.clone())?;
            if q.think_len == 0 {
                return Err(BackendError::InvalidInput(format!("question {i}: thinking needs at least one token")));
            }
            if q.path_answers.iter().chain([&q.corrected]).any(|&d| d > 9) {
                return Err(BackendError::InvalidInput(format!("question {i}: answers must be digits")));
            }
        }
        let max_paths = spec.questions.iter().map(|q| q.weights.len()).max().unwrap_or(0);
        let mut vocab: Vec<String> = vec!["<eos>".into(), "<think>".into(), "</think>".into(), "\\boxed{".into(), "}".into()];
        vocab.extend((0..10).map(|d| d.to_string()));
        vocab.push(" hmm".into());
        vocab.push(" ok".into());
        vocab.extend((0..max_paths).map(|j| format!("path{j} ")));
        vocab.extend((0..spec.questions.len()).map(|i| format!("Q{i}? ")));
        let first_question = FIRST_PATH + max_paths as u32;
        let n_vocab = vocab.len();
        let spec = Arc::new(spec);
        let rule_spec = Arc::clone(&spec);
        let refs: Vec<&str> = vocab.iter().map(String::as_str).collect();
        let inner = ScriptedBackend::new(&refs, move |prefix| quiz_rule(&rule_spec, n_vocab, first_question, prefix))
            .with_eos(EOS)
            .with_template(Template {
                think_open: vec![THINK_OPEN],
                think_close: vec![THINK_CLOSE],
                prompt_prefix: Vec::new(),
                prompt_suffix: Vec::new(),
            })
            .named(&format!("quiz({} questions)", spec.questions.len()));
        Ok(QuizBackend { spec, inner, max_paths })
    }

    pub fn spec(&self) -> &QuizSpec {
        &self.spec
    }

    pub fn question_token(&self, i: usize) -> TokenId {
        assert!(i < self.spec.questions.len());
        TokenId(quiz_tokens::FIRST_PATH + self.max_paths as u32 + i as u32)
    }

    /// The answer text a correct response boxes.
    pub fn expected(&self, i: usize) -> String {
        self.spec.questions[i].corrected.to_string()
    }
}

fn digit(d: u8) -> TokenId {
    TokenId(quiz_tokens::DIGIT_0 + d as u32)
}

fn quiz_rule(spec: &QuizSpec, vocab: usize, first_question: u32, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
    use quiz_tokens::*;
    let q_token = prefix
        .first()
        .and_then(PrefixItem::token)
        .filter(|t| t.0 >= first_question)
        .ok_or_else(|| BackendError::InvalidInput("quiz context must start with a question token".into()))?;
    let question = spec
        .questions
        .get((q_token.0 - first_question) as usize)
        .ok_or(BackendError::TokenOutOfRange { token: q_token, vocab })?;
    let open_at = prefix
        .iter()
        .position(|i| i.token() == Some(THINK_OPEN))
        .ok_or_else(|| BackendError::InvalidInput("quiz context lacks a think marker".into()))?;
    let draft_phase = prefix.get(open_at + 1).and_then(PrefixItem::token) == Some(THINK_CLOSE);

    if draft_phase {
        let n = prefix.len() - open_at - 2;
        return match n {
            0 => sparse(
                vocab,
                &question
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(j, &w)| (TokenId(FIRST_PATH + j as u32), w))
                    .collect::<Vec<_>>(),
            ),
            1 => Ok(point(vocab, BOX_OPEN)),
            2 => {
                // the digit follows whichever path the first draft item committed to
                let path_item = &prefix[open_at + 2];
                let mut mass: HashMap<u8, f64> = HashMap::new();
                match path_item {
                    PrefixItem::Discrete(t) => {
                        let j = t.0.checked_sub(FIRST_PATH).map(|j| j as usize);
                        let d = j.and_then(|j| question.path_answers.get(j)).copied().unwrap_or(question.corrected);
                        *mass.entry(d).or_default() += 1.0;
                    }
                    PrefixItem::Continuous(EmbeddingRef::Vector(e)) => {
                        for (j, &d) in question.path_answers.iter().enumerate() {
                            let w = e.as_slice()[(FIRST_PATH as usize) + j];
                            *mass.entry(d).or_default() += w;
                        }
                    }
                    PrefixItem::Continuous(EmbeddingRef::Handle(h)) => return Err(BackendError::UnresolvedHandle(h.clone())),
                }
                let entries: Vec<(TokenId, f64)> = mass.into_iter().map(|(d, w)| (digit(d), w)).collect();
                sparse(vocab, &entries)
            }
            3 => Ok(point(vocab, BOX_CLOSE)),
            _ => Ok(point(vocab, EOS)),
        };
    }

    let draft_visible = open_at > 1;
    let after_open = &prefix[open_at + 1..];
    match after_open.iter().position(|i| i.token() == Some(THINK_CLOSE)) {
        None => {
            if after_open.len() < question.think_len {
                sparse(vocab, &[(FILLER_A, 0.5), (FILLER_B, 0.5)])
            } else {
                Ok(point(vocab, THINK_CLOSE))
            }
        }
        Some(close_at) => {
            let n = after_open.len() - close_at - 1;
            match n {
                0 => Ok(point(vocab, BOX_OPEN)),
                1 => {
                    let copied = if draft_visible {
                        // draft layout after the question: path, \boxed{, digit, }
                        prefix.get(3).and_then(PrefixItem::token).filter(|t| (DIGIT_0..DIGIT_0 + 10).contains(&t.0))
                    } else {
                        None
                    };
                    Ok(point(vocab, copied.unwrap_or(digit(question.corrected))))
                }
                2 => Ok(point(vocab, BOX_CLOSE)),
                _ => Ok(point(vocab, EOS)),
            }
        }
    }
}

impl Backend for QuizBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.inner.info()
    }
    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError> {
        self.inner.token_embedding(token)
    }
    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
        self.inner.next_distribution(prefix)
    }
    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        Some(&self.inner)
    }
    fn default_template(&self) -> Option<Template> {
        self.inner.default_template()
    }
}

/// Token ids shared by the small fixtures below.
pub mod fixture_tokens {
    use crate::types::TokenId;
    pub const EOS: TokenId = TokenId(0);
    pub const THINK_OPEN: TokenId = TokenId(1);
    pub const THINK_CLOSE: TokenId = TokenId(2);
    pub const QUESTION: TokenId = TokenId(3);
    pub const ANSWER: TokenId = TokenId(4);
    pub const OTHER: TokenId = TokenId(5);
}

const FIXTURE_VOCAB: [&str; 6] = ["<eos>", "<think>", "</think>", "q", "a", "x"];

fn fixture_template() -> Template {
    Template {
        think_open: vec![fixture_tokens::THINK_OPEN],
        think_close: vec![fixture_tokens::THINK_CLOSE],
        prompt_prefix: Vec::new(),
        prompt_suffix: Vec::new(),
    }
}

/// Phase of a fixture context: `Draft(n)` with `n` draft items so far,
/// `Thinking(j)` with `j` thinking items, `Final(n)` with `n` answer items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixturePhase {
    Draft(usize),
    Thinking(usize),
    Final(usize),
}

pub fn fixture_phase(prefix: &[PrefixItem], open: TokenId, close: TokenId) -> Result<FixturePhase, BackendError> {
    let at = prefix
        .iter()
        .position(|i| i.token() == Some(open))
        .ok_or_else(|| BackendError::InvalidInput("context lacks a think marker".into()))?;
    if prefix.get(at + 1).and_then(PrefixItem::token) == Some(close) {
        return Ok(FixturePhase::Draft(prefix.len() - at - 2));
    }
    let after = &prefix[at + 1..];
    Ok(match after.iter().position(|i| i.token() == Some(close)) {
        Some(c) => FixturePhase::Final(after.len() - c - 1),
        None => FixturePhase::Thinking(after.len()),
    })
}

/// Every distribution is one-hot: `draft_len` copies of `a`, end of
/// sequence, and the same answer after any thinking.
pub fn one_hot_script(draft_len: usize) -> ScriptedBackend {
    use fixture_tokens::*;
    let v = FIXTURE_VOCAB.len();
    ScriptedBackend::new(&FIXTURE_VOCAB, move |prefix| {
        Ok(match fixture_phase(prefix, THINK_OPEN, THINK_CLOSE)? {
            FixturePhase::Draft(n) | FixturePhase::Final(n) if n < draft_len => point(v, ANSWER),
            FixturePhase::Thinking(j) if j < draft_len => point(v, OTHER),
            FixturePhase::Thinking(_) => point(v, THINK_CLOSE),
            _ => point(v, EOS),
        })
    })
    .with_eos(EOS)
    .with_template(fixture_template())
    .named("one-hot script")
}

/// Fixture whose draft and chunk scores are prescribed.
///
/// The student puts `student_prob` on `a` (draft and answer) or `x`
/// (thinking) at every step, so greedy decoding is deterministic. The
/// teacher differs only where the last prefix item is a genuine mixture:
/// in the draft it assigns `draft_teacher_prob`; inside thinking chunk `k`
/// it scales the student probability so that the chunk score equals
/// `chunk_kappas[k-1]`. After `chunk_kappas.len()` chunks of `chunk_size`
/// tokens the student emits end of sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedScript {
    pub draft_len: usize,
    pub student_prob: f64,
    pub draft_teacher_prob: f64,
    pub chunk_size: usize,
    pub chunk_kappas: Vec<f64>,
    pub answer_len: usize,
}

impl StagedScript {
    /// Draft score under greedy decoding at temperature 1.
    pub fn draft_kappa(&self) -> f64 {
        let soft = self.draft_len.saturating_sub(1) as f64;
        soft * (self.student_prob.ln() - self.draft_teacher_prob.ln()) / self.draft_len as f64
    }

    pub fn build(self) -> Result<ScriptedBackend, BackendError> {
        use fixture_tokens::*;
        if self.chunk_size < 2 || self.draft_len == 0 {
            return Err(BackendError::InvalidInput("staged script needs chunk_size >= 2 and a draft".into()));
        }
        let c = self.chunk_size as f64;
        let soft_probs: Vec<f64> = self
            .chunk_kappas
            .iter()
            .map(|k| self.student_prob * (-c * k / (c - 1.0)).exp())
            .collect();
        if soft_probs.iter().chain([&self.student_prob, &self.draft_teacher_prob]).any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(BackendError::InvalidInput("staged probabilities must lie in (0, 1)".into()));
        }
        let v = FIXTURE_VOCAB.len();
        let think_len = self.chunk_size * self.chunk_kappas.len();
        let script = self;
        let backend = ScriptedBackend::new(&FIXTURE_VOCAB, move |prefix| {
            let soft = matches!(prefix.last(), Some(PrefixItem::Continuous(_)));
            let pair = |tok: TokenId, p: f64| sparse(v, &[(tok, p), (if tok == ANSWER { OTHER } else { ANSWER }, 1.0 - p)]);
            match fixture_phase(prefix, THINK_OPEN, THINK_CLOSE)? {
                FixturePhase::Draft(n) if n < script.draft_len => {
                    pair(ANSWER, if soft { script.draft_teacher_prob } else { script.student_prob })
                }
                FixturePhase::Thinking(j) if j < think_len => {
                    let p = if soft { soft_probs[j / script.chunk_size] } else { script.student_prob };
                    pair(OTHER, p)
                }
                FixturePhase::Final(n) if n < script.answer_len => pair(ANSWER, script.student_prob),
                _ => Ok(point(v, EOS)),
            }
        })
        .with_eos(EOS)
        .with_template(fixture_template())
        .named("staged script");
        Ok(backend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::discrete;

    #[test]
    fn tokenizer_round_trip() {
        let b = ScriptedBackend::new(&["a", "ab", "c"], |_| Ok(ProbVector::uniform(3)));
        let t = b.encode("abca").unwrap();
        assert_eq!(t, vec![TokenId(1), TokenId(2), TokenId(0)]);
        assert_eq!(b.decode_all(&t).unwrap(), "abca");
        assert!(b.encode("x").is_err());
    }

    #[test]
    fn one_hot_inputs_are_canonicalized() {
        let b = ScriptedBackend::new(&["a", "b", "c"], |p| {
            Ok(match p.last() {
                Some(PrefixItem::Discrete(t)) => point(3, *t),
                _ => ProbVector::uniform(3),
            })
        });
        let hard = b.next_distribution(&[PrefixItem::Discrete(TokenId(2))]).unwrap();
        let soft = b
            .next_distribution(&[PrefixItem::Continuous(b.token_embedding(TokenId(2)).unwrap().into())])
            .unwrap();
        assert_eq!(hard, soft);
        let mix = EmbeddingVector::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(b.next_distribution(&[PrefixItem::Continuous(mix.into())]).unwrap(), ProbVector::uniform(3));
    }

    #[test]
    fn quiz_draft_follows_path() {
        let spec = QuizSpec {
            questions: vec![QuizQuestion {
                weights: vec![0.5, 0.5],
                path_answers: vec![3, 7],
                corrected: 7,
                think_len: 2,
            }],
        };
        let quiz = QuizBackend::new(spec).unwrap();
        let q = quiz.question_token(0);
        let t = quiz.default_template().unwrap();
        let mut ctx = t.draft_context(&[q]);
        let first = quiz.next_distribution(&ctx).unwrap();
        assert_eq!(first.prob(TokenId(quiz_tokens::FIRST_PATH)), 0.5);
        ctx.push(PrefixItem::Discrete(TokenId(quiz_tokens::FIRST_PATH + 1)));
        ctx.push(PrefixItem::Discrete(quiz_tokens::BOX_OPEN));
        assert_eq!(quiz.next_distribution(&ctx).unwrap().argmax(), digit(7));
        let text = quiz.inner.decode_all(&[q, quiz_tokens::BOX_OPEN, digit(7), quiz_tokens::BOX_CLOSE]).unwrap();
        assert_eq!(text, "Q0? \\boxed{7}");
    }

    #[test]
    fn quiz_soft_path_mixes_answers() {
        let spec = QuizSpec {
            questions: vec![QuizQuestion {
                weights: vec![0.25, 0.75],
                path_answers: vec![1, 2],
                corrected: 2,
                think_len: 1,
            }],
        };
        let quiz = QuizBackend::new(spec).unwrap();
        let mut ctx = quiz.default_template().unwrap().draft_context(&[quiz.question_token(0)]);
        let paths = quiz.next_distribution(&ctx).unwrap();
        ctx.push(PrefixItem::Continuous(quiz.mixed_embedding(&paths).unwrap().into()));
        ctx.push(PrefixItem::Discrete(quiz_tokens::BOX_OPEN));
        let d = quiz.next_distribution(&ctx).unwrap();
        assert!((d.prob(digit(1)) - 0.25).abs() < 1e-15);
        assert!((d.prob(digit(2)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn quiz_rejects_bad_specs() {
        let bad = QuizSpec {
            questions: vec![QuizQuestion {
                weights: vec![1.0],
                path_answers: vec![12],
                corrected: 1,
                think_len: 1,
            }],
        };
        assert!(QuizBackend::new(bad).is_err());
        assert!(QuizBackend::new(QuizSpec { questions: vec![] }).is_err());
    }

    #[test]
    fn quiz_needs_question_first() {
        let quiz = QuizBackend::new(QuizSpec::random(1, 3)).unwrap();
        assert!(quiz.next_distribution(&discrete(&[quiz_tokens::THINK_OPEN])).is_err());
    }

    #[test]
    fn count_after_last_helper() {
        let p = discrete(&crate::types::tokens(&[1, 2, 1, 3, 3]));
        assert_eq!(count_after_last(&p, TokenId(1)), Some(2));
        assert_eq!(count_after_last(&p, TokenId(9)), None);
    }
}
