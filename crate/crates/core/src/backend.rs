//! The model contract every backend implements.
//!
//! A backend answers three questions: what a token embeds to, what the
//! next-token distribution is for a mixed discrete/continuous prefix, and
//! (through provided methods built on those two) what the teacher
//! probabilities of a generated segment are when its own tokens are swapped
//! for their cached mixture embeddings.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::Template;
use crate::sampling::{self, SamplingError, SessionRng};
use crate::types::{EmbeddingRef, EmbeddingVector, PrefixItem, ProbVector, SamplingParams, StepRecord, TokenId, TypeError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub identifier: String,
    #[serde(default)]
    pub eos_token: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherScores {
    pub probs: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prefix must contain at least one item")]
    EmptyPrefix,
    #[error("no records to score")]
    EmptyRecords,
    #[error("embedding handle {0:?} cannot be resolved by this backend")]
    UnresolvedHandle(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no tokenizer available for this backend")]
    NoTokenizer,
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Text mapping for backends that have one.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;
    fn decode(&self, token: TokenId) -> Result<String, BackendError>;

    fn decode_all(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        tokens.iter().map(|&t| self.decode(t)).collect()
    }
}

pub trait Backend: Send + Sync {
    fn info(&self) -> Result<BackendInfo, BackendError>;

    /// Row `token` of the input embedding matrix.
    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError>;

    /// Untempered next-token distribution for a non-empty prefix.
    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError>;

    /// `sum_v dist[v] * E(v)`.
    fn mixed_embedding(&self, dist: &ProbVector) -> Result<EmbeddingVector, BackendError> {
        mixed_embedding(self, dist)
    }

    /// `probs[t] = p(records[t].token | context, e_0 .. e_{t-1})` under the
    /// tempered distribution, where `e_j` is the cached embedding of
    /// `records[j]`. Backends with a native parallel pass override this.
    fn teacher_probs(&self, context: &[PrefixItem], records: &[StepRecord], temperature: f64) -> Result<TeacherScores, BackendError> {
        sequential_teacher_probs(self, context, records, temperature)
    }

    /// One generation step: tempered distribution, draw, and the cached
    /// `(p_t, e_t)` pair.
    fn step(&self, context: &[PrefixItem], params: &SamplingParams, rng: &mut SessionRng) -> Result<StepRecord, BackendError> {
        let dist = sampling::temper(&self.next_distribution(context)?, params.temperature);
        let token = sampling::draw(&dist, params, rng)?;
        let embedding = self.mixed_embedding(&dist)?;
        Ok(StepRecord::new(token, dist.prob(token), EmbeddingRef::Vector(embedding))?)
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        None
    }

    fn default_template(&self) -> Option<Template> {
        None
    }
}

/// Probability-weighted average of token embeddings.
pub fn mixed_embedding<B: Backend + ?Sized>(backend: &B, dist: &ProbVector) -> Result<EmbeddingVector, BackendError> {
    let info = backend.info()?;
    if dist.len() != info.vocab_size {
        return Err(BackendError::InvalidInput(format!(
            "distribution has {} entries, vocabulary has {}",
            dist.len(),
            info.vocab_size
        )));
    }
    let mut acc = vec![0.0; info.embedding_dim];
    for (v, &p) in dist.as_slice().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = backend.token_embedding(TokenId(v as u32))?;
        for (a, x) in acc.iter_mut().zip(row.as_slice()) {
            *a += p * x;
        }
    }
    Ok(EmbeddingVector::new(acc)?)
}

/// Teacher probabilities computed one position at a time through
/// [`Backend::next_distribution`]. This is the reference route that native
/// parallel implementations are checked against.
pub fn sequential_teacher_probs<B: Backend + ?Sized>(
    backend: &B,
    context: &[PrefixItem],
    records: &[StepRecord],
    temperature: f64,
) -> Result<TeacherScores, BackendError> {
    if records.is_empty() {
        return Err(BackendError::EmptyRecords);
    }
    let mut prefix: Vec<PrefixItem> = context.to_vec();
    let mut probs = Vec::with_capacity(records.len());
    for r in records {
        let dist = sampling::temper(&backend.next_distribution(&prefix)?, temperature);
        probs.push(dist.prob(r.token));
        prefix.push(PrefixItem::Continuous(r.embedding.clone()));
    }
    Ok(TeacherScores { probs })
}

/// Resolves a continuous item to a vector of the expected dimension.
pub fn expect_vector(item: &EmbeddingRef, dim: usize) -> Result<&EmbeddingVector, BackendError> {
    match item {
        EmbeddingRef::Vector(v) if v.dim() == dim => Ok(v),
        EmbeddingRef::Vector(v) => Err(BackendError::DimensionMismatch {
            expected: dim,
            got: v.dim(),
        }),
        EmbeddingRef::Handle(h) => Err(BackendError::UnresolvedHandle(h.clone())),
    }
}

pub fn check_token(token: TokenId, vocab: usize) -> Result<(), BackendError> {
    if token.index() < vocab {
        Ok(())
    } else {
        Err(BackendError::TokenOutOfRange { token, vocab })
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        (**self).info()
    }
    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError> {
        (**self).token_embedding(token)
    }
    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
        (**self).next_distribution(prefix)
    }
    fn mixed_embedding(&self, dist: &ProbVector) -> Result<EmbeddingVector, BackendError> {
        (**self).mixed_embedding(dist)
    }
    fn teacher_probs(&self, context: &[PrefixItem], records: &[StepRecord], temperature: f64) -> Result<TeacherScores, BackendError> {
        (**self).teacher_probs(context, records, temperature)
    }
    fn step(&self, context: &[PrefixItem], params: &SamplingParams, rng: &mut SessionRng) -> Result<StepRecord, BackendError> {
        (**self).step(context, params, rng)
    }
    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        (**self).tokenizer()
    }
    fn default_template(&self) -> Option<Template> {
        (**self).default_template()
    }
}

/// Call counters for a wrapped backend.
#[derive(Debug, Default)]
pub struct CallCounts {
    pub next_distribution: AtomicUsize,
    pub teacher_probs: AtomicUsize,
    pub step: AtomicUsize,
}

impl CallCounts {
    pub fn teacher(&self) -> usize {
        self.teacher_probs.load(Ordering::SeqCst)
    }
    pub fn steps(&self) -> usize {
        self.step.load(Ordering::SeqCst)
    }
}

/// Delegating backend that counts contract calls. Used to assert that a
/// decoding mode never runs the estimators.
pub struct CountingBackend<B> {
    inner: B,
    counts: Arc<CallCounts>,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            counts: Arc::new(CallCounts::default()),
        }
    }

    pub fn counts(&self) -> Arc<CallCounts> {
        Arc::clone(&self.counts)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.inner.info()
    }
    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError> {
        self.inner.token_embedding(token)
    }
    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
        self.counts.next_distribution.fetch_add(1, Ordering::SeqCst);
        self.inner.next_distribution(prefix)
    }
    fn mixed_embedding(&self, dist: &ProbVector) -> Result<EmbeddingVector, BackendError> {
        self.inner.mixed_embedding(dist)
    }
    fn teacher_probs(&self, context: &[PrefixItem], records: &[StepRecord], temperature: f64) -> Result<TeacherScores, BackendError> {
        self.counts.teacher_probs.fetch_add(1, Ordering::SeqCst);
        self.inner.teacher_probs(context, records, temperature)
    }
    fn step(&self, context: &[PrefixItem], params: &SamplingParams, rng: &mut SessionRng) -> Result<StepRecord, BackendError> {
        self.counts.step.fetch_add(1, Ordering::SeqCst);
        self.inner.step(context, params, rng)
    }
    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        self.inner.tokenizer()
    }
    fn default_template(&self) -> Option<Template> {
        self.inner.default_template()
    }
}

/// Hands out a backend per session. Local backends share one instance;
/// remote backends open a server-side session per call.
pub trait SessionSource: Send + Sync {
    fn open(&self, seed: u64) -> Result<Arc<dyn Backend>, BackendError>;
    fn identifier(&self) -> String;
}

/// A local backend shared by every session.
pub struct Shared(pub Arc<dyn Backend>);

impl SessionSource for Shared {
    fn open(&self, _seed: u64) -> Result<Arc<dyn Backend>, BackendError> {
        Ok(Arc::clone(&self.0))
    }
    fn identifier(&self) -> String {
        self.0
            .info()
            .map(|i| i.identifier)
            .unwrap_or_else(|_| "unknown".to_string())
    }
}
