//! A tiny seeded causal model that accepts continuous inputs natively.
//!
//! The hidden state at position `n` is a position-decayed average of the
//! input vectors `x_1..x_n`, passed through `tanh(A h + b)` and a linear
//! head. Inputs enter only through their vectors, so a discrete token and
//! its embedding row produce identical outputs, and the model is causal so a
//! single left-to-right pass yields every teacher probability at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{check_token, expect_vector, Backend, BackendError, BackendInfo, TeacherScores};
use crate::controller::Template;
use crate::sampling;
use crate::types::{EmbeddingVector, PrefixItem, ProbVector, StepRecord, TokenId};

pub const MAX_VOCAB: usize = 64;
pub const MAX_DIM: usize = 32;
/// Cap on `|V|^T` for [`enumerate_sequences`].
pub const MAX_ENUMERATION: usize = 1_000_000;

const LOGIT_GAIN: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("vocabulary size {0} outside 2..={MAX_VOCAB}")]
    VocabSize(usize),
    #[error("embedding dimension {0} outside 1..={MAX_DIM}")]
    Dim(usize),
    #[error("{vocab}^{len} sequences exceeds the enumeration cap")]
    EnumerationTooLarge { vocab: usize, len: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    seed: u64,
    vocab: usize,
    dim: usize,
    /// Row-major `vocab x dim`.
    embedding: Vec<f64>,
    /// Row-major `dim x dim`.
    mixer: Vec<f64>,
    bias: Vec<f64>,
    /// Row-major `dim x vocab`.
    head: Vec<f64>,
    decay: f64,
}

pub fn build_toy(seed: u64, vocab_size: usize, dim: usize) -> Result<ToyModel, ToyError> {
    if !(2..=MAX_VOCAB).contains(&vocab_size) {
        return Err(ToyError::VocabSize(vocab_size));
    }
    if !(1..=MAX_DIM).contains(&dim) {
        return Err(ToyError::Dim(dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.5..=0.5)).collect() };
    let embedding = draw(vocab_size * dim);
    let mixer = draw(dim * dim);
    let bias = draw(dim);
    let head = draw(dim * vocab_size);
    let decay = 0.7 + 0.4 * draw(1)[0];
    Ok(ToyModel {
        seed,
        vocab: vocab_size,
        dim,
        embedding,
        mixer,
        bias,
        head,
        decay,
    })
}

impl ToyModel {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn row(&self, token: TokenId) -> &[f64] {
        let i = token.index() * self.dim;
        &self.embedding[i..i + self.dim]
    }

    fn input<'a>(&'a self, item: &'a PrefixItem) -> Result<&'a [f64], BackendError> {
        match item {
            PrefixItem::Discrete(t) => {
                check_token(*t, self.vocab)?;
                Ok(self.row(*t))
            }
            PrefixItem::Continuous(e) => Ok(expect_vector(e, self.dim)?.as_slice()),
        }
    }

    /// Distribution from the running decayed sum and its normalizer.
    fn readout(&self, sum: &[f64], norm: f64) -> ProbVector {
        let d = self.dim;
        let hidden: Vec<f64> = (0..d)
            .map(|i| {
                let pre: f64 = (0..d).map(|j| self.mixer[i * d + j] * sum[j] / norm).sum::<f64>() + self.bias[i];
                pre.tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..self.vocab)
            .map(|v| LOGIT_GAIN * (0..d).map(|i| hidden[i] * self.head[i * self.vocab + v]).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        ProbVector::new(exps.into_iter().map(|x| x / total).collect()).expect("softmax is a distribution")
    }

    fn absorb(&self, sum: &mut [f64], norm: &mut f64, x: &[f64]) {
        for (s, &xi) in sum.iter_mut().zip(x) {
            *s = self.decay * *s + xi;
        }
        *norm = self.decay * *norm + 1.0;
    }
}

impl Backend for ToyModel {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            vocab_size: self.vocab,
            embedding_dim: self.dim,
            identifier: format!("toy(seed={}, vocab={}, dim={})", self.seed, self.vocab, self.dim),
            eos_token: (self.vocab >= 4).then(|| TokenId(self.vocab as u32 - 1)),
        })
    }

    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError> {
        check_token(token, self.vocab)?;
        Ok(EmbeddingVector::new(self.row(token).to_vec())?)
    }

    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
        if prefix.is_empty() {
            return Err(BackendError::EmptyPrefix);
        }
        let n = prefix.len();
        // weights decay^(n-1-j), accumulated directly rather than by the running recurrence
        let mut sum = vec![0.0; self.dim];
        let mut norm = 0.0;
        for (j, item) in prefix.iter().enumerate() {
            let w = self.decay.powi((n - 1 - j) as i32);
            for (s, &x) in sum.iter_mut().zip(self.input(item)?) {
                *s += w * x;
            }
            norm += w;
        }
        Ok(self.readout(&sum, norm))
    }

    /// One causal pass over `context ++ [e_0, .., e_{T-2}]`, reading out the
    /// distribution at every position.
    fn teacher_probs(&self, context: &[PrefixItem], records: &[crate::types::StepRecord], temperature: f64) -> Result<TeacherScores, BackendError> {
        if records.is_empty() {
            return Err(BackendError::EmptyRecords);
        }
        if context.is_empty() {
            return Err(BackendError::EmptyPrefix);
        }
        let mut sum = vec![0.0; self.dim];
        let mut norm = 0.0;
        for item in context {
            let x = self.input(item)?;
            self.absorb(&mut sum, &mut norm, x);
        }
        let mut probs = Vec::with_capacity(records.len());
        for r in records {
            check_token(r.token, self.vocab)?;
            let dist = sampling::temper(&self.readout(&sum, norm), temperature);
            probs.push(dist.prob(r.token));
            let x = expect_vector(&r.embedding, self.dim)?;
            self.absorb(&mut sum, &mut norm, x.as_slice());
        }
        Ok(TeacherScores { probs })
    }

    fn default_template(&self) -> Option<Template> {
        (self.vocab >= 4).then(|| {
            let v = self.vocab as u32;
            Template {
                think_open: vec![TokenId(v - 3)],
                think_close: vec![TokenId(v - 2)],
                prompt_prefix: Vec::new(),
                prompt_suffix: Vec::new(),
            }
        })
    }
}

/// Every token sequence of length `len` after `context`, with its
/// chain-rule probability under the untempered model.
pub fn enumerate_sequences<B: Backend + ?Sized>(backend: &B, context: &[PrefixItem], len: usize) -> Result<Vec<(Vec<TokenId>, f64)>, ToyError> {
    let vocab = backend.info()?.vocab_size;
    let total = (vocab as f64).powi(len as i32);
    if total > MAX_ENUMERATION as f64 {
        return Err(ToyError::EnumerationTooLarge { vocab, len });
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut prefix = context.to_vec();
    let mut tokens = Vec::with_capacity(len);
    extend(backend, &mut prefix, &mut tokens, 1.0, len, &mut out)?;
    Ok(out)
}

fn extend<B: Backend + ?Sized>(
    backend: &B,
    prefix: &mut Vec<PrefixItem>,
    tokens: &mut Vec<TokenId>,
    prob: f64,
    remaining: usize,
    out: &mut Vec<(Vec<TokenId>, f64)>,
) -> Result<(), ToyError> {
    if remaining == 0 {
        out.push((tokens.clone(), prob));
        return Ok(());
    }
    let dist = backend.next_distribution(prefix)?;
    for (v, &p) in dist.as_slice().iter().enumerate() {
        let t = TokenId(v as u32);
        prefix.push(PrefixItem::Discrete(t));
        tokens.push(t);
        extend(backend, prefix, tokens, prob * p, remaining - 1, out)?;
        tokens.pop();
        prefix.pop();
    }
    Ok(())
}

/// Student records for a fixed token sequence: the cached `(p_t, e_t)` a
/// generation run would have produced had it drawn exactly these tokens.
pub fn records_for<B: Backend + ?Sized>(backend: &B, context: &[PrefixItem], seq: &[TokenId], temperature: f64) -> Result<Vec<StepRecord>, BackendError> {
    let mut prefix = context.to_vec();
    let mut records = Vec::with_capacity(seq.len());
    for &t in seq {
        let dist = sampling::temper(&backend.next_distribution(&prefix)?, temperature);
        let e = backend.mixed_embedding(&dist)?;
        records.push(StepRecord::new(t, dist.prob(t), e.into())?);
        prefix.push(PrefixItem::Discrete(t));
    }
    Ok(records)
}
