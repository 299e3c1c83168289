//! Finite latent-state mixtures: a model where a discrete prefix commits to
//! one state `s ~ w` and emits `a ~ P_s`, while a continuous prefix carrying
//! `w` itself emits the mixture `sum_s w(s) P_s`.
//!
//! The functions here compute the expected reverse-KL score, the mutual
//! information between state and answer, and the related bounds by exact
//! summation. [`MixtureBackend`] exposes the same model through the
//! [`Backend`] contract so the estimators can be run against it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{check_token, Backend, BackendError, BackendInfo};
use crate::controller::Template;
use crate::types::{validate_prob_vector, EmbeddingRef, EmbeddingVector, PrefixItem, ProbVector, TokenId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixtureError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("state {0} out of range")]
    StateOutOfRange(usize),
    #[error("answer {0} out of range")]
    AnswerOutOfRange(usize),
    #[error("state {0} has zero weight")]
    ZeroWeight(usize),
    #[error("answer {answer} has zero probability under state {state}")]
    ZeroProbability { state: usize, answer: usize },
    #[error("reference distribution assigns zero mass to answer {0} that the model can emit")]
    SupportMismatch(usize),
    #[error("model has no deterministic answer map")]
    NoAnswerMap,
    #[error("infeasible probability floor {floor} for {n_answers} answers")]
    InfeasibleFloor { floor: f64, n_answers: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawModel {
    weights: Vec<f64>,
    per_state: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_map: Option<Vec<usize>>,
}

/// Weights `w` over states, one answer distribution per state, and an
/// optional deterministic answer map `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct LatentStateModel {
    weights: Vec<f64>,
    per_state: Vec<Vec<f64>>,
    answer_map: Option<Vec<usize>>,
}

impl TryFrom<RawModel> for LatentStateModel {
    type Error = MixtureError;
    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        LatentStateModel::with_answer_map(raw.weights, raw.per_state, raw.answer_map)
    }
}

impl From<LatentStateModel> for RawModel {
    fn from(m: LatentStateModel) -> Self {
        RawModel {
            weights: m.weights,
            per_state: m.per_state,
            answer_map: m.answer_map,
        }
    }
}

impl LatentStateModel {
    pub fn new(weights: Vec<f64>, per_state: Vec<Vec<f64>>) -> Result<Self, MixtureError> {
        Self::with_answer_map(weights, per_state, None)
    }

    /// Each state emits `answer_map[s]` with probability one.
    pub fn deterministic(weights: Vec<f64>, answer_map: Vec<usize>, n_answers: usize) -> Result<Self, MixtureError> {
        let mut per_state = Vec::with_capacity(answer_map.len());
        for &a in &answer_map {
            if a >= n_answers {
                return Err(MixtureError::AnswerOutOfRange(a));
            }
            let mut row = vec![0.0; n_answers];
            row[a] = 1.0;
            per_state.push(row);
        }
        Self::with_answer_map(weights, per_state, Some(answer_map))
    }

    fn with_answer_map(weights: Vec<f64>, per_state: Vec<Vec<f64>>, answer_map: Option<Vec<usize>>) -> Result<Self, MixtureError> {
        if weights.is_empty() || weights.len() != per_state.len() {
            return Err(MixtureError::InvalidModel(format!(
                "{} weights for {} state distributions",
                weights.len(),
                per_state.len()
            )));
        }
        if !validate_prob_vector(&weights) {
            return Err(MixtureError::InvalidModel("weights are not a distribution".into()));
        }
        let n_a = per_state[0].len();
        if n_a < 1 {
            return Err(MixtureError::InvalidModel("empty answer alphabet".into()));
        }
        for (s, row) in per_state.iter().enumerate() {
            if row.len() != n_a {
                return Err(MixtureError::InvalidModel(format!("state {s} has {} answers, expected {n_a}", row.len())));
            }
            if !validate_prob_vector(row) {
                return Err(MixtureError::InvalidModel(format!("state {s} distribution is invalid")));
            }
        }
        if let Some(g) = &answer_map {
            if g.len() != weights.len() {
                return Err(MixtureError::InvalidModel("answer map length differs from state count".into()));
            }
            for (s, &a) in g.iter().enumerate() {
                if a >= n_a {
                    return Err(MixtureError::AnswerOutOfRange(a));
                }
                if per_state[s].iter().enumerate().any(|(b, &p)| p != if b == a { 1.0 } else { 0.0 }) {
                    return Err(MixtureError::InvalidModel(format!("state {s} is not one-hot at its mapped answer {a}")));
                }
            }
        }
        Ok(LatentStateModel {
            weights,
            per_state,
            answer_map,
        })
    }

    pub fn n_states(&self) -> usize {
        self.weights.len()
    }

    pub fn n_answers(&self) -> usize {
        self.per_state[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn state_distribution(&self, s: usize) -> &[f64] {
        &self.per_state[s]
    }

    pub fn answer_map(&self) -> Option<&[usize]> {
        self.answer_map.as_deref()
    }

    /// Same per-state distributions under different weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self, MixtureError> {
        Self::with_answer_map(weights, self.per_state.clone(), self.answer_map.clone())
    }
}

/// `P̄_w(a) = sum_s w(s) P_s(a)`.
pub fn mixture_distribution(m: &LatentStateModel) -> Vec<f64> {
    mix(&m.per_state, &m.weights)
}

fn mix(per_state: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let n_a = per_state[0].len();
    let mut out = vec![0.0; n_a];
    for (row, &w) in per_state.iter().zip(weights) {
        for (o, &p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    out
}

/// `log P_s(a) - log P̄_w(a)` for one emitted answer.
pub fn local_kappa(m: &LatentStateModel, s: usize, a: usize) -> Result<f64, MixtureError> {
    if s >= m.n_states() {
        return Err(MixtureError::StateOutOfRange(s));
    }
    if a >= m.n_answers() {
        return Err(MixtureError::AnswerOutOfRange(a));
    }
    if m.weights[s] <= 0.0 {
        return Err(MixtureError::ZeroWeight(s));
    }
    let p = m.per_state[s][a];
    if p <= 0.0 {
        return Err(MixtureError::ZeroProbability { state: s, answer: a });
    }
    let bar = mixture_distribution(m)[a];
    Ok(p.ln() - bar.ln())
}

/// `KL(p || q)` with `0 log 0 = 0`; an entry with `p > 0 = q` is an error.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, MixtureError> {
    let mut acc = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa == 0.0 {
            continue;
        }
        if qa <= 0.0 {
            return Err(MixtureError::SupportMismatch(a));
        }
        acc += pa * (pa / qa).ln();
    }
    Ok(acc)
}

/// `sum_s w(s) KL(P_s || P̄_w)`.
pub fn expected_kappa(m: &LatentStateModel) -> f64 {
    let bar = mixture_distribution(m);
    m.weights
        .iter()
        .zip(&m.per_state)
        .filter(|(&w, _)| w > 0.0)
        // P̄_w(a) >= w(s) P_s(a) > 0 wherever P_s(a) > 0
        .map(|(&w, row)| w * kl_divergence(row, &bar).expect("mixture dominates each weighted component"))
        .sum()
}

/// `I(S; A)` from the joint `w(s) P_s(a)` and both of its marginals.
pub fn mutual_information(m: &LatentStateModel) -> f64 {
    let n_s = m.n_states();
    let n_a = m.n_answers();
    let joint: Vec<Vec<f64>> = (0..n_s)
        .map(|s| (0..n_a).map(|a| m.weights[s] * m.per_state[s][a]).collect())
        .collect();
    let state_marginal: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let answer_marginal: Vec<f64> = (0..n_a).map(|a| joint.iter().map(|row| row[a]).sum()).collect();
    let mut mi = 0.0;
    for s in 0..n_s {
        for a in 0..n_a {
            let j = joint[s][a];
            if j > 0.0 {
                mi += j * (j / (state_marginal[s] * answer_marginal[a])).ln();
            }
        }
    }
    mi
}

/// `sum_s w(s) KL(P_s || p_star)`, an upper bound on [`expected_kappa`] for
/// any reference distribution `p_star`.
pub fn stability_bound(m: &LatentStateModel, p_star: &[f64]) -> Result<f64, MixtureError> {
    if p_star.len() != m.n_answers() {
        return Err(MixtureError::InvalidModel(format!(
            "reference has {} entries, model has {} answers",
            p_star.len(),
            m.n_answers()
        )));
    }
    if !validate_prob_vector(p_star) {
        return Err(MixtureError::InvalidModel("reference is not a distribution".into()));
    }
    let mut acc = 0.0;
    for (&w, row) in m.weights.iter().zip(&m.per_state) {
        if w > 0.0 {
            acc += w * kl_divergence(row, p_star)?;
        }
    }
    Ok(acc)
}

/// Entropy of `g(S)` for a deterministic model: `rho(a) = sum_{g(s)=a} w(s)`.
pub fn induced_answer_entropy(m: &LatentStateModel) -> Result<f64, MixtureError> {
    let g = m.answer_map.as_ref().ok_or(MixtureError::NoAnswerMap)?;
    let mut rho = vec![0.0; m.n_answers()];
    for (&w, &a) in m.weights.iter().zip(g) {
        rho[a] += w;
    }
    Ok(rho.iter().filter(|&&r| r > 0.0).map(|&r| -r * r.ln()).sum())
}

/// Random model with every answer probability at least `floor`.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_answers: usize, floor: f64) -> Result<LatentStateModel, MixtureError> {
    if n_states < 2 || n_answers < 2 {
        return Err(MixtureError::InvalidModel("need at least two states and two answers".into()));
    }
    if !(floor >= 0.0) || floor * n_answers as f64 >= 1.0 {
        return Err(MixtureError::InfeasibleFloor { floor, n_answers });
    }
    let weights = normalized(rng, n_states);
    let free = 1.0 - floor * n_answers as f64;
    let per_state = (0..n_states)
        .map(|_| normalized(rng, n_answers).into_iter().map(|p| floor + free * p).collect())
        .collect();
    LatentStateModel::new(weights, per_state)
}

fn normalized<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// A [`LatentStateModel`] behind the backend contract.
///
/// Vocabulary: `n_S` state markers (ids `0..n_S`) followed by `n_A` answer
/// tokens. Marker `s` embeds as the one-hot basis vector `e_s`; answer tokens
/// embed as zero vectors. The next-token distribution depends only on the
/// last prefix item:
///
/// * marker `s` → `P_s` over the answer tokens,
/// * answer token → `w` over the markers,
/// * continuous `e` with unit mass → `sum_s e[s] P_s` over the answer tokens,
/// * continuous `e` with zero mass (a mixture of answer embeddings) → `w`.
#[derive(Debug, Clone)]
pub struct MixtureBackend {
    model: LatentStateModel,
}

/// Mass tolerance for recognising a continuous input as a state mixture.
const SIMPLEX_TOLERANCE: f64 = 1e-9;

impl MixtureBackend {
    pub fn new(model: LatentStateModel) -> Self {
        MixtureBackend { model }
    }

    pub fn model(&self) -> &LatentStateModel {
        &self.model
    }

    pub fn marker(&self, s: usize) -> TokenId {
        assert!(s < self.model.n_states());
        TokenId(s as u32)
    }

    pub fn answer_token(&self, a: usize) -> TokenId {
        assert!(a < self.model.n_answers());
        TokenId((self.model.n_states() + a) as u32)
    }

    /// Answer index of a vocabulary token, if it is an answer token.
    pub fn answer_index(&self, token: TokenId) -> Option<usize> {
        token.index().checked_sub(self.model.n_states()).filter(|&a| a < self.model.n_answers())
    }

    fn vocab(&self) -> usize {
        self.model.n_states() + self.model.n_answers()
    }

    fn lift_answers(&self, answers: Vec<f64>) -> Result<ProbVector, BackendError> {
        let mut v = vec![0.0; self.model.n_states()];
        v.extend(answers);
        Ok(ProbVector::new(v)?)
    }

    fn lift_states(&self) -> Result<ProbVector, BackendError> {
        let mut v = self.model.weights.clone();
        v.extend(std::iter::repeat_n(0.0, self.model.n_answers()));
        Ok(ProbVector::new(v)?)
    }
}

impl Backend for MixtureBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            vocab_size: self.vocab(),
            embedding_dim: self.model.n_states(),
            identifier: format!("mixture(states={}, answers={})", self.model.n_states(), self.model.n_answers()),
            eos_token: None,
        })
    }

    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError> {
        check_token(token, self.vocab())?;
        let mut e = vec![0.0; self.model.n_states()];
        if token.index() < self.model.n_states() {
            e[token.index()] = 1.0;
        }
        Ok(EmbeddingVector::new(e)?)
    }

    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
        let last = prefix.last().ok_or(BackendError::EmptyPrefix)?;
        match last {
            PrefixItem::Discrete(t) => {
                check_token(*t, self.vocab())?;
                if t.index() < self.model.n_states() {
                    self.lift_answers(self.model.per_state[t.index()].clone())
                } else {
                    self.lift_states()
                }
            }
            PrefixItem::Continuous(EmbeddingRef::Handle(h)) => Err(BackendError::UnresolvedHandle(h.clone())),
            PrefixItem::Continuous(EmbeddingRef::Vector(e)) => {
                if e.dim() != self.model.n_states() {
                    return Err(BackendError::DimensionMismatch {
                        expected: self.model.n_states(),
                        got: e.dim(),
                    });
                }
                if e.as_slice().iter().any(|&x| x < -SIMPLEX_TOLERANCE) {
                    return Err(BackendError::InvalidInput("state mixture has negative weight".into()));
                }
                let mass: f64 = e.as_slice().iter().sum();
                if (mass - 1.0).abs() <= SIMPLEX_TOLERANCE {
                    self.lift_answers(mix(&self.model.per_state, e.as_slice()))
                } else if mass.abs() <= SIMPLEX_TOLERANCE {
                    self.lift_states()
                } else {
                    Err(BackendError::InvalidInput(format!("continuous input has mass {mass}, expected 0 or 1")))
                }
            }
        }
    }

    fn default_template(&self) -> Option<Template> {
        None
    }
}
