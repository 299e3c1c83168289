//! Decoding-time sampling: temperature, then top-k, top-p and min-p
//! truncation, then a categorical draw.
//!
//! The controller caches `p_t` and `e_t` from the tempered full-vocabulary
//! distribution ([`temper`]). Truncation only shapes which token is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{ProbVector, SamplingParams, TokenId};

pub type SessionRng = ChaCha8Rng;

pub fn session_rng(seed: u64) -> SessionRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("sampling filters removed all probability mass")]
    EmptyCandidateSet,
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
}

/// Rescales a distribution as if its logits were divided by `temperature`.
pub fn temper(dist: &ProbVector, temperature: f64) -> ProbVector {
    if temperature == 1.0 {
        return dist.clone();
    }
    let p = dist.as_slice();
    let max_log = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = p
        .iter()
        .map(|&x| if x > 0.0 { ((x.ln() - max_log) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    // the max entry contributes exp(0) = 1, so total >= 1
    ProbVector::new(weights.into_iter().map(|w| w / total).collect())
        .expect("tempered weights renormalize to a distribution")
}

/// Surviving `(token index, renormalized probability)` pairs after top-k,
/// top-p and min-p, in descending probability order.
pub fn truncate(tempered: &ProbVector, params: &SamplingParams) -> Result<Vec<(usize, f64)>, SamplingError> {
    let mut cands: Vec<(usize, f64)> = tempered
        .as_slice()
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, p)| p > 0.0)
        .collect();
    // stable sort keeps lower token ids first among ties
    cands.sort_by(|a, b| b.1.total_cmp(&a.1));

    if params.top_k > 0 && cands.len() > params.top_k {
        cands.truncate(params.top_k);
    }
    renormalize(&mut cands)?;

    if params.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = cands.len();
        for (i, &(_, p)) in cands.iter().enumerate() {
            cum += p;
            if cum >= params.top_p {
                keep = i + 1;
                break;
            }
        }
        cands.truncate(keep);
        renormalize(&mut cands)?;
    }

    if params.min_p > 0.0 {
        let threshold = params.min_p * cands.first().map(|c| c.1).unwrap_or(0.0);
        cands.retain(|&(_, p)| p >= threshold);
        renormalize(&mut cands)?;
    }
    Ok(cands)
}

fn renormalize(cands: &mut [(usize, f64)]) -> Result<(), SamplingError> {
    let total: f64 = cands.iter().map(|c| c.1).sum();
    if cands.is_empty() || !(total > 0.0) {
        return Err(SamplingError::EmptyCandidateSet);
    }
    for c in cands.iter_mut() {
        c.1 /= total;
    }
    Ok(())
}

/// Draws from an already tempered distribution.
pub fn draw<R: Rng + ?Sized>(tempered: &ProbVector, params: &SamplingParams, rng: &mut R) -> Result<TokenId, SamplingError> {
    if params.greedy {
        return Ok(tempered.argmax());
    }
    let cands = truncate(tempered, params)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(idx, p) in &cands {
        cum += p;
        if u < cum {
            return Ok(TokenId(idx as u32));
        }
    }
    // u landed in the round-off gap above the final cumulative sum
    Ok(TokenId(cands[cands.len() - 1].0 as u32))
}

/// Full pipeline on a raw model distribution.
pub fn sample<R: Rng + ?Sized>(dist: &ProbVector, params: &SamplingParams, rng: &mut R) -> Result<TokenId, SamplingError> {
    params
        .validate()
        .map_err(|e| SamplingError::InvalidParams(e.to_string()))?;
    draw(&temper(dist, params.temperature), params, rng)
}
