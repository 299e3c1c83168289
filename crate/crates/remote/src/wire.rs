//! Request and reply bodies. Every body is JSON; numbers are decimal doubles.

use copt_core::controller::Template;
use copt_core::types::{EmbeddingRef, EmbeddingVector, PrefixItem, SamplingParams, TokenId, TypeError};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// One context item: `{"token": 5}`, `{"vector": [..]}` or `{"handle": "e3"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum WireItem {
    Token(u32),
    Vector(Vec<f64>),
    Handle(String),
}

impl From<&PrefixItem> for WireItem {
    fn from(item: &PrefixItem) -> Self {
        match item {
            PrefixItem::Discrete(t) => WireItem::Token(t.0),
            PrefixItem::Continuous(EmbeddingRef::Vector(v)) => WireItem::Vector(v.as_slice().to_vec()),
            PrefixItem::Continuous(EmbeddingRef::Handle(h)) => WireItem::Handle(h.clone()),
        }
    }
}

impl TryFrom<WireItem> for PrefixItem {
    type Error = TypeError;

    fn try_from(item: WireItem) -> Result<Self, TypeError> {
        Ok(match item {
            WireItem::Token(t) => PrefixItem::Discrete(TokenId(t)),
            WireItem::Vector(v) => PrefixItem::Continuous(EmbeddingVector::new(v)?.into()),
            WireItem::Handle(h) => PrefixItem::Continuous(EmbeddingRef::Handle(h)),
        })
    }
}

pub fn to_wire(items: &[PrefixItem]) -> Vec<WireItem> {
    items.iter().map(WireItem::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReply {
    pub protocol_version: u32,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub identifier: String,
    #[serde(default)]
    pub eos_token: Option<u32>,
    /// Whether `/tokenize` and `/detokenize` are served.
    #[serde(default)]
    pub tokenizer: bool,
    #[serde(default)]
    pub template: Option<Template>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub session_id: String,
    pub context: Vec<WireItem>,
    pub sampling: SamplingParams,
    /// Seeds the session's sampler on its first step; ignored afterwards.
    pub seed: u64,
    #[serde(default)]
    pub inline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReply {
    pub token: u32,
    pub chosen_prob: f64,
    pub embedding_handle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl StepReply {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.chosen_prob > 0.0 && self.chosen_prob <= 1.0) {
            return Err(format!("chosen_prob {} outside (0, 1]", self.chosen_prob));
        }
        if self.embedding_handle.is_empty() {
            return Err("empty embedding handle".into());
        }
        Ok(())
    }
}

/// `probs[t]` is the probability of `targets[t]` given the context and the
/// cached embeddings of `tail_handles[..t]`. The last handle is never
/// read, so a tail one shorter than the targets is also accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRequest {
    pub session_id: String,
    pub context: Vec<WireItem>,
    pub tail_handles: Vec<String>,
    pub targets: Vec<u32>,
    #[serde(default = "unit_temperature")]
    pub temperature: f64,
}

fn unit_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReply {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseRequest {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseReply {
    /// False when the session was unknown.
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeReply {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeRequest {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeReply {
    pub text: String,
}

/// Debug endpoints: the untempered next-token distribution and raw token
/// embeddings. They move `|V|` reals per call and exist so the backend
/// contract can be checked over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRequest {
    pub session_id: String,
    pub context: Vec<WireItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReply {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReply {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    UnknownHandle,
    DimensionMismatch,
    LengthMismatch,
    InvalidInput,
    Overloaded,
    Unsupported,
    Internal,
}

impl ErrorKind {
    pub fn status(self) -> u16 {
        match self {
            ErrorKind::UnknownHandle => 404,
            ErrorKind::Overloaded => 503,
            ErrorKind::Unsupported => 501,
            ErrorKind::Internal => 500,
            _ => 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub kind: ErrorKind,
    pub message: String,
}
