//! Blocking client. A [`RemoteClient`] holds the connection and the
//! server's metadata; each [`RemoteSession`] is one server-side session and
//! implements [`Backend`], so the controller drives it like a local model.
//!
//! Sampling happens on the server with the session seed, so the controller's
//! local RNG is not consulted by remote steps.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use copt_core::backend::{Backend, BackendError, BackendInfo, SessionSource, TeacherScores, Tokenizer};
use copt_core::controller::Template;
use copt_core::sampling::SessionRng;
use copt_core::types::{EmbeddingRef, EmbeddingVector, PrefixItem, ProbVector, SamplingParams, StepRecord, TokenId};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::wire::*;

const OVERLOAD_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("invalid endpoint {0:?}")]
    Endpoint(String),
    #[error("cannot reach server: {0}")]
    Unreachable(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("incompatible server: protocol version {server}, client speaks {client}")]
    VersionMismatch { server: u32, client: u32 },
    #[error("server rejected request ({kind:?}): {message}")]
    Server { kind: ErrorKind, message: String },
    #[error("malformed reply: {0}")]
    Protocol(String),
}

impl RemoteError {
    pub fn is_transport(&self) -> bool {
        matches!(self, RemoteError::Unreachable(_) | RemoteError::Timeout(_))
    }
}

impl From<RemoteError> for BackendError {
    fn from(e: RemoteError) -> Self {
        match e {
            RemoteError::Unreachable(_) | RemoteError::Timeout(_) => BackendError::Transport(e.to_string()),
            RemoteError::Server {
                kind: ErrorKind::UnknownHandle,
                message,
            } => BackendError::UnresolvedHandle(message),
            RemoteError::Server {
                kind: ErrorKind::Overloaded,
                message,
            } => BackendError::Unavailable(message),
            RemoteError::Server {
                kind: ErrorKind::InvalidInput | ErrorKind::DimensionMismatch | ErrorKind::LengthMismatch,
                message,
            } => BackendError::InvalidInput(message),
            other => BackendError::Protocol(other.to_string()),
        }
    }
}

fn classify(e: reqwest::Error) -> RemoteError {
    if e.is_timeout() {
        RemoteError::Timeout(e.to_string())
    } else if e.is_connect() || e.is_request() {
        RemoteError::Unreachable(e.to_string())
    } else {
        RemoteError::Protocol(e.to_string())
    }
}

struct Inner {
    http: reqwest::blocking::Client,
    base: String,
    meta: MetaReply,
    sessions: AtomicU64,
}

#[derive(Clone)]
pub struct RemoteClient {
    inner: Arc<Inner>,
}

impl RemoteClient {
    /// Fetches `/meta` and checks the protocol version.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, RemoteError> {
        let base = endpoint.trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(RemoteError::Endpoint(endpoint.to_string()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RemoteError::Endpoint(e.to_string()))?;
        let reply = http.get(format!("{base}/meta")).send().map_err(classify)?;
        let meta: MetaReply = decode(reply)?;
        if meta.protocol_version != PROTOCOL_VERSION {
            return Err(RemoteError::VersionMismatch {
                server: meta.protocol_version,
                client: PROTOCOL_VERSION,
            });
        }
        if meta.vocab_size == 0 || meta.embedding_dim == 0 {
            return Err(RemoteError::Protocol("server reports an empty vocabulary or embedding".into()));
        }
        Ok(RemoteClient {
            inner: Arc::new(Inner {
                http,
                base,
                meta,
                sessions: AtomicU64::new(0),
            }),
        })
    }

    pub fn meta(&self) -> &MetaReply {
        &self.inner.meta
    }

    pub fn info(&self) -> BackendInfo {
        let m = &self.inner.meta;
        BackendInfo {
            vocab_size: m.vocab_size,
            embedding_dim: m.embedding_dim,
            identifier: format!("remote:{} ({})", self.inner.base, m.identifier),
            eos_token: m.eos_token.map(TokenId),
        }
    }

    /// A fresh server-side session sampling from `seed`.
    pub fn session(&self, seed: u64) -> RemoteSession {
        let n = self.inner.sessions.fetch_add(1, Ordering::Relaxed);
        RemoteSession {
            client: self.clone(),
            id: format!("{}-{n}", uuid::Uuid::new_v4()),
            seed,
            decoded: Mutex::new(HashMap::new()),
        }
    }

    fn post<Req: Serialize, Rep: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Rep, RemoteError> {
        let url = format!("{}{path}", self.inner.base);
        let mut attempt = 0;
        loop {
            let reply = self.inner.http.post(&url).json(body).send().map_err(classify)?;
            match decode(reply) {
                Err(RemoteError::Server {
                    kind: ErrorKind::Overloaded,
                    ..
                }) if attempt < OVERLOAD_RETRIES => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(25 << attempt));
                }
                other => return other,
            }
        }
    }
}

fn decode<T: DeserializeOwned>(reply: reqwest::blocking::Response) -> Result<T, RemoteError> {
    let status = reply.status();
    let body = reply.text().map_err(classify)?;
    if status.is_success() {
        return serde_json::from_str(&body).map_err(|e| RemoteError::Protocol(format!("{e}: {body}")));
    }
    match serde_json::from_str::<ErrorReply>(&body) {
        Ok(err) => Err(RemoteError::Server {
            kind: err.kind,
            message: err.message,
        }),
        Err(_) => Err(RemoteError::Protocol(format!("HTTP {status}: {body}"))),
    }
}

impl SessionSource for RemoteClient {
    fn open(&self, seed: u64) -> Result<Arc<dyn Backend>, BackendError> {
        Ok(Arc::new(self.session(seed)))
    }

    fn identifier(&self) -> String {
        self.info().identifier
    }
}

/// One server-side session. Closed on drop.
pub struct RemoteSession {
    client: RemoteClient,
    id: String,
    seed: u64,
    decoded: Mutex<HashMap<u32, String>>,
}

impl RemoteSession {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn step_raw(&self, context: &[PrefixItem], sampling: &SamplingParams, inline: bool) -> Result<StepReply, RemoteError> {
        let reply: StepReply = self.client.post(
            "/step",
            &StepRequest {
                session_id: self.id.clone(),
                context: to_wire(context),
                sampling: sampling.clone(),
                seed: self.seed,
                inline,
            },
        )?;
        reply.validate().map_err(RemoteError::Protocol)?;
        if let Some(v) = &reply.embedding {
            if v.len() != self.client.meta().embedding_dim {
                return Err(RemoteError::Protocol(format!("inline embedding of {} entries", v.len())));
            }
        }
        Ok(reply)
    }

    pub fn teacher_raw(&self, context: &[PrefixItem], tail_handles: Vec<String>, targets: Vec<u32>, temperature: f64) -> Result<TeacherReply, RemoteError> {
        let n = targets.len();
        let reply: TeacherReply = self.client.post(
            "/teacher",
            &TeacherRequest {
                session_id: self.id.clone(),
                context: to_wire(context),
                tail_handles,
                targets,
                temperature,
            },
        )?;
        if reply.probs.len() != n {
            return Err(RemoteError::Protocol(format!("{} probabilities for {n} targets", reply.probs.len())));
        }
        Ok(reply)
    }

    /// Releases the server-side cache. Returns false if the server had no
    /// such session.
    pub fn close(&self) -> Result<bool, RemoteError> {
        let r: CloseReply = self.client.post("/session/close", &CloseRequest { session_id: self.id.clone() })?;
        Ok(r.closed)
    }

    fn embeddings(&self, tokens: Vec<u32>) -> Result<Vec<EmbeddingVector>, BackendError> {
        let n = tokens.len();
        let reply: EmbeddingReply = self.client.post("/embedding", &EmbeddingRequest { tokens })?;
        if reply.vectors.len() != n {
            return Err(BackendError::Protocol(format!("{} embeddings for {n} tokens", reply.vectors.len())));
        }
        reply.vectors.into_iter().map(|v| Ok(EmbeddingVector::new(v)?)).collect()
    }
}

impl Drop for RemoteSession {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

impl Backend for RemoteSession {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(self.client.info())
    }

    fn token_embedding(&self, token: TokenId) -> Result<EmbeddingVector, BackendError> {
        self.embeddings(vec![token.0])?.pop().ok_or_else(|| BackendError::Protocol("empty embedding reply".into()))
    }

    fn next_distribution(&self, prefix: &[PrefixItem]) -> Result<ProbVector, BackendError> {
        let reply: DistributionReply = self.client.post(
            "/distribution",
            &DistributionRequest {
                session_id: self.id.clone(),
                context: to_wire(prefix),
            },
        )?;
        Ok(ProbVector::new(reply.probs)?)
    }

    fn mixed_embedding(&self, dist: &ProbVector) -> Result<EmbeddingVector, BackendError> {
        let support: Vec<u32> = (0..dist.len() as u32).filter(|&v| dist.as_slice()[v as usize] > 0.0).collect();
        let rows = self.embeddings(support.clone())?;
        let mut acc = vec![0.0; self.client.meta().embedding_dim];
        for (v, row) in support.iter().zip(rows) {
            let p = dist.as_slice()[*v as usize];
            for (a, x) in acc.iter_mut().zip(row.as_slice()) {
                *a += p * x;
            }
        }
        Ok(EmbeddingVector::new(acc)?)
    }

    fn teacher_probs(&self, context: &[PrefixItem], records: &[StepRecord], temperature: f64) -> Result<TeacherScores, BackendError> {
        if records.is_empty() {
            return Err(BackendError::EmptyRecords);
        }
        let handles = records
            .iter()
            .map(|r| match &r.embedding {
                EmbeddingRef::Handle(h) => Ok(h.clone()),
                EmbeddingRef::Vector(_) => Err(BackendError::InvalidInput("remote teacher pass needs embedding handles".into())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let targets = records.iter().map(|r| r.token.0).collect();
        let reply = self.teacher_raw(context, handles, targets, temperature)?;
        Ok(TeacherScores { probs: reply.probs })
    }

    fn step(&self, context: &[PrefixItem], params: &SamplingParams, _rng: &mut SessionRng) -> Result<StepRecord, BackendError> {
        let reply = self.step_raw(context, params, false)?;
        Ok(StepRecord::new(TokenId(reply.token), reply.chosen_prob, EmbeddingRef::Handle(reply.embedding_handle))?)
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        self.client.meta().tokenizer.then_some(self as &dyn Tokenizer)
    }

    fn default_template(&self) -> Option<Template> {
        self.client.meta().template.clone()
    }
}

impl Tokenizer for RemoteSession {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let r: TokenizeReply = self.client.post("/tokenize", &TokenizeRequest { text: text.to_string() })?;
        Ok(r.tokens.into_iter().map(TokenId).collect())
    }

    fn decode(&self, token: TokenId) -> Result<String, BackendError> {
        if let Some(s) = self.decoded.lock().expect("decode cache poisoned").get(&token.0) {
            return Ok(s.clone());
        }
        let r: DetokenizeReply = self.client.post("/detokenize", &DetokenizeRequest { tokens: vec![token.0] })?;
        self.decoded.lock().expect("decode cache poisoned").insert(token.0, r.text.clone());
        Ok(r.text)
    }

    fn decode_all(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        let r: DetokenizeReply = self.client.post(
            "/detokenize",
            &DetokenizeRequest {
                tokens: tokens.iter().map(|t| t.0).collect(),
            },
        )?;
        Ok(r.text)
    }
}
