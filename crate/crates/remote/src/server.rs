//! Reference server hosting any local [`Backend`] over the wire protocol.
//!
//! Each session owns a sampler seeded on its first `/step` and a cache of
//! the mixture embeddings it produced. Handles are unique across the
//! server, so a handle presented to the wrong session is simply unknown.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use copt_core::backend::{Backend, BackendError};
use copt_core::sampling::{session_rng, SessionRng};
use copt_core::types::{EmbeddingRef, EmbeddingVector, PrefixItem, StepRecord, TokenId};
use tokio::sync::oneshot;

use crate::wire::*;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Open sessions beyond this are refused as overloaded.
    pub max_sessions: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { max_sessions: 1024 }
    }
}

struct Session {
    rng: SessionRng,
    handles: HashMap<String, EmbeddingVector>,
}

struct AppState {
    backend: Arc<dyn Backend>,
    dim: usize,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_handle: AtomicU64,
    config: ServerConfig,
}

#[derive(Debug)]
pub struct ApiError(ErrorKind, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (
            status,
            Json(ErrorReply {
                kind: self.0,
                message: self.1,
            }),
        )
            .into_response()
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let kind = match &e {
            BackendError::UnresolvedHandle(_) => ErrorKind::UnknownHandle,
            BackendError::DimensionMismatch { .. } => ErrorKind::DimensionMismatch,
            BackendError::TokenOutOfRange { .. }
            | BackendError::InvalidInput(_)
            | BackendError::EmptyPrefix
            | BackendError::EmptyRecords
            | BackendError::Type(_)
            | BackendError::Sampling(_) => ErrorKind::InvalidInput,
            BackendError::NoTokenizer => ErrorKind::Unsupported,
            _ => ErrorKind::Internal,
        };
        ApiError(kind, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

impl AppState {
    fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().expect("session table poisoned").get(id).cloned()
    }

    fn open(&self, id: &str, seed: u64) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut table = self.sessions.lock().expect("session table poisoned");
        if let Some(s) = table.get(id) {
            return Ok(Arc::clone(s));
        }
        if table.len() >= self.config.max_sessions {
            return Err(ApiError(ErrorKind::Overloaded, format!("{} sessions open", table.len())));
        }
        let s = Arc::new(Mutex::new(Session {
            rng: session_rng(seed),
            handles: HashMap::new(),
        }));
        table.insert(id.to_string(), Arc::clone(&s));
        Ok(s)
    }

    fn resolve(&self, items: Vec<WireItem>, handles: Option<&HashMap<String, EmbeddingVector>>) -> Result<Vec<PrefixItem>, ApiError> {
        items
            .into_iter()
            .map(|item| match item {
                WireItem::Token(t) => Ok(PrefixItem::Discrete(TokenId(t))),
                WireItem::Vector(v) if v.len() != self.dim => Err(ApiError(
                    ErrorKind::DimensionMismatch,
                    format!("vector of {} entries, model dimension {}", v.len(), self.dim),
                )),
                WireItem::Vector(v) => EmbeddingVector::new(v)
                    .map(|e| PrefixItem::Continuous(e.into()))
                    .map_err(|e| ApiError(ErrorKind::InvalidInput, e.to_string())),
                WireItem::Handle(h) => lookup(handles, &h).map(|e| PrefixItem::Continuous(e.into())),
            })
            .collect()
    }
}

fn lookup(handles: Option<&HashMap<String, EmbeddingVector>>, h: &str) -> Result<EmbeddingVector, ApiError> {
    handles
        .and_then(|m| m.get(h))
        .cloned()
        .ok_or_else(|| ApiError(ErrorKind::UnknownHandle, format!("unknown handle {h:?} for this session")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ErrorKind::Internal, e.to_string()))?
        .map(Json)
}

async fn meta(State(s): State<Arc<AppState>>) -> ApiResult<MetaReply> {
    let info = s.backend.info()?;
    Ok(Json(MetaReply {
        protocol_version: PROTOCOL_VERSION,
        vocab_size: info.vocab_size,
        embedding_dim: info.embedding_dim,
        identifier: info.identifier,
        eos_token: info.eos_token.map(|t| t.0),
        tokenizer: s.backend.tokenizer().is_some(),
        template: s.backend.default_template(),
    }))
}

async fn step(State(s): State<Arc<AppState>>, Json(req): Json<StepRequest>) -> ApiResult<StepReply> {
    blocking(move || {
        let session = s.open(&req.session_id, req.seed)?;
        let mut session = session.lock().expect("session poisoned");
        let ctx = s.resolve(req.context, Some(&session.handles))?;
        let record = s.backend.step(&ctx, &req.sampling, &mut session.rng)?;
        let EmbeddingRef::Vector(e) = record.embedding else {
            return Err(ApiError(ErrorKind::Internal, "hosted backend returned a handle".into()));
        };
        let handle = format!("e{}", s.next_handle.fetch_add(1, Ordering::Relaxed));
        let inline = req.inline.then(|| e.as_slice().to_vec());
        session.handles.insert(handle.clone(), e);
        Ok(StepReply {
            token: record.token.0,
            chosen_prob: record.chosen_prob,
            embedding_handle: handle,
            embedding: inline,
        })
    })
    .await
}

async fn teacher(State(s): State<Arc<AppState>>, Json(req): Json<TeacherRequest>) -> ApiResult<TeacherReply> {
    blocking(move || {
        let (n, h) = (req.targets.len(), req.tail_handles.len());
        if n == 0 {
            return Err(ApiError(ErrorKind::InvalidInput, "no targets".into()));
        }
        if h != n && h + 1 != n {
            return Err(ApiError(ErrorKind::LengthMismatch, format!("{n} targets with {h} tail handles")));
        }
        if !(req.temperature > 0.0 && req.temperature.is_finite()) {
            return Err(ApiError(ErrorKind::InvalidInput, format!("temperature {}", req.temperature)));
        }
        let session = s.session(&req.session_id);
        let guard = session.as_ref().map(|m| m.lock().expect("session poisoned"));
        let handles = guard.as_deref().map(|g| &g.handles);
        let ctx = s.resolve(req.context, handles)?;
        // the teacher pass reads tokens and embeddings only
        let records = req
            .targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let e = match req.tail_handles.get(i) {
                    Some(handle) => lookup(handles, handle)?,
                    None => EmbeddingVector::zeros(s.dim),
                };
                StepRecord::new(TokenId(t), 1.0, e.into()).map_err(|e| ApiError(ErrorKind::Internal, e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scores = s.backend.teacher_probs(&ctx, &records, req.temperature)?;
        Ok(TeacherReply { probs: scores.probs })
    })
    .await
}

async fn close(State(s): State<Arc<AppState>>, Json(req): Json<CloseRequest>) -> Json<CloseReply> {
    let closed = s.sessions.lock().expect("session table poisoned").remove(&req.session_id).is_some();
    Json(CloseReply { closed })
}

async fn tokenize(State(s): State<Arc<AppState>>, Json(req): Json<TokenizeRequest>) -> ApiResult<TokenizeReply> {
    let tok = s.backend.tokenizer().ok_or(BackendError::NoTokenizer)?;
    Ok(Json(TokenizeReply {
        tokens: tok.encode(&req.text)?.into_iter().map(|t| t.0).collect(),
    }))
}

async fn detokenize(State(s): State<Arc<AppState>>, Json(req): Json<DetokenizeRequest>) -> ApiResult<DetokenizeReply> {
    let tok = s.backend.tokenizer().ok_or(BackendError::NoTokenizer)?;
    let ids: Vec<TokenId> = req.tokens.into_iter().map(TokenId).collect();
    Ok(Json(DetokenizeReply { text: tok.decode_all(&ids)? }))
}

async fn distribution(State(s): State<Arc<AppState>>, Json(req): Json<DistributionRequest>) -> ApiResult<DistributionReply> {
    blocking(move || {
        let session = s.session(&req.session_id);
        let guard = session.as_ref().map(|m| m.lock().expect("session poisoned"));
        let ctx = s.resolve(req.context, guard.as_deref().map(|g| &g.handles))?;
        Ok(DistributionReply {
            probs: s.backend.next_distribution(&ctx)?.into_inner(),
        })
    })
    .await
}

async fn embedding(State(s): State<Arc<AppState>>, Json(req): Json<EmbeddingRequest>) -> ApiResult<EmbeddingReply> {
    let vectors = req
        .tokens
        .into_iter()
        .map(|t| s.backend.token_embedding(TokenId(t)).map(EmbeddingVector::into_inner))
        .collect::<Result<_, _>>()?;
    Ok(Json(EmbeddingReply { vectors }))
}

pub fn router(backend: Arc<dyn Backend>, config: ServerConfig) -> Result<Router, BackendError> {
    let dim = backend.info()?.embedding_dim;
    let state = Arc::new(AppState {
        backend,
        dim,
        sessions: Mutex::new(HashMap::new()),
        next_handle: AtomicU64::new(0),
        config,
    });
    Ok(Router::new()
        .route("/meta", get(meta))
        .route("/step", post(step))
        .route("/teacher", post(teacher))
        .route("/session/close", post(close))
        .route("/tokenize", post(tokenize))
        .route("/detokenize", post(detokenize))
        .route("/distribution", post(distribution))
        .route("/embedding", post(embedding))
        .with_state(state))
}

/// A server running on its own thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `bind` (e.g. `127.0.0.1:0`) and serves `backend` until the handle
/// is dropped.
pub fn spawn(backend: Arc<dyn Backend>, bind: &str, config: ServerConfig) -> std::io::Result<ServerHandle> {
    let app = router(backend, config).map_err(std::io::Error::other)?;
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
