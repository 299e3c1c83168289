//! Backend selection from a short spec string.
//!
//! | spec                     | backend                                   |
//! |--------------------------|-------------------------------------------|
//! | `toy:SEED:VOCAB:DIM`     | seeded random toy transformer             |
//! | `quiz:PATH`              | scripted quiz from a JSON `QuizSpec`      |
//! | `quiz-random:SEED:N`     | `N` random quiz questions                 |
//! | `mixture:PATH`           | latent-state mixture from a JSON model    |
//! | `remote:URL` / `remote`  | HTTP server; bare `remote` reads the env  |

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use copt_core::backend::{SessionSource, Shared};
use copt_core::mixture::{LatentStateModel, MixtureBackend};
use copt_core::scripted::{QuizBackend, QuizSpec};
use copt_core::toygpt::build_toy;
use copt_core::Backend;
use copt_remote::{RemoteClient, PROTOCOL_VERSION};
use thiserror::Error;

/// Environment variable holding the remote endpoint.
pub const ENDPOINT_ENV: &str = "COPT_ENDPOINT";

#[derive(Debug, Error)]
pub enum BackendSpecError {
    #[error("unrecognized backend spec {0:?}")]
    Unknown(String),
    #[error("malformed backend spec {spec:?}: {reason}")]
    Malformed { spec: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("no endpoint given and {ENDPOINT_ENV} is unset")]
    NoEndpoint,
    #[error(transparent)]
    Remote(#[from] copt_remote::RemoteError),
}

/// A session source plus what the reproducibility header needs.
pub struct LoadedBackend {
    pub spec: String,
    pub source: Arc<dyn SessionSource>,
    pub identifier: String,
    /// Set for remote backends.
    pub protocol_version: Option<u32>,
}

fn malformed(spec: &str, reason: impl Into<String>) -> BackendSpecError {
    BackendSpecError::Malformed {
        spec: spec.to_string(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(spec: &str, field: &str, value: &str) -> Result<T, BackendSpecError> {
    value.parse().map_err(|_| malformed(spec, format!("{field} must be a number, got {value:?}")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &str) -> Result<T, BackendSpecError> {
    let text = std::fs::read_to_string(Path::new(path)).map_err(|source| BackendSpecError::Io {
        path: path.to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| BackendSpecError::Parse {
        path: path.to_string(),
        reason: e.to_string(),
    })
}

fn local(spec: &str, backend: Arc<dyn Backend>) -> LoadedBackend {
    let source = Shared(backend);
    LoadedBackend {
        spec: spec.to_string(),
        identifier: source.identifier(),
        source: Arc::new(source),
        protocol_version: None,
    }
}

pub fn load_backend(spec: &str, timeout: Duration) -> Result<LoadedBackend, BackendSpecError> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "toy" => {
            let parts: Vec<&str> = rest.split(':').collect();
            let [seed, vocab, dim] = parts[..] else {
                return Err(malformed(spec, "expected toy:SEED:VOCAB:DIM"));
            };
            let toy = build_toy(num(spec, "seed", seed)?, num(spec, "vocab", vocab)?, num(spec, "dim", dim)?)
                .map_err(|e| malformed(spec, e.to_string()))?;
            Ok(local(spec, Arc::new(toy)))
        }
        "quiz" if !rest.is_empty() => {
            let quiz = QuizBackend::new(read_json::<QuizSpec>(rest)?).map_err(|e| malformed(spec, e.to_string()))?;
            Ok(local(spec, Arc::new(quiz)))
        }
        "quiz-random" => {
            let (seed, n) = rest.split_once(':').ok_or_else(|| malformed(spec, "expected quiz-random:SEED:N"))?;
            let quiz = QuizBackend::new(QuizSpec::random(num(spec, "seed", seed)?, num(spec, "n", n)?))
                .map_err(|e| malformed(spec, e.to_string()))?;
            Ok(local(spec, Arc::new(quiz)))
        }
        "mixture" if !rest.is_empty() => {
            let model: LatentStateModel = read_json(rest)?;
            Ok(local(spec, Arc::new(MixtureBackend::new(model))))
        }
        "remote" => {
            let endpoint = if rest.is_empty() {
                std::env::var(ENDPOINT_ENV).map_err(|_| BackendSpecError::NoEndpoint)?
            } else {
                rest.to_string()
            };
            let client = RemoteClient::connect(&endpoint, timeout)?;
            Ok(LoadedBackend {
                spec: spec.to_string(),
                identifier: client.info().identifier,
                source: Arc::new(client),
                protocol_version: Some(PROTOCOL_VERSION),
            })
        }
        _ => Err(BackendSpecError::Unknown(spec.to_string())),
    }
}

/// A local backend for `serve`; remote specs are refused.
pub fn load_local(spec: &str) -> Result<Arc<dyn Backend>, BackendSpecError> {
    if spec.starts_with("remote") {
        return Err(malformed(spec, "serve needs a local backend"));
    }
    let loaded = load_backend(spec, Duration::from_secs(1))?;
    loaded
        .source
        .open(0)
        .map_err(|e| malformed(spec, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(spec: &str) -> BackendSpecError {
        match load_backend(spec, Duration::from_secs(1)) {
            Err(e) => e,
            Ok(_) => panic!("{spec} should not load"),
        }
    }

    #[test]
    fn parses_local_specs() {
        let toy = load_backend("toy:7:4:4", Duration::from_secs(1)).unwrap();
        assert!(toy.identifier.contains("seed=7"));
        assert_eq!(toy.protocol_version, None);
        let quiz = load_backend("quiz-random:3:5", Duration::from_secs(1)).unwrap();
        assert!(quiz.source.open(1).unwrap().tokenizer().is_some());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(err("gpt:1"), BackendSpecError::Unknown(_)));
        assert!(matches!(err("toy:1:2"), BackendSpecError::Malformed { .. }));
        assert!(matches!(err("toy:x:4:4"), BackendSpecError::Malformed { .. }));
        assert!(matches!(err("quiz:/nonexistent.json"), BackendSpecError::Io { .. }));
        assert!(matches!(err("remote:ftp://x"), BackendSpecError::Remote(_)));
        assert!(load_local("remote:http://x").is_err());
    }
}
