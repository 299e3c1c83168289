//! Remote backends over JSON/HTTP.
//!
//! The server computes next-token distributions, samples, and keeps each
//! step's mixture embedding in a session cache; clients refer to those
//! embeddings by handle. Endpoints: `GET /meta`, `POST /step`,
//! `POST /teacher`, `POST /session/close`, plus optional `/tokenize`,
//! `/detokenize`, and the debug endpoints `/distribution` and `/embedding`.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{RemoteClient, RemoteError, RemoteSession};
pub use server::{spawn, ServerConfig, ServerHandle};
pub use wire::PROTOCOL_VERSION;
