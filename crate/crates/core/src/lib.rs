//! Draft-then-think decoding with posterior-visibility control.
//!
//! A session drafts a short answer under a closed thinking block, scores
//! how much the draft disagrees with a teacher pass conditioned on the
//! draft's own mixture embeddings, and either accepts it or opens a
//! thinking block whose chunks decide whether the draft stays visible.

// `!(x > 0.0)` style checks are used to reject NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod controller;
pub mod estimators;
pub mod mixture;
pub mod sampling;
pub mod scripted;
pub mod toygpt;
pub mod types;
pub mod validation;

pub use backend::{Backend, BackendError, BackendInfo, Tokenizer};
pub use controller::{run, run_cot_session, run_session, replay, SessionError, Template};
pub use types::*;
