//! Conformance checks against a live protocol server.

use std::time::Duration;

use copt_core::backend::{sequential_teacher_probs, Backend};
use copt_core::sampling::session_rng;
use copt_core::types::{discrete, PrefixItem, SamplingParams, StepRecord, TokenId};
use copt_core::validation::{max_relative, Check, Report, Status};
use copt_remote::wire::ErrorKind;
use copt_remote::{RemoteClient, RemoteError, RemoteSession};

const STEPS: usize = 6;
/// Server arithmetic may run at reduced precision.
pub const TEACHER_TOLERANCE: f64 = 1e-4;

fn pass(name: &str, detail: String) -> Check {
    Check {
        name: name.to_string(),
        status: Status::Pass,
        deviation: None,
        tolerance: None,
        detail,
    }
}

fn verdict(name: &str, ok: bool, detail: String) -> Check {
    if ok {
        pass(name, detail)
    } else {
        Check::failed(name, detail)
    }
}

/// Steps `n` times, feeding each drawn token back as a discrete input.
fn rollout(session: &RemoteSession, prompt: &[PrefixItem], n: usize, seed: u64) -> Result<Vec<StepRecord>, String> {
    let params = SamplingParams::ancestral(seed);
    let mut rng = session_rng(seed);
    let mut ctx = prompt.to_vec();
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let r = session.step(&ctx, &params, &mut rng).map_err(|e| e.to_string())?;
        ctx.push(PrefixItem::Discrete(r.token));
        records.push(r);
    }
    Ok(records)
}

/// Runs every check, or reports one skipped check when no endpoint is given.
/// `probe` is the question the rollouts start from (default: the last
/// vocabulary token), wrapped in the server's template when it has one.
pub fn protocol_suite(endpoint: Option<&str>, probe: Option<&[TokenId]>, timeout: Duration) -> Report {
    let Some(endpoint) = endpoint else {
        return Report {
            checks: vec![Check::skipped("protocol", "no endpoint configured (pass --endpoint or set COPT_ENDPOINT)")],
        };
    };
    let client = match RemoteClient::connect(endpoint, timeout) {
        Ok(c) => c,
        Err(e) => return Report { checks: vec![Check::failed("protocol_connect", e.to_string())] },
    };
    let meta = client.meta().clone();
    let mut checks = vec![pass(
        "protocol_meta",
        format!("{} version {} vocab {} dim {}", meta.identifier, meta.protocol_version, meta.vocab_size, meta.embedding_dim),
    )];
    let question = probe.map(<[TokenId]>::to_vec).unwrap_or_else(|| vec![TokenId(meta.vocab_size as u32 - 1)]);
    let prompt = match &meta.template {
        Some(t) => t.draft_context(&question),
        None => discrete(&question),
    };

    let a = client.session(11);
    let records = match rollout(&a, &prompt, STEPS, 11) {
        Ok(r) => r,
        Err(e) => {
            checks.push(Check::failed("protocol_step", e));
            return Report { checks };
        }
    };
    let consistent = records.iter().all(|r| r.is_consistent() && r.token.index() < meta.vocab_size);
    checks.push(verdict("protocol_step", consistent, format!("{STEPS} steps")));

    let b = client.session(11);
    checks.push(match rollout(&b, &prompt, STEPS, 11) {
        Ok(again) => {
            let same = again.iter().map(|r| r.token).eq(records.iter().map(|r| r.token));
            verdict("protocol_seeded_replay", same, "same seed, same tokens".into())
        }
        Err(e) => Check::failed("protocol_seeded_replay", e),
    });

    checks.push(match (a.teacher_probs(&prompt, &records, 1.0), sequential_teacher_probs(&a, &prompt, &records, 1.0)) {
        (Ok(batched), Ok(sequential)) => Check::measured(
            "protocol_teacher_equivalence",
            max_relative(&batched, &sequential),
            TEACHER_TOLERANCE,
            "teacher pass vs per-position recomputation".into(),
        ),
        (Err(e), _) | (_, Err(e)) => Check::failed("protocol_teacher_equivalence", e.to_string()),
    });

    checks.push(match a.teacher_raw(&prompt, vec!["no-such-handle".into()], vec![0], 1.0) {
        Err(RemoteError::Server {
            kind: ErrorKind::UnknownHandle,
            ..
        }) => pass("protocol_unknown_handle", "rejected".into()),
        other => Check::failed("protocol_unknown_handle", format!("expected an unknown-handle error, got {other:?}")),
    });

    let handles: Vec<String> = records
        .iter()
        .filter_map(|r| match &r.embedding {
            copt_core::types::EmbeddingRef::Handle(h) => Some(h.clone()),
            _ => None,
        })
        .collect();
    let targets = records.iter().map(|r| r.token.0).collect();
    checks.push(match b.teacher_raw(&prompt, handles, targets, 1.0) {
        Err(RemoteError::Server {
            kind: ErrorKind::UnknownHandle,
            ..
        }) => pass("protocol_handle_scope", "handles are private to their session".into()),
        other => Check::failed("protocol_handle_scope", format!("foreign handles were accepted: {other:?}")),
    });

    checks.push(match a.close() {
        Ok(true) => match a.teacher_probs(&prompt, &records, 1.0) {
            Err(_) => pass("protocol_close", "cache released".into()),
            Ok(_) => Check::failed("protocol_close", "handles still resolve after close".into()),
        },
        Ok(false) => Check::failed("protocol_close", "server did not know the session".into()),
        Err(e) => Check::failed("protocol_close", e.to_string()),
    });
    Report { checks }
}
