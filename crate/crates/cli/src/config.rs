//! TOML configuration and the command-line flags that override it.

use std::path::Path;

use clap::Args;
use copt_core::types::{ChunkPolicy, Granularity, SessionConfig, SpanPattern};
use copt_core::Template;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub backend: Option<String>,
    /// Overrides the backend's own template.
    pub template: Option<Template>,
    /// Worker threads for `bench`; `None` uses all cores.
    pub parallelism: Option<usize>,
    /// Base seed; per-task seeds are derived from it.
    pub seed: u64,
    pub repeat: usize,
    pub timeout_secs: u64,
    pub session: SessionConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            backend: None,
            template: None,
            parallelism: None,
            seed: 0,
            repeat: 1,
            timeout_secs: 120,
            session: SessionConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid setting: {0}")]
    Invalid(String),
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.session.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.repeat == 0 {
            return Err(ConfigError::Invalid("repeat must be at least 1".into()));
        }
        if self.parallelism == Some(0) {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if let Some(t) = &self.template {
            t.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

/// Flags mirroring `SessionConfig`. Anything given overrides the file.
#[derive(Debug, Clone, Default, Args)]
pub struct SessionFlags {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Backend spec, e.g. `toy:7:64:16`, `quiz-random:1:20`, `remote:http://host:port`.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub tau_a: Option<f64>,
    #[arg(long)]
    pub tau_r: Option<f64>,
    #[arg(long)]
    pub max_draft_len: Option<usize>,
    #[arg(long)]
    pub max_think_budget: Option<usize>,
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    /// Fixed chunk size instead of a quarter of the draft length.
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub min_p: Option<f64>,
    /// Argmax decoding.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gate on the answer span only instead of the whole draft.
    #[arg(long)]
    pub answer_span: bool,
    #[arg(long, requires = "answer_span")]
    pub span_open: Option<String>,
    #[arg(long, requires = "answer_span")]
    pub span_close: Option<String>,
    #[arg(long)]
    pub first_chunk_visible: bool,
    /// Remote request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<u64>,
}

impl SessionFlags {
    /// The config file (or defaults) with these flags applied, validated.
    pub fn resolve(&self) -> Result<CliConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut CliConfig) {
        let s = &mut cfg.session;
        macro_rules! set {
            ($flag:ident => $target:expr) => {
                if let Some(v) = self.$flag.clone() {
                    $target = v;
                }
            };
        }
        set!(tau_a => s.tau_a);
        set!(tau_r => s.tau_r);
        set!(max_draft_len => s.max_draft_len);
        set!(max_think_budget => s.max_think_budget);
        set!(max_answer_len => s.max_answer_len);
        set!(temperature => s.sampling.temperature);
        set!(top_k => s.sampling.top_k);
        set!(top_p => s.sampling.top_p);
        set!(min_p => s.sampling.min_p);
        set!(seed => cfg.seed);
        set!(timeout => cfg.timeout_secs);
        if let Some(c) = self.chunk_size {
            s.chunk_policy = ChunkPolicy::Fixed(c);
        }
        if self.greedy {
            s.sampling.greedy = true;
        }
        if self.first_chunk_visible {
            s.first_chunk_visible = true;
        }
        if self.answer_span {
            let mut pattern = SpanPattern::default();
            set!(span_open => pattern.open);
            set!(span_close => pattern.close);
            s.granularity = Granularity::AnswerSpan(pattern);
        }
        if self.backend.is_some() {
            cfg.backend = self.backend.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = r#"
            backend = "toy:7:8:4"
            parallelism = 2
            seed = 9

            [session]
            tau_a = 0.2
            chunk_policy = { fixed = 3 }

            [session.sampling]
            temperature = 1.0
            greedy = true
        "#;
        let mut cfg: CliConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.session.tau_a, 0.2);
        assert_eq!(cfg.session.chunk_policy, ChunkPolicy::Fixed(3));
        assert_eq!(cfg.session.max_draft_len, SessionConfig::default().max_draft_len);
        assert_eq!(cfg.repeat, 1);
        let back: CliConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);

        let flags = SessionFlags {
            tau_a: Some(0.5),
            answer_span: true,
            chunk_size: Some(2),
            ..Default::default()
        };
        flags.apply(&mut cfg);
        assert_eq!(cfg.session.tau_a, 0.5);
        assert_eq!(cfg.session.chunk_policy, ChunkPolicy::Fixed(2));
        assert_eq!(cfg.session.granularity, Granularity::AnswerSpan(SpanPattern::default()));
        assert_eq!(cfg.backend.as_deref(), Some("toy:7:8:4"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<CliConfig>("tau = 1").is_err());
        let cfg = CliConfig {
            repeat: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
