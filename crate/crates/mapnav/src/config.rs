//! Batch run configuration. Values come from command-line flags, then an
//! optional TOML file, then defaults.

use std::path::{Path, PathBuf};

use mapnav_core::agent::{AgentConfig, DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_STEPS};
use mapnav_core::eval::DEFAULT_SUCCESS_THRESHOLD;
use mapnav_core::prompts::{Dataset, Mode, DEFAULT_PROMPT_BUDGET};
use serde::{Deserialize, Serialize};

use crate::backends::RemoteConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("invalid setting `{0}`: {1}")]
    Invalid(&'static str, String),
    #[error("{0}: {1}")]
    File(PathBuf, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Remote,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    OneStage,
    TwoStage,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::OneStage => Mode::OneStage,
            ModeName::TwoStage => Mode::TwoStage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StyleName {
    #[serde(alias = "R2R")]
    R2r,
    #[serde(alias = "REVERIE")]
    Reverie,
}

impl From<StyleName> for Dataset {
    fn from(s: StyleName) -> Dataset {
        match s {
            StyleName::R2r => Dataset::R2R,
            StyleName::Reverie => Dataset::Reverie,
        }
    }
}

/// Every setting optional; one layer of the precedence stack.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialRunConfig {
    pub worlds: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub script: Option<PathBuf>,
    pub model_id: Option<String>,
    pub style: Option<StyleName>,
    pub mode: Option<ModeName>,
    pub max_steps: Option<usize>,
    pub retries: Option<usize>,
    pub success_threshold: Option<f64>,
    pub prompt_budget: Option<usize>,
    pub cache: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub remote: Option<RemoteConfig>,
}

impl PartialRunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File(path.into(), e.to_string()))?;
        let mut cfg: PartialRunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::File(path.into(), e.to_string()))?;
        // Relative paths in a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.worlds, &mut cfg.episodes, &mut cfg.script, &mut cfg.cache, &mut cfg.output]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Fills unset fields of `self` from `lower`.
    pub fn or(self, lower: PartialRunConfig) -> PartialRunConfig {
        PartialRunConfig {
            worlds: self.worlds.or(lower.worlds),
            episodes: self.episodes.or(lower.episodes),
            backend: self.backend.or(lower.backend),
            script: self.script.or(lower.script),
            model_id: self.model_id.or(lower.model_id),
            style: self.style.or(lower.style),
            mode: self.mode.or(lower.mode),
            max_steps: self.max_steps.or(lower.max_steps),
            retries: self.retries.or(lower.retries),
            success_threshold: self.success_threshold.or(lower.success_threshold),
            prompt_budget: self.prompt_budget.or(lower.prompt_budget),
            cache: self.cache.or(lower.cache),
            output: self.output.or(lower.output),
            parallelism: self.parallelism.or(lower.parallelism),
            remote: self.remote.or(lower.remote),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub worlds: PathBuf,
    pub episodes: PathBuf,
    pub backend: BackendKind,
    /// Scripted replies (JSONL); scripted backend only.
    pub script: Option<PathBuf>,
    pub model_id: String,
    /// Only run episodes of this style.
    pub style: Option<StyleName>,
    pub mode: ModeName,
    pub max_steps: usize,
    /// Replies tried per step.
    pub retries: usize,
    pub success_threshold: f64,
    pub prompt_budget: usize,
    /// Response cache; written by remote and scripted runs, read by replay.
    pub cache: Option<PathBuf>,
    pub output: PathBuf,
    pub parallelism: usize,
    pub remote: RemoteConfig,
}

impl RunConfig {
    pub fn resolve(p: PartialRunConfig) -> Result<RunConfig, ConfigError> {
        let backend = p.backend.unwrap_or(BackendKind::Scripted);
        let model_id = p.model_id.unwrap_or_else(|| match backend {
            BackendKind::Remote => "gpt-4o".into(),
            _ => "scripted".into(),
        });
        let cfg = RunConfig {
            worlds: p.worlds.ok_or(ConfigError::Missing("worlds"))?,
            episodes: p.episodes.ok_or(ConfigError::Missing("episodes"))?,
            backend,
            script: p.script,
            model_id,
            style: p.style,
            mode: p.mode.unwrap_or(ModeName::TwoStage),
            max_steps: p.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
            retries: p.retries.unwrap_or(DEFAULT_MAX_ATTEMPTS),
            success_threshold: p.success_threshold.unwrap_or(DEFAULT_SUCCESS_THRESHOLD),
            prompt_budget: p.prompt_budget.unwrap_or(DEFAULT_PROMPT_BUDGET),
            cache: p.cache,
            output: p.output.ok_or(ConfigError::Missing("output"))?,
            parallelism: p.parallelism.unwrap_or(1),
            remote: p.remote.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let exists = |name, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(name, format!("{} does not exist", p.display())))
            }
        };
        exists("worlds", &self.worlds)?;
        exists("episodes", &self.episodes)?;
        match self.backend {
            BackendKind::Scripted => exists("script", self.script.as_deref().ok_or(ConfigError::Missing("script"))?)?,
            BackendKind::Replay => exists("cache", self.cache.as_deref().ok_or(ConfigError::Missing("cache"))?)?,
            BackendKind::Remote => {}
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism", "must be at least 1".into()));
        }
        if self.retries == 0 {
            return Err(ConfigError::Invalid("retries", "must be at least 1".into()));
        }
        if !(self.success_threshold.is_finite() && self.success_threshold >= 0.0) {
            return Err(ConfigError::Invalid("success_threshold", "must be a non-negative number".into()));
        }
        if self.model_id.is_empty() {
            return Err(ConfigError::Invalid("model_id", "must not be empty".into()));
        }
        Ok(())
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            model_id: self.model_id.clone(),
            mode: self.mode.into(),
            max_steps: self.max_steps,
            max_attempts: self.retries,
            prompt_budget: self.prompt_budget,
        }
    }
}
