use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use didact_core::agents::{EndpointConfig, SyntheticStudentParams, SyntheticTeacherParams};
use didact_core::dialogue::EpisodeMode;
use didact_core::verify::runner::RunnerConfig;
use didact_core::verify::EquivalencePolicy;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub episode: EpisodeSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub judge: Option<EndpointConfig>,
    #[serde(default)]
    pub verifier: VerifierSection,
}

fn default_workers() -> usize {
    1
}

impl Default for Config {
    fn default() -> Self {
        Self {
            workers: default_workers(),
            seed: 0,
            episode: EpisodeSection::default(),
            paths: PathsSection::default(),
            backend: BackendConfig::default(),
            judge: None,
            verifier: VerifierSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub max_turns: u32,
    pub mode: EpisodeMode,
    pub generate_feedback_after_final_failure: bool,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            max_turns: 5,
            mode: EpisodeMode::Didactic,
            generate_feedback_after_final_failure: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub problems: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Scripted,
    Remote,
}

/// `kind` picks which of the sub-tables is used.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub synthetic: Option<SyntheticSection>,
    pub scripted: Option<ScriptedSection>,
    pub remote: Option<RemoteSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub student: SyntheticStudentParams,
    #[serde(default)]
    pub teacher: SyntheticTeacherParams,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            student: SyntheticStudentParams::new(0.3, 0.3, 0),
            teacher: SyntheticTeacherParams::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedSection {
    pub student: Vec<String>,
    #[serde(default)]
    pub teacher: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub student: EndpointConfig,
    pub teacher: EndpointConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierSection {
    pub policy: EquivalencePolicy,
    pub runner: Option<RunnerConfig>,
}

/// Parses TOML, naming the offending key path on failure.
pub fn parse_config(text: &str) -> Result<Config> {
    let de =
        toml::Deserializer::parse(text).map_err(|e| anyhow!("config is not valid TOML: {e}"))?;
    let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("invalid config at `{path}`: {}", e.into_inner().message())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(anyhow!("invalid config at `workers`: must be at least 1"));
        }
        if self.episode.max_turns == 0 {
            return Err(anyhow!(
                "invalid config at `episode.max_turns`: must be at least 1"
            ));
        }
        match self.backend.kind {
            BackendKind::Scripted if self.backend.scripted.is_none() => {
                return Err(anyhow!(
                    "invalid config at `backend.scripted`: required when kind = \"scripted\""
                ));
            }
            BackendKind::Remote if self.backend.remote.is_none() => {
                return Err(anyhow!(
                    "invalid config at `backend.remote`: required when kind = \"remote\""
                ));
            }
            _ => {}
        }
        self.verifier
            .policy
            .validate()
            .map_err(|e| anyhow!("invalid config at `verifier.policy`: {e}"))?;
        Ok(())
    }
}
