//! Run configuration: one TOML file with a table per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::LabelerConfig;
use crate::model::{ConfigViolation, GrpoConfig, RewardConfig};
use crate::policy::toy::ToyConfig;
use crate::sft::SftConfig;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_episodes: usize,
    pub test_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_episodes: 50, test_episodes: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its randomness from it.
    pub seed: u64,
    pub data: DataConfig,
    pub sim: SimConfig,
    pub reward: RewardConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub labeler: LabelerConfig,
    pub toy: ToyConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("[{section}] {violation}")]
    Invalid { section: &'static str, violation: ConfigViolation },
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    (line, column)
                }
                None => (0, 0),
            };
            ConfigError::Parse { line, column, message: e.message().to_owned() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |section: &'static str| move |violation| ConfigError::Invalid { section, violation };
        self.sim.validate().map_err(wrap("sim"))?;
        self.reward.validate().map_err(wrap("reward"))?;
        self.sft.validate().map_err(wrap("sft"))?;
        self.grpo.validate().map_err(wrap("grpo"))?;
        self.toy.validate().map_err(wrap("toy"))?;
        if self.data.train_episodes == 0 {
            return Err(ConfigError::Invalid {
                section: "data",
                violation: ConfigViolation::new("train_episodes", "must be at least 1"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn errors_carry_line_and_field() {
        let err = RunConfig::from_toml("seed = 1\n[grpo]\nclip_epsilon = \"x\"\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_toml("[grpo]\nclip_epsilon = 1.5\n").unwrap_err();
        assert_eq!(err.to_string(), "[grpo] clip_epsilon: must lie in (0, 1)");
        assert!(matches!(RunConfig::from_toml("[grpo]\nbogus = 1\n"), Err(ConfigError::Parse { line: 2, .. })));
    }
}
