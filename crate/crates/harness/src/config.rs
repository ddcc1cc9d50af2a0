//! TOML experiment configuration.
//!
//! ```toml
//! dataset = "data/dev.jsonl"
//! strategies = ["nucleus", "kwd", "kcts"]   # or: strategy = "kcts"
//! output_dir = "out"
//! workers = 4
//! seed = 0
//!
//! [lm]
//! path = "lm.json"
//! copy_weight = 0.3
//!
//! [scorer]
//! kind = "lexical"
//!
//! [scorer_overrides.kcts]
//! kind = "classifier"
//! path = "scorer.json"
//!
//! [decode]
//! num_simulations = 50
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use kcd_core::decoding::{DecodeConfig, WeightedMode};
use kcd_core::grounding::{ConstantScorer, GroundednessScorer, LexicalScorer, TokenClassifier};
use kcd_core::lm::{CopyMixLm, LanguageModel, TableLm};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remote::RemoteGuidanceConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(message: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid(message.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Nucleus,
    Kcts,
    /// Weighted decoding with a per-token classifier scorer.
    Kwd,
    /// Weighted decoding with a sequence-level scorer.
    Fudge,
    Nado,
    #[serde(alias = "prefix")]
    PrefixConstrained,
    /// Completion endpoint guided by a local proxy model.
    Remote,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Nucleus,
        Strategy::Kcts,
        Strategy::Kwd,
        Strategy::Fudge,
        Strategy::Nado,
        Strategy::PrefixConstrained,
        Strategy::Remote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Nucleus => "nucleus",
            Strategy::Kcts => "kcts",
            Strategy::Kwd => "kwd",
            Strategy::Fudge => "fudge",
            Strategy::Nado => "nado",
            Strategy::PrefixConstrained => "prefix_constrained",
            Strategy::Remote => "remote",
        }
    }

    pub fn weighted_mode(self) -> Option<WeightedMode> {
        match self {
            Strategy::Kwd => Some(WeightedMode::Kwd),
            Strategy::Fudge => Some(WeightedMode::FudgeStyle),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        match s.as_str() {
            "prefix" => return Ok(Strategy::PrefixConstrained),
            "fudge_style" => return Ok(Strategy::Fudge),
            _ => {}
        }
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSpec {
    pub path: PathBuf,
    /// Copy-mixture weight over the conditioning tokens; 0 uses the table alone.
    #[serde(default)]
    pub copy_weight: f64,
}

impl LmSpec {
    pub fn load(&self) -> Result<Arc<dyn LanguageModel>, ConfigError> {
        if !(0.0..=1.0).contains(&self.copy_weight) {
            return Err(invalid(format!("lm.copy_weight must lie in [0, 1], got {}", self.copy_weight)));
        }
        let table = TableLm::load(&self.path).map_err(|e| ConfigError::Read {
            path: self.path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(if self.copy_weight > 0.0 { Arc::new(CopyMixLm::new(table, self.copy_weight)) } else { Arc::new(table) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerSpec {
    #[default]
    Lexical,
    Classifier {
        path: PathBuf,
    },
    Constant {
        value: f64,
    },
}

impl ScorerSpec {
    pub fn load(&self) -> Result<Arc<dyn GroundednessScorer>, ConfigError> {
        match self {
            ScorerSpec::Lexical => Ok(Arc::new(LexicalScorer)),
            ScorerSpec::Constant { value } if (0.0..=1.0).contains(value) => Ok(Arc::new(ConstantScorer(*value))),
            ScorerSpec::Constant { value } => Err(invalid(format!("constant scorer value {value} is outside [0, 1]"))),
            ScorerSpec::Classifier { path } => {
                let read_err = |message: String| ConfigError::Read { path: path.display().to_string(), message };
                let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
                let model = TokenClassifier::from_json(&text).map_err(|e| read_err(e.to_string()))?;
                Ok(Arc::new(model))
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let ScorerSpec::Classifier { path } = self {
            *path = resolve(base, path);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Single-strategy shorthand; merged into `strategies` on load.
    #[serde(default, skip_serializing)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    pub lm: LmSpec,
    /// Guidance scorer used while decoding.
    #[serde(default)]
    pub scorer: ScorerSpec,
    #[serde(default)]
    pub scorer_overrides: BTreeMap<Strategy, ScorerSpec>,
    /// Judge for the `f` column of the report.
    #[serde(default)]
    pub eval_scorer: ScorerSpec,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub remote: Option<RemoteGuidanceConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_workers() -> usize {
    1
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base)
    }

    /// Parses and validates `text`, resolving relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(invalid)?;
        if let Some(s) = cfg.strategy.take() {
            if !cfg.strategies.contains(&s) {
                cfg.strategies.insert(0, s);
            }
        }
        cfg.dataset = resolve(base, &cfg.dataset);
        cfg.output_dir = resolve(base, &cfg.output_dir);
        cfg.lm.path = resolve(base, &cfg.lm.path);
        cfg.scorer.resolve(base);
        cfg.eval_scorer.resolve(base);
        for spec in cfg.scorer_overrides.values_mut() {
            spec.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.strategies.is_empty() {
            return Err(invalid("strategies must not be empty"));
        }
        if self.workers == 0 {
            return Err(invalid("workers must be >= 1"));
        }
        self.decode.validate().map_err(invalid)?;
        if self.strategies.contains(&Strategy::PrefixConstrained) && self.decode.constrained_prefix_len.is_none() {
            return Err(invalid("prefix_constrained needs decode.constrained_prefix_len"));
        }
        match &self.remote {
            Some(r) => r.validate().map_err(invalid)?,
            None if self.strategies.contains(&Strategy::Remote) => {
                return Err(invalid("the remote strategy needs a [remote] section"));
            }
            None => {}
        }
        Ok(())
    }

    pub fn scorer_for(&self, strategy: Strategy) -> &ScorerSpec {
        self.scorer_overrides.get(&strategy).unwrap_or(&self.scorer)
    }
}
