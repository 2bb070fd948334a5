//! Run configuration: the TOML document a run is launched from and echoed into.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::model_based::MBConfig;
use crate::objective::ObjectiveConfig;
use crate::optimizers::IterOptConfig;
use crate::training::{OptimizerKind, TrainConfig};

/// Critic-target pessimism used by iterative agents when none is configured.
pub const ITERATIVE_BETA_TRAIN: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub iterative: IterOptConfig,
    #[serde(default)]
    pub model_based: MBConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults for `env`, with `beta_train` resolved for the default optimizer.
    pub fn for_env(env: EnvKind) -> Self {
        RunConfig {
            env: env.name().to_string(),
            seed: 0,
            out_dir: None,
            train: TrainConfig::default(),
            objective: ObjectiveConfig::default(),
            iterative: IterOptConfig::default(),
            model_based: MBConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses and validates a config document. An iterative run without an
    /// explicit `objective.beta_train` gets the iterative default.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if !raw.contains_key("env") {
            return Err(Error::Config("missing required field `env`".into()));
        }
        let beta_train_set = raw
            .get("objective")
            .and_then(|o| o.as_table())
            .is_some_and(|o| o.contains_key("beta_train"));
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(describe(&e)))?;
        if !beta_train_set && cfg.train.optimizer == OptimizerKind::Iterative {
            cfg.objective.beta_train = ITERATIVE_BETA_TRAIN;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&crate::io::read_to_string(path)?)
    }

    /// The fully resolved document, every field explicit.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn env_kind(&self) -> Result<EnvKind> {
        EnvKind::from_name(&self.env).map_err(|_| Error::Config(format!("env: unknown environment {:?}", self.env)))
    }

    pub fn validate(&self) -> Result<()> {
        self.env_kind()?;
        self.train.validate()?;
        self.objective.validate()?;
        self.iterative.validate()?;
        self.model_based.validate()?;
        self.eval.validate()
    }
}

fn describe(e: &toml::de::Error) -> String {
    match e.span() {
        Some(_) => e.message().to_string(),
        None => e.to_string(),
    }
}
