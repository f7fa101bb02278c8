//! Top-level run configuration and content hashes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::game::UtilityWeights;
use crate::metrics::EvalConfig;
use crate::policy::PolicyConfig;
use crate::ppo::{TrainConfig, TrainSetup};
use crate::theory::TheoryConfig;

/// One run's configuration, one TOML section per subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub game: UtilityWeights,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub theory: Option<TheoryConfig>,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// The parts of a configuration file a theory run reads; other sections are
/// ignored so theory suites need no environment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryFile {
    #[serde(default)]
    pub theory: Option<TheoryConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TheoryFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: Self = toml::from_str(text).map_err(|e| {
            let field = missing_or_unknown_field(e.message()).unwrap_or_else(|| "theory".into());
            Error::config(field, e.message().trim().to_string())
        })?;
        if let Some(t) = &f.theory {
            t.validate()?;
        }
        Ok(f)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = missing_or_unknown_field(e.message()).unwrap_or_else(|| "config".into());
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.game.validate()?;
        self.policy.validate()?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(e) = &self.eval {
            e.validate()?;
        }
        if let Some(t) = &self.theory {
            t.validate()?;
        }
        self.baseline.validate()?;
        Ok(())
    }

    /// The `train` section, which `train` runs require.
    pub fn train_setup(&self) -> Result<TrainSetup> {
        let train = self
            .train
            .clone()
            .ok_or_else(|| Error::config("train", "missing section [train]"))?;
        Ok(TrainSetup {
            env: self.env.clone(),
            game: self.game.clone(),
            policy: self.policy.clone(),
            train,
        })
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        digest(self)
    }

    /// Hash of the sections that fix a checkpoint's meaning.
    pub fn model_hash(&self) -> String {
        model_hash(&self.env, &self.game, &self.policy)
    }
}

fn missing_or_unknown_field(msg: &str) -> Option<String> {
    let start = msg.find('`')?;
    let rest = &msg[start + 1..];
    let end = rest.find('`')?;
    Some(rest[..end].to_string())
}

/// SHA-256 over the canonical JSON encoding, hex encoded.
pub fn digest<S: Serialize + ?Sized>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration types serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// SHA-256 of raw bytes, hex encoded.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the environment, utility weights and network shape. Checkpoints
/// carry it; evaluation refuses bundles whose hash differs.
pub fn model_hash(env: &EnvConfig, game: &UtilityWeights, policy: &PolicyConfig) -> String {
    digest(&(env, game, policy))
}
