//! Comparison policies: adaptive slotted ALOHA, a rigid-compliance
//! "dictator" and fixed-width MAPPO agents.

mod aloha;
mod dictator;
mod mappo;
mod mlp;

use serde::{Deserialize, Serialize};

pub use aloha::{aloha_act, AlohaConfig, AlohaController, AlohaState};
pub use dictator::DictatorController;
pub use mappo::{
    collect_mappo_episode, follower_features, leader_features, mappo_batch_gradients, mappo_critic_loss, mappo_objective, train_mappo, FeatureShape, MappoAgents, MappoConfig, MappoController, MappoDecision,
    MappoEpisode, MappoMode, MappoNet,
};
pub use mlp::Mlp;

/// The `[baseline]` configuration section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub aloha: AlohaConfig,
    pub mappo: MappoConfig,
    /// UE count MAPPO agents are built and trained for; defaults to the
    /// smallest admissible count.
    pub mappo_num_ues: Option<usize>,
}

impl BaselineConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let a = &self.aloha;
        if !(0.0 < a.p_min && a.p_min <= a.p_init && a.p_init <= a.p_max && a.p_max <= 1.0) {
            return Err(crate::Error::config("baseline.aloha", "need 0 < p_min <= p_init <= p_max <= 1"));
        }
        if !(0.0 < a.decay && a.decay <= 1.0 && a.recovery >= 0.0) {
            return Err(crate::Error::config("baseline.aloha", "need 0 < decay <= 1 and recovery >= 0"));
        }
        if self.mappo.hidden == 0 {
            return Err(crate::Error::config("baseline.mappo.hidden", "must be >= 1"));
        }
        if self.mappo_num_ues == Some(0) {
            return Err(crate::Error::config("baseline.mappo_num_ues", "must be >= 1"));
        }
        Ok(())
    }
}

/// Policy families selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Token,
    Aloha,
    Dictator,
    MappoS,
    MappoG,
}

impl std::str::FromStr for PolicyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "aloha" => Ok(Self::Aloha),
            "dictator" => Ok(Self::Dictator),
            "mappo-s" => Ok(Self::MappoS),
            "mappo-g" => Ok(Self::MappoG),
            _ => Err(crate::Error::config("policy_type", format!("unknown policy type `{s}`"))),
        }
    }
}
