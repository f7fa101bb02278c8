//! Leader/follower uplink MAC simulator, grammar-constrained token policies,
//! a PPO trainer, baselines and a numerical equilibrium lab.

pub mod baselines;
pub mod config;
pub mod env;
pub mod error;
pub mod game;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod scalar;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Real;

/// Training precision.
pub type Policy = policy::TokenPolicy<f32>;
pub type Policy64 = policy::TokenPolicy<f64>;
pub type Trainer = ppo::Trainer<f32>;
pub type Trainer64 = ppo::Trainer<f64>;
pub type TrainerCheckpoint = ppo::TrainerCheckpoint<f32>;
pub type Mappo = baselines::MappoAgents<f32>;
pub type Mappo64 = baselines::MappoAgents<f64>;
pub type StageGame = game::StageGame<f64>;
