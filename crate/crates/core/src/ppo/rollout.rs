use serde::{Deserialize, Serialize};

use super::{gae, TrainConfig, Transition};
use crate::env::{sample_num_ues, EnvConfig, EnvState};
use crate::error::Result;
use crate::game::UtilityWeights;
use crate::metrics::{EpisodeKpis, Kpis};
use crate::policy::{Decoded, PromptSeq, Role, TokenPolicy};
use crate::rng::{self, Stream};
use crate::scalar::Real;

/// Reward divisors applied before storage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub leader: f64,
    pub follower: f64,
}

impl RewardScale {
    pub fn new(train: &TrainConfig, env: &EnvConfig, w: &UtilityWeights) -> Self {
        Self {
            leader: train
                .leader_reward_scale
                .unwrap_or(env.max_dpdus_per_tti() as f64 + w.epsilon),
            follower: train.follower_reward_scale.unwrap_or(w.rho1 + w.rho2),
        }
    }
}

/// One collected episode.
#[derive(Clone, Debug)]
pub struct Episode<T> {
    pub num_ues: usize,
    /// Leader trajectory, one transition per TTI.
    pub leader: Vec<Transition<T>>,
    /// Follower trajectories, UE by UE, each one transition per TTI.
    pub followers: Vec<Vec<Transition<T>>>,
    pub kpis: Kpis,
    /// Raw leader reward per TTI.
    pub leader_rewards: Vec<f64>,
}

impl<T: Real> Episode<T> {
    /// All follower transitions in UE-major order.
    pub fn follower_pool(&self) -> impl Iterator<Item = &Transition<T>> {
        self.followers.iter().flatten()
    }
}

fn transition<T: Real>(prompt: PromptSeq, dec: Decoded<T>, num_ues: usize, temperature: T) -> Transition<T> {
    Transition {
        obs: prompt,
        action: dec.action.tokens,
        num_ues,
        temperature,
        reward: T::zero(),
        logprob: dec.action.logprob,
        value: dec.value,
        advantage: T::zero(),
        ret: T::zero(),
        old_dists: dec.dists,
        finished: false,
    }
}

/// Fills advantages and returns for one finished trajectory. The episode
/// horizon is terminal, so the bootstrap value is 0.
pub fn finish_trajectory<T: Real, O>(traj: &mut [Transition<T, O>], gamma: f64, lambda: f64) -> Result<()> {
    let rewards: Vec<T> = traj.iter().map(|t| t.reward).collect();
    let mut values: Vec<T> = traj.iter().map(|t| t.value).collect();
    values.push(T::zero());
    let adv = gae(&rewards, &values, T::of(gamma), T::of(lambda))?;
    for (tr, a) in traj.iter_mut().zip(adv) {
        tr.advantage = a;
        tr.ret = a + tr.value;
        tr.finished = true;
    }
    Ok(())
}

/// Runs episode `index` of a training run: draws `I_t`, resets the
/// environment and lets the leader act before the followers every TTI.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode<T: Real>(
    leader: &TokenPolicy<T>,
    follower: &TokenPolicy<T>,
    env_cfg: &EnvConfig,
    weights: &UtilityWeights,
    train: &TrainConfig,
    seed: u64,
    index: u64,
    temperature: f64,
) -> Result<Episode<T>> {
    let num_ues = sample_num_ues(env_cfg, &mut rng::stream(seed, Stream::UeCount, index));
    let mut env = EnvState::new(env_cfg, weights, num_ues, rng::derive_seed(seed, &[100, index]))?;
    let mut lrng = rng::stream(seed, Stream::Leader, index);
    let mut frng = rng::stream(seed, Stream::Follower, index);
    let scale = RewardScale::new(train, env_cfg, weights);
    let temp = T::of(temperature);
    let mut kpis = EpisodeKpis::new(num_ues, env_cfg.num_rbgs);
    let mut lead = Vec::with_capacity(env_cfg.episode_len);
    let mut foll: Vec<Vec<Transition<T>>> = vec![Vec::with_capacity(env_cfg.episode_len); num_ues];
    let mut leader_rewards = Vec::with_capacity(env_cfg.episode_len);
    while !env.done() {
        let prompt = leader.schema.serialize_leader_obs(&env.leader_obs())?;
        let dec = leader.act(&prompt, Role::Leader, num_ues, temp, &mut lrng)?;
        let dcm = leader.decode_dcm(&dec.action)?;
        lead.push(transition(prompt, dec, num_ues, temp));
        let mut actions = Vec::with_capacity(num_ues);
        for (i, obs) in env.follower_obs_for(&dcm)?.iter().enumerate() {
            let prompt = follower.schema.serialize_follower_obs(obs)?;
            let dec = follower.act(&prompt, Role::Follower, num_ues, temp, &mut frng)?;
            actions.push(follower.decode_ue_action(&dec.action)?);
            foll[i].push(transition(prompt, dec, num_ues, temp));
        }
        let res = env.step(&dcm, &actions)?;
        kpis.record(&res, &env.bs().usage);
        leader_rewards.push(res.leader_reward);
        lead.last_mut().expect("pushed above").reward = T::of(res.leader_reward / scale.leader);
        for (traj, r) in foll.iter_mut().zip(&res.follower_rewards) {
            traj.last_mut().expect("pushed above").reward = T::of(r / scale.follower);
        }
    }
    finish_trajectory(&mut lead, train.gamma, train.lambda)?;
    for traj in &mut foll {
        finish_trajectory(traj, train.gamma, train.lambda)?;
    }
    Ok(Episode {
        num_ues,
        leader: lead,
        followers: foll,
        kpis: kpis.report(env_cfg),
        leader_rewards,
    })
}
