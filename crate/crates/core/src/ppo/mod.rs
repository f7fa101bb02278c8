//! Leader-first PPO: GAE, critic regression and the clipped surrogate with
//! KL and entropy terms, computed with analytic logit gradients.

mod rollout;
mod train;

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

pub use rollout::{collect_episode, finish_trajectory, Episode, RewardScale};
pub use train::{train, AbortRecord, EpochRecord, RoleUpdate, TrainOutcome, TrainSetup, Trainer, TrainerCheckpoint, UpdateStats, TRAINER_CHECKPOINT_FORMAT};

use crate::error::{Error, Result};
use crate::nn::{entropy, LogitGrad, OptimizerKind};
use crate::policy::{PosDist, PromptSeq, Role, Scored, TokenPolicy};
use crate::scalar::Real;

/// Trainer hyperparameters. Defaults follow the reference settings; the
/// acceptance runs use desk-scale overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d::gamma")]
    pub gamma: f64,
    #[serde(default = "d::lambda")]
    pub lambda: f64,
    #[serde(default = "d::clip_eps")]
    pub clip_eps: f64,
    #[serde(default = "d::coef")]
    pub entropy_coef: f64,
    #[serde(default = "d::coef")]
    pub kl_coef: f64,
    /// Leader actor rate `alpha`.
    #[serde(default = "d::actor_lr")]
    pub actor_lr: f64,
    /// Critic rate `beta`.
    #[serde(default = "d::critic_lr")]
    pub critic_lr: f64,
    /// Follower actor rate is `iota_u * actor_lr`.
    #[serde(default = "d::one")]
    pub iota_u: f64,
    #[serde(default = "d::ppo_epochs")]
    pub ppo_epochs: usize,
    #[serde(default = "d::minibatch")]
    pub minibatch: usize,
    /// Episodes collected before each update.
    #[serde(default = "d::buffer_episodes")]
    pub buffer_episodes: usize,
    #[serde(default = "d::temperature_start")]
    pub temperature_start: f64,
    #[serde(default = "d::temperature_end")]
    pub temperature_end: f64,
    /// `e_max`; one epoch is one episode.
    pub max_epochs: usize,
    #[serde(default = "d::optimizer")]
    pub optimizer: OptimizerKind,
    /// Final rate as a fraction of the initial one under cosine decay.
    #[serde(default)]
    pub lr_floor: f64,
    /// Gradient-norm clip per parameter group; 0 disables.
    #[serde(default = "d::one")]
    pub max_grad_norm: f64,
    #[serde(default = "d::yes")]
    pub normalize_advantages: bool,
    /// Leader reward divisor; absent means max per-TTI dPDUs + epsilon.
    #[serde(default)]
    pub leader_reward_scale: Option<f64>,
    /// Follower reward divisor; absent means rho1 + rho2.
    #[serde(default)]
    pub follower_reward_scale: Option<f64>,
    /// Write a trainer checkpoint at the first buffer flush after every
    /// this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Rollout threads per buffer window.
    #[serde(default = "d::one_usize")]
    pub workers: usize,
    /// Forces one worker and omits wall-clock fields from logs.
    #[serde(default)]
    pub deterministic: bool,
    /// Freeze the leader (no leader updates).
    #[serde(default)]
    pub freeze_leader: bool,
    /// Freeze the followers (no follower updates).
    #[serde(default)]
    pub freeze_followers: bool,
}

mod d {
    use crate::nn::OptimizerKind;
    pub fn gamma() -> f64 {
        0.95
    }
    pub fn lambda() -> f64 {
        0.9
    }
    pub fn clip_eps() -> f64 {
        0.1
    }
    pub fn coef() -> f64 {
        0.01
    }
    pub fn actor_lr() -> f64 {
        5e-4
    }
    pub fn critic_lr() -> f64 {
        1e-5
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn one_usize() -> usize {
        1
    }
    pub fn ppo_epochs() -> usize {
        5
    }
    pub fn minibatch() -> usize {
        128
    }
    pub fn buffer_episodes() -> usize {
        10
    }
    pub fn temperature_start() -> f64 {
        3.0
    }
    pub fn temperature_end() -> f64 {
        0.3
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: d::gamma(),
            lambda: d::lambda(),
            clip_eps: d::clip_eps(),
            entropy_coef: d::coef(),
            kl_coef: d::coef(),
            actor_lr: d::actor_lr(),
            critic_lr: d::critic_lr(),
            iota_u: 1.0,
            ppo_epochs: d::ppo_epochs(),
            minibatch: d::minibatch(),
            buffer_episodes: d::buffer_episodes(),
            temperature_start: d::temperature_start(),
            temperature_end: d::temperature_end(),
            max_epochs: 2000,
            optimizer: OptimizerKind::Adam,
            lr_floor: 0.0,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            leader_reward_scale: None,
            follower_reward_scale: None,
            checkpoint_every: 0,
            workers: 1,
            deterministic: false,
            freeze_leader: false,
            freeze_followers: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(Error::config(format!("train.{f}"), r));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.gamma) {
            return bad("gamma", format!("{} outside [0, 1]", self.gamma));
        }
        if !unit(self.lambda) {
            return bad("lambda", format!("{} outside [0, 1]", self.lambda));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps", format!("{} outside (0, 1)", self.clip_eps));
        }
        for (f, v) in [
            ("entropy_coef", self.entropy_coef),
            ("kl_coef", self.kl_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(f, format!("{v} must be >= 0"));
            }
        }
        for (f, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("iota_u", self.iota_u),
            ("temperature_start", self.temperature_start),
            ("temperature_end", self.temperature_end),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(f, format!("{v} must be > 0"));
            }
        }
        if !unit(self.lr_floor) {
            return bad("lr_floor", format!("{} outside [0, 1]", self.lr_floor));
        }
        for (f, v) in [
            ("ppo_epochs", self.ppo_epochs),
            ("minibatch", self.minibatch),
            ("buffer_episodes", self.buffer_episodes),
            ("max_epochs", self.max_epochs),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return bad(f, "must be >= 1".into());
            }
        }
        for (f, v) in [
            ("leader_reward_scale", self.leader_reward_scale),
            ("follower_reward_scale", self.follower_reward_scale),
        ] {
            if let Some(s) = v {
                if !(s.is_finite() && s > 0.0) {
                    return bad(f, format!("{s} must be > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn coeffs(&self) -> PpoCoeffs {
        PpoCoeffs {
            clip_eps: self.clip_eps,
            kl_coef: self.kl_coef,
            entropy_coef: self.entropy_coef,
        }
    }

    /// Follower actor rate.
    pub fn follower_lr(&self) -> f64 {
        self.iota_u * self.actor_lr
    }
}

/// Actor temperature at `epoch`: linear from start to end over `max_epochs`.
pub fn temperature_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let x = epoch.min(cfg.max_epochs) as f64 / cfg.max_epochs as f64;
    cfg.temperature_start + (cfg.temperature_end - cfg.temperature_start) * x
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` with
/// `delta_t = r_t + gamma V_{t+1} - V_t`; `values` carries the bootstrap.
pub fn gae<T: Real>(rewards: &[T], values: &[T], gamma: T, lambda: T) -> Result<Vec<T>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Contract(format!(
            "GAE needs {} values (rewards + bootstrap), got {}",
            rewards.len() + 1,
            values.len()
        )));
    }
    let mut adv = vec![T::zero(); rewards.len()];
    let mut acc = T::zero();
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// `R_t = sum_{t' >= t} gamma^{t'-t} r_{t'}`.
pub fn rewards_to_go<T: Real>(rewards: &[T], gamma: T) -> Vec<T> {
    let mut out = vec![T::zero(); rewards.len()];
    let mut acc = T::zero();
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One stored agent decision. `O` is the observation: a prompt for token
/// policies, a feature vector for the fixed-width baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition<T, O = PromptSeq> {
    pub obs: O,
    pub action: Vec<usize>,
    pub num_ues: usize,
    pub temperature: T,
    /// Scaled reward.
    pub reward: T,
    /// Behaviour-policy log-probability.
    pub logprob: T,
    pub value: T,
    pub advantage: T,
    pub ret: T,
    /// Behaviour-policy distribution at each action position.
    pub old_dists: Vec<Vec<T>>,
    /// Set once advantages and returns are filled in.
    pub finished: bool,
}

impl<T: Real> Transition<T> {
    pub fn role(&self) -> Role {
        self.obs.role
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoCoeffs {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
}

/// Per-sample pieces of the surrogate objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorTerms<T> {
    pub ratio: T,
    pub surrogate: T,
    pub kl: T,
    pub entropy: T,
    /// Whether the clipped branch is the active minimum.
    pub clipped: bool,
}

impl<T: Real> ActorTerms<T> {
    pub fn objective(&self, c: &PpoCoeffs) -> T {
        self.surrogate - T::of(c.kl_coef) * self.kl + T::of(c.entropy_coef) * self.entropy
    }
}

fn score<T: Real>(policy: &TokenPolicy<T>, tr: &Transition<T>) -> Result<Scored<T>> {
    policy.score(&tr.obs, &tr.action, tr.obs.role, tr.num_ues, tr.temperature)
}

/// Surrogate pieces for one sample given the current distribution at each
/// action position. With `scale`, also returns `scale * dJ/dz` for every
/// logit of every position, aligned with `positions[j].p`.
pub fn surrogate_terms<T: Real, O>(positions: &[PosDist<T>], tr: &Transition<T, O>, c: &PpoCoeffs, scale: Option<T>) -> (ActorTerms<T>, Vec<Vec<T>>) {
    let logp: T = positions.iter().map(|d| d.logp[d.chosen]).sum();
    let ratio = (logp - tr.logprob).exp();
    let a = tr.advantage;
    let eps = T::of(c.clip_eps);
    let clipped_ratio = ratio.max(T::one() - eps).min(T::one() + eps);
    let unclipped = ratio * a;
    let clipped = clipped_ratio * a;
    let (surrogate, g_logp, is_clipped) = if unclipped <= clipped {
        (unclipped, ratio * a, false)
    } else {
        (clipped, T::zero(), true)
    };
    let (ckl, cent) = (T::of(c.kl_coef), T::of(c.entropy_coef));
    let mut kl = T::zero();
    let mut ent = T::zero();
    let mut seeds = Vec::new();
    for (j, d) in positions.iter().enumerate() {
        let old = &tr.old_dists[j];
        for k in 0..d.p.len() {
            if old[k] > T::zero() {
                kl += old[k] * (old[k].ln() - d.logp[k]);
            }
        }
        let h = entropy(&d.p, &d.logp);
        ent += h;
        if let Some(scale) = scale {
            let inv_t = scale / tr.temperature;
            seeds.push(
                (0..d.p.len())
                    .map(|k| {
                        let ind = if k == d.chosen { T::one() } else { T::zero() };
                        let plogp = if d.p[k] > T::zero() { d.logp[k] } else { T::zero() };
                        let gz = g_logp * (ind - d.p[k]) - ckl * (d.p[k] - old[k]) - cent * d.p[k] * (plogp + h);
                        gz * inv_t
                    })
                    .collect(),
            );
        }
    }
    (
        ActorTerms {
            ratio,
            surrogate,
            kl,
            entropy: ent,
            clipped: is_clipped,
        },
        seeds,
    )
}

fn actor_terms<T: Real>(sc: &Scored<T>, tr: &Transition<T>, c: &PpoCoeffs, seed_scale: Option<T>) -> (ActorTerms<T>, Vec<LogitGrad<T>>) {
    let (terms, grads) = surrogate_terms(&sc.positions, tr, c, seed_scale);
    let seeds = grads
        .into_iter()
        .zip(&sc.positions)
        .enumerate()
        .map(|(j, (g, d))| LogitGrad {
            pos: sc.prompt_len - 1 + j,
            grads: d.mask.iter().copied().zip(g).collect(),
        })
        .collect();
    (terms, seeds)
}

fn items<'a, T: 'a, O: 'a, B: Borrow<Transition<T, O>>>(batch: &'a [B]) -> impl Iterator<Item = &'a Transition<T, O>> {
    batch.iter().map(|b| b.borrow())
}

pub(crate) fn check_batch<T: Real, O, B: Borrow<Transition<T, O>>>(batch: &[B]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(tr) = items(batch).find(|t| !t.finished) {
        return Err(Error::Contract(format!(
            "transition with action {:?} has no advantage yet",
            tr.action
        )));
    }
    Ok(())
}

/// Mean surrogate objective `J` over the batch.
pub fn ppo_objective<T: Real, B: Borrow<Transition<T>>>(policy: &TokenPolicy<T>, batch: &[B], c: &PpoCoeffs) -> Result<T> {
    check_batch(batch)?;
    let mut total = T::zero();
    for tr in items(batch) {
        let sc = score(policy, tr)?;
        total += actor_terms(&sc, tr, c, None).0.objective(c);
    }
    Ok(total / T::of_usize(batch.len()))
}

/// Mean critic loss `(V - R)^2`.
pub fn critic_loss<T: Real, B: Borrow<Transition<T>>>(policy: &TokenPolicy<T>, batch: &[B]) -> Result<T> {
    check_batch(batch)?;
    let m = &policy.model;
    let mut total = T::zero();
    for tr in items(batch) {
        let acts = m.forward(&tr.obs.tokens);
        let v = m.value_of_hidden(m.hidden(&acts, acts.len() - 1));
        total += (v - tr.ret) * (v - tr.ret);
    }
    Ok(total / T::of_usize(batch.len()))
}

/// Batch statistics from one gradient pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub objective: f64,
    pub critic_loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

/// Accumulates `dJ/dtheta` (actor, ascent direction) and `dL/dphi` (value
/// head, descent direction) for the batch mean into `grads`.
pub fn batch_gradients<T: Real, B: Borrow<Transition<T>>>(policy: &TokenPolicy<T>, batch: &[B], c: &PpoCoeffs, grads: &mut [T], actor: bool, critic: bool) -> Result<BatchStats> {
    check_batch(batch)?;
    let n = T::of_usize(batch.len());
    let m = &policy.model;
    let mut st = BatchStats::default();
    for tr in items(batch) {
        let sc = score(policy, tr)?;
        let (terms, seeds) = actor_terms(&sc, tr, c, actor.then(|| T::one() / n));
        if actor {
            m.backward(&sc.acts, &seeds, grads);
        }
        let h = m.hidden(&sc.acts, sc.prompt_len - 1);
        let v = m.value_of_hidden(h);
        if critic {
            m.value_backward(h, T::of(2.0) * (v - tr.ret) / n, grads);
        }
        st.objective += terms.objective(c).to_f64_lossy();
        st.critic_loss += ((v - tr.ret) * (v - tr.ret)).to_f64_lossy();
        st.kl += terms.kl.to_f64_lossy();
        st.entropy += terms.entropy.to_f64_lossy();
        st.clip_frac += terms.clipped as u8 as f64;
    }
    let k = batch.len() as f64;
    st.objective /= k;
    st.critic_loss /= k;
    st.kl /= k;
    st.entropy /= k;
    st.clip_frac /= k;
    Ok(st)
}

/// `mean_b A_b * grad log pi(a_b | o_b)`: the plain policy-gradient estimate.
pub fn vanilla_pg_gradient<T: Real, B: Borrow<Transition<T>>>(policy: &TokenPolicy<T>, batch: &[B], grads: &mut [T]) -> Result<()> {
    check_batch(batch)?;
    let n = T::of_usize(batch.len());
    for tr in items(batch) {
        let sc = score(policy, tr)?;
        let seeds: Vec<LogitGrad<T>> = sc
            .positions
            .iter()
            .enumerate()
            .map(|(j, d)| LogitGrad {
                pos: sc.prompt_len - 1 + j,
                grads: (0..d.p.len())
                    .map(|k| {
                        let ind = if k == d.chosen { T::one() } else { T::zero() };
                        (d.mask[k], tr.advantage * (ind - d.p[k]) / (tr.temperature * n))
                    })
                    .collect(),
            })
            .collect();
        policy.model.backward(&sc.acts, &seeds, grads);
    }
    Ok(())
}

/// Zero-mean, unit-variance advantages across `batch`.
pub fn normalize_advantages<T: Real, O>(batch: &mut [Transition<T, O>]) {
    if batch.len() < 2 {
        return;
    }
    let n = batch.len() as f64;
    let mean = batch.iter().map(|t| t.advantage.to_f64_lossy()).sum::<f64>() / n;
    let var = batch.iter().map(|t| (t.advantage.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for t in batch {
        t.advantage = T::of((t.advantage.to_f64_lossy() - mean) / sd);
    }
}
