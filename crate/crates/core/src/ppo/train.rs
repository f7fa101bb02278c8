use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{batch_gradients, collect_episode, normalize_advantages, temperature_at, BatchStats, Episode, TrainConfig, Transition};
use crate::config::digest;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::game::UtilityWeights;
use crate::metrics::Kpis;
use crate::nn::{clip_grad_norm, cosine_rate, Direction, Optimizer};
use crate::policy::{PolicyCheckpoint, PolicyConfig, Role, TokenPolicy};
use crate::rng::{self, Stream};
use crate::scalar::Real;

/// Everything a training run depends on besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub game: UtilityWeights,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.game.validate()?;
        self.policy.validate()?;
        self.train.validate()
    }

    /// Hash used to refuse resuming under a different configuration. Worker
    /// count and determinism flags do not change results and are excluded.
    pub fn hash(&self) -> String {
        let mut t = self.train.clone();
        t.workers = 1;
        t.deterministic = false;
        digest(&(&self.env, &self.game, &self.policy, &t))
    }

    pub fn model_hash(&self) -> String {
        crate::config::model_hash(&self.env, &self.game, &self.policy)
    }
}

/// Averages over one role's update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleUpdate {
    pub transitions: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub stats: BatchStats,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leader: Option<RoleUpdate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub follower: Option<RoleUpdate>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub num_ues: usize,
    pub temperature: f64,
    pub leader_utility: f64,
    pub follower_utility: f64,
    pub kpis: Kpis,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update: Option<UpdateStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_s: Option<f64>,
}

/// Diagnostic written before a non-finite abort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub abort: String,
    pub epoch: usize,
    pub update: usize,
    pub role: Role,
}

pub const TRAINER_CHECKPOINT_FORMAT: &str = "stackmac.trainer";

/// Full trainer state at a buffer boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainerCheckpoint<T: Real> {
    pub format: String,
    pub setup_hash: String,
    pub seed: u64,
    pub next_epoch: usize,
    pub updates: usize,
    pub leader: PolicyCheckpoint,
    pub follower: PolicyCheckpoint,
    pub optimizers: Vec<Optimizer<T>>,
}

/// Parameters plus the optimizer moments that act on them.
#[derive(Clone, Debug)]
struct Agent<T> {
    policy: TokenPolicy<T>,
    actor: Optimizer<T>,
    critic: Optimizer<T>,
}

impl<T: Real> Agent<T> {
    fn new(policy: TokenPolicy<T>, cfg: &TrainConfig) -> Self {
        let n = policy.model.num_params();
        Self {
            policy,
            actor: Optimizer::new(cfg.optimizer, n),
            critic: Optimizer::new(cfg.optimizer, n),
        }
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub leader: TokenPolicy<T>,
    pub follower: TokenPolicy<T>,
    pub log: Vec<EpochRecord>,
}

/// Leader-first PPO over episodes; one epoch is one episode, and both
/// agents update every `buffer_episodes` episodes.
pub struct Trainer<T: Real> {
    setup: TrainSetup,
    seed: u64,
    next_epoch: usize,
    updates: usize,
    leader: Agent<T>,
    follower: Agent<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(setup: TrainSetup, seed: u64) -> Result<Self> {
        setup.validate()?;
        let leader = TokenPolicy::new(&setup.env, &setup.policy, &mut rng::stream(seed, Stream::Params, 0))?;
        let follower = TokenPolicy::new(&setup.env, &setup.policy, &mut rng::stream(seed, Stream::Params, 1))?;
        Ok(Self {
            leader: Agent::new(leader, &setup.train),
            follower: Agent::new(follower, &setup.train),
            setup,
            seed,
            next_epoch: 0,
            updates: 0,
        })
    }

    /// Starts from given parameter bundles with fresh optimizer state.
    pub fn with_policies(setup: TrainSetup, seed: u64, leader: TokenPolicy<T>, follower: TokenPolicy<T>) -> Result<Self> {
        let mut t = Self::new(setup, seed)?;
        t.leader = Agent::new(leader, &t.setup.train);
        t.follower = Agent::new(follower, &t.setup.train);
        Ok(t)
    }

    /// Restores a trainer; the run continues exactly as if uninterrupted.
    /// `max_epochs` may differ from the checkpointed run to extend it.
    pub fn resume(setup: TrainSetup, ck: &TrainerCheckpoint<T>) -> Result<Self> {
        setup.validate()?;
        if ck.format != TRAINER_CHECKPOINT_FORMAT {
            return Err(Error::Serialization(format!("not a trainer checkpoint: {}", ck.format)));
        }
        let mut probe = setup.clone();
        probe.train.max_epochs = 1;
        let hash = probe.hash();
        if hash != ck.setup_hash {
            return Err(Error::HashMismatch {
                checkpoint: ck.setup_hash.clone(),
                config: hash,
            });
        }
        let mh = setup.model_hash();
        let mut leader = Agent::new(TokenPolicy::from_checkpoint(&ck.leader, Some(&mh))?, &setup.train);
        let mut follower = Agent::new(TokenPolicy::from_checkpoint(&ck.follower, Some(&mh))?, &setup.train);
        match ck.optimizers.as_slice() {
            [a, b, c, d] => {
                leader.actor = a.clone();
                leader.critic = b.clone();
                follower.actor = c.clone();
                follower.critic = d.clone();
            }
            _ => return Err(Error::Serialization("trainer checkpoint needs 4 optimizer states".into())),
        }
        Ok(Self {
            seed: ck.seed,
            next_epoch: ck.next_epoch,
            updates: ck.updates,
            leader,
            follower,
            setup,
        })
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint<T> {
        let mut probe = self.setup.clone();
        probe.train.max_epochs = 1;
        let mh = self.setup.model_hash();
        TrainerCheckpoint {
            format: TRAINER_CHECKPOINT_FORMAT.into(),
            setup_hash: probe.hash(),
            seed: self.seed,
            next_epoch: self.next_epoch,
            updates: self.updates,
            leader: self.leader.policy.to_checkpoint(&mh),
            follower: self.follower.policy.to_checkpoint(&mh),
            optimizers: vec![
                self.leader.actor.clone(),
                self.leader.critic.clone(),
                self.follower.actor.clone(),
                self.follower.critic.clone(),
            ],
        }
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn leader(&self) -> &TokenPolicy<T> {
        &self.leader.policy
    }

    pub fn follower(&self) -> &TokenPolicy<T> {
        &self.follower.policy
    }

    fn total_updates(&self) -> usize {
        self.setup.train.max_epochs.div_ceil(self.setup.train.buffer_episodes)
    }

    fn collect_window(&self, start: usize, end: usize) -> Result<Vec<Episode<T>>> {
        let s = &self.setup;
        let run = |e: usize| {
            collect_episode(
                &self.leader.policy,
                &self.follower.policy,
                &s.env,
                &s.game,
                &s.train,
                self.seed,
                e as u64,
                temperature_at(e, &s.train),
            )
        };
        let workers = if s.train.deterministic { 1 } else { s.train.workers.min(end - start) };
        if workers <= 1 {
            return (start..end).map(run).collect();
        }
        let mut slots: Vec<Option<Result<Episode<T>>>> = (start..end).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    scope.spawn(move || (start + w..end).step_by(workers).map(|e| (e, run(e))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (e, r) in h.join().expect("rollout worker panicked") {
                    slots[e - start] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every episode collected")).collect()
    }

    /// Runs until `max_epochs`, passing each log line to `on_record` and each
    /// due checkpoint to `on_checkpoint`.
    pub fn run(
        &mut self,
        on_record: &mut dyn FnMut(&EpochRecord) -> Result<()>,
        on_checkpoint: &mut dyn FnMut(&TrainerCheckpoint<T>) -> Result<()>,
        on_abort: &mut dyn FnMut(&AbortRecord) -> Result<()>,
    ) -> Result<()> {
        let cfg = self.setup.train.clone();
        let mut last_ck = self.next_epoch / cfg.checkpoint_every.max(1);
        while self.next_epoch < cfg.max_epochs {
            let clock = Instant::now();
            let start = self.next_epoch;
            let end = (start + cfg.buffer_episodes).min(cfg.max_epochs);
            let episodes = self.collect_window(start, end)?;
            let full = episodes.len() == cfg.buffer_episodes;
            let update = if full {
                let mut lead: Vec<Transition<T>> = Vec::new();
                let mut foll: Vec<Transition<T>> = Vec::new();
                for ep in &episodes {
                    lead.extend(ep.leader.iter().cloned());
                    foll.extend(ep.follower_pool().cloned());
                }
                match self.update(lead, foll) {
                    Ok(u) => Some(u),
                    Err(Error::NonFinite { what, .. }) => {
                        let role = if what.starts_with("leader") { Role::Leader } else { Role::Follower };
                        on_abort(&AbortRecord {
                            abort: what.clone(),
                            epoch: end - 1,
                            update: self.updates,
                            role,
                        })?;
                        return Err(Error::NonFinite { what, epoch: end - 1 });
                    }
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let wall = (!cfg.deterministic).then(|| clock.elapsed().as_secs_f64());
            let n = episodes.len();
            let mut update = update;
            for (k, ep) in episodes.into_iter().enumerate() {
                let e = start + k;
                let last = k + 1 == n;
                let rec = EpochRecord {
                    epoch: e,
                    num_ues: ep.num_ues,
                    temperature: temperature_at(e, &cfg),
                    leader_utility: ep.kpis.leader_utility,
                    follower_utility: ep.kpis.follower_utility,
                    kpis: ep.kpis,
                    update: if last { update.take() } else { None },
                    wall_s: if last { wall } else { None },
                };
                if !(rec.leader_utility.is_finite() && rec.follower_utility.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "episode utility".into(),
                        epoch: e,
                    });
                }
                on_record(&rec)?;
            }
            self.next_epoch = end;
            if full && cfg.checkpoint_every > 0 && self.next_epoch / cfg.checkpoint_every > last_ck {
                last_ck = self.next_epoch / cfg.checkpoint_every;
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }

    /// One learner phase over a full buffer; both buffers are consumed.
    fn update(&mut self, mut lead: Vec<Transition<T>>, mut foll: Vec<Transition<T>>) -> Result<UpdateStats> {
        let cfg = self.setup.train.clone();
        let total = self.total_updates();
        let u = self.updates;
        let frac = |base: f64| cosine_rate(base, cfg.lr_floor, u, total);
        let mut stats = UpdateStats {
            update: u,
            ..UpdateStats::default()
        };
        if !cfg.freeze_leader {
            stats.leader = Some(update_role(
                &mut self.leader,
                &mut lead,
                &cfg,
                frac(cfg.actor_lr),
                frac(cfg.critic_lr),
                &mut rng::stream(self.seed, Stream::Shuffle, 2 * u as u64),
                "leader",
            )?);
        }
        if !cfg.freeze_followers {
            stats.follower = Some(update_role(
                &mut self.follower,
                &mut foll,
                &cfg,
                frac(cfg.follower_lr()),
                frac(cfg.critic_lr),
                &mut rng::stream(self.seed, Stream::Shuffle, 2 * u as u64 + 1),
                "follower",
            )?);
        }
        self.updates += 1;
        Ok(stats)
    }
}

fn finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `ppo_epochs` passes of shuffled minibatch steps: the actor ascends the
/// surrogate at `actor_lr`, the value head descends the critic loss at
/// `critic_lr`.
fn update_role<T: Real>(
    agent: &mut Agent<T>,
    buffer: &mut [Transition<T>],
    cfg: &TrainConfig,
    actor_lr: f64,
    critic_lr: f64,
    rng: &mut rng::Rng,
    name: &str,
) -> Result<RoleUpdate> {
    if cfg.normalize_advantages {
        normalize_advantages(buffer);
    }
    let coeffs = cfg.coeffs();
    let n_params = agent.policy.model.num_params();
    let value = agent.policy.model.value_range();
    let trunk = 0..value.start;
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut grads = vec![T::zero(); n_params];
    let mut out = RoleUpdate {
        transitions: buffer.len(),
        actor_lr,
        critic_lr,
        ..RoleUpdate::default()
    };
    let mut steps = 0usize;
    for _ in 0..cfg.ppo_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let mb: Vec<&Transition<T>> = chunk.iter().map(|&i| &buffer[i]).collect();
            grads.iter_mut().for_each(|g| *g = T::zero());
            let st = batch_gradients(&agent.policy, &mb, &coeffs, &mut grads, true, true)?;
            if !(st.objective.is_finite() && st.critic_loss.is_finite()) || !finite(&grads) {
                return Err(Error::NonFinite {
                    what: format!("{name} loss"),
                    epoch: 0,
                });
            }
            out.actor_grad_norm += clip_grad_norm(&mut grads, trunk.clone(), cfg.max_grad_norm);
            out.critic_grad_norm += clip_grad_norm(&mut grads, value.clone(), cfg.max_grad_norm);
            let params = &mut agent.policy.model.data;
            agent.actor.step(params, &grads, actor_lr, Direction::Ascend, trunk.clone());
            agent.critic.step(params, &grads, critic_lr, Direction::Descend, value.clone());
            out.stats.objective += st.objective;
            out.stats.critic_loss += st.critic_loss;
            out.stats.kl += st.kl;
            out.stats.entropy += st.entropy;
            out.stats.clip_frac += st.clip_frac;
            steps += 1;
        }
    }
    let k = steps.max(1) as f64;
    out.stats.objective /= k;
    out.stats.critic_loss /= k;
    out.stats.kl /= k;
    out.stats.entropy /= k;
    out.stats.clip_frac /= k;
    out.actor_grad_norm /= k;
    out.critic_grad_norm /= k;
    Ok(out)
}

/// Runs a full training job in memory.
pub fn train<T: Real>(setup: &TrainSetup, seed: u64) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(setup.clone(), seed)?;
    let mut log = Vec::new();
    trainer.run(
        &mut |r| {
            log.push(r.clone());
            Ok(())
        },
        &mut |_| Ok(()),
        &mut |_| Ok(()),
    )?;
    Ok(TrainOutcome {
        leader: trainer.leader.policy,
        follower: trainer.follower.policy,
        log,
    })
}
