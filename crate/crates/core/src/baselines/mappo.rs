use std::borrow::Borrow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::env::{sample_num_ues, EnvConfig, EnvState, FollowerObs, LeaderObs, UeAction};
use crate::error::{Error, Result};
use crate::game::{Bitmap, UtilityWeights};
use crate::metrics::{Controller, Decoding, EpisodeKpis};
use crate::nn::{clip_grad_norm, cosine_rate, masked_softmax, Direction, Optimizer};
use crate::policy::{PosDist, Role, BUFFER_BUCKETS};
use crate::ppo::{check_batch, finish_trajectory, normalize_advantages, surrogate_terms, temperature_at, BatchStats, EpochRecord, PpoCoeffs, RewardScale, RoleUpdate, TrainConfig, TrainSetup, Transition, UpdateStats};
use crate::rng::{self, Rng, Stream};
use crate::scalar::Real;

/// `S` is retrained per UE count; `G` is trained once and reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MappoMode {
    #[serde(rename = "s")]
    S,
    #[serde(rename = "g")]
    G,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappoConfig {
    pub hidden: usize,
    /// Zero-pad or truncate observations of the wrong width instead of
    /// failing.
    pub adapter: bool,
}

impl Default for MappoConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            adapter: false,
        }
    }
}

/// Observation layout constants shared by both roles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channel_states: usize,
    pub num_rbgs: usize,
    pub ucm_len: usize,
    pub ucm_vocab: usize,
    pub dpdu_bits: u64,
}

impl FeatureShape {
    pub fn from_env(cfg: &EnvConfig) -> Self {
        Self {
            channel_states: cfg.num_channel_states(),
            num_rbgs: cfg.num_rbgs,
            ucm_len: cfg.ucm_len,
            ucm_vocab: cfg.ucm_vocab,
            dpdu_bits: cfg.dpdu_bits,
        }
    }

    fn ucm_width(&self) -> usize {
        self.ucm_len * (self.ucm_vocab + 1)
    }

    pub fn leader_dim(&self, num_ues: usize) -> usize {
        num_ues * (self.channel_states + self.ucm_width() + self.num_rbgs)
    }

    pub fn follower_dim(&self, num_ues: usize) -> usize {
        self.channel_states + 1 + 2 * self.num_rbgs + self.ucm_width() + num_ues
    }
}

fn one_hot<T: Real>(out: &mut Vec<T>, n: usize, k: Option<usize>) {
    out.extend((0..n).map(|i| if Some(i) == k { T::one() } else { T::zero() }));
}

fn push_ucm<T: Real>(out: &mut Vec<T>, sh: &FeatureShape, ucm: Option<&[usize]>) {
    for k in 0..sh.ucm_len {
        // Slot 0 marks a missing symbol.
        one_hot(out, sh.ucm_vocab + 1, Some(ucm.map_or(0, |u| u[k] + 1)));
    }
}

fn push_bits<T: Real>(out: &mut Vec<T>, sh: &FeatureShape, b: Option<&Bitmap>) {
    for m in 0..sh.num_rbgs {
        out.push(if b.is_some_and(|b| b.get(m)) { T::one() } else { T::zero() });
    }
}

/// Per UE: one-hot CSI, last UCM, last DCM bits; UE-major.
pub fn leader_features<T: Real>(obs: &LeaderObs, sh: &FeatureShape) -> Vec<T> {
    let mut out = Vec::with_capacity(sh.leader_dim(obs.num_ues()));
    for i in 0..obs.num_ues() {
        one_hot(&mut out, sh.channel_states, Some(obs.csi[i]));
        push_ucm(&mut out, sh, obs.ucm[i].as_deref());
        push_bits(&mut out, sh, obs.dcm[i].as_ref());
    }
    out
}

/// One-hot channel, buffer fill, last bitmap, last UCM, current DCM bits and
/// a one-hot UE index over `num_ues` slots.
pub fn follower_features<T: Real>(obs: &FollowerObs, num_ues: usize, sh: &FeatureShape) -> Vec<T> {
    let mut out = Vec::with_capacity(sh.follower_dim(num_ues));
    one_hot(&mut out, sh.channel_states, Some(obs.channel));
    let dpdus = (obs.buffer_bits / sh.dpdu_bits.max(1)).min(BUFFER_BUCKETS as u64);
    out.push(T::of(dpdus as f64 / BUFFER_BUCKETS as f64));
    push_bits(&mut out, sh, obs.last_action.as_ref().map(|a| &a.bitmap));
    push_ucm(&mut out, sh, obs.last_action.as_ref().map(|a| a.ucm.as_slice()));
    push_bits(&mut out, sh, obs.dcm_bits.as_ref());
    one_hot(&mut out, num_ues, Some(obs.ue));
    out
}

/// An actor-critic pair whose input width is fixed at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MappoNet<T: Real> {
    pub role: Role,
    /// UE count the input layer was sized for.
    pub num_ues: usize,
    pub shape: FeatureShape,
    /// Options per action head.
    pub heads: Vec<usize>,
    pub adapter: bool,
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
}

/// One decision of a [`MappoNet`].
#[derive(Clone, Debug)]
pub struct MappoDecision<T> {
    pub action: Vec<usize>,
    pub logprob: T,
    pub dists: Vec<Vec<T>>,
    pub value: T,
}

impl<T: Real> MappoNet<T> {
    pub fn new(role: Role, env: &EnvConfig, num_ues: usize, cfg: &MappoConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::config("mappo.hidden", "must be >= 1"));
        }
        let shape = FeatureShape::from_env(env);
        let (dim, heads) = match role {
            Role::Leader => (shape.leader_dim(num_ues), vec![num_ues + 1; shape.num_rbgs]),
            Role::Follower => {
                let mut h = vec![2; shape.num_rbgs];
                h.extend(std::iter::repeat_n(shape.ucm_vocab, shape.ucm_len));
                (shape.follower_dim(num_ues), h)
            }
        };
        let outs: usize = heads.iter().sum();
        Ok(Self {
            role,
            num_ues,
            actor: Mlp::init(&[dim, cfg.hidden, cfg.hidden, outs], 0.01, rng),
            critic: Mlp::init(&[dim, cfg.hidden, 1], 1.0, rng),
            heads,
            adapter: cfg.adapter,
            shape,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// Checks the observation width. With the adapter on, a mismatched
    /// vector is zero-padded or truncated and the second value is `true`.
    pub fn fit(&self, mut x: Vec<T>) -> Result<(Vec<T>, bool)> {
        let d = self.input_dim();
        if x.len() == d {
            return Ok((x, false));
        }
        if !self.adapter {
            return Err(Error::ArchitectureRigidity {
                expected: d,
                got: x.len(),
                built_for: self.num_ues,
            });
        }
        x.resize(d, T::zero());
        Ok((x, true))
    }

    fn features(&self, env: &EnvState, fobs: Option<&FollowerObs>) -> Vec<T> {
        match fobs {
            None => leader_features(&env.leader_obs(), &self.shape),
            Some(o) => follower_features(o, env.num_ues(), &self.shape),
        }
    }

    fn masks(&self, i_t: usize) -> Vec<Vec<usize>> {
        self.heads
            .iter()
            .map(|&n| match self.role {
                Role::Leader => (0..n.min(i_t + 1)).collect(),
                Role::Follower => (0..n).collect(),
            })
            .collect()
    }

    fn head_logits<'a>(&self, acts: &'a [Vec<T>], h: usize) -> &'a [T] {
        let out = acts.last().expect("output layer");
        let start: usize = self.heads[..h].iter().sum();
        &out[start..start + self.heads[h]]
    }

    fn decide(&self, x: &[T], i_t: usize, temperature: T, mut pick: impl FnMut(&[T], &[T]) -> usize) -> MappoDecision<T> {
        let acts = self.actor.forward(x);
        let mut action = Vec::with_capacity(self.heads.len());
        let mut dists = Vec::with_capacity(self.heads.len());
        let mut logprob = T::zero();
        for (h, mask) in self.masks(i_t).into_iter().enumerate() {
            let all = self.head_logits(&acts, h);
            let z: Vec<T> = mask.iter().map(|&k| all[k]).collect();
            let (p, logp) = masked_softmax(&z, temperature);
            let k = pick(&z, &p);
            action.push(mask[k]);
            logprob += logp[k];
            dists.push(p);
        }
        MappoDecision {
            action,
            logprob,
            dists,
            value: self.value(x),
        }
    }

    pub fn act(&self, x: &[T], i_t: usize, temperature: T, rng: &mut Rng) -> MappoDecision<T> {
        self.decide(x, i_t, temperature, |_, p| sample(p, rng))
    }

    pub fn act_greedy(&self, x: &[T], i_t: usize) -> MappoDecision<T> {
        self.decide(x, i_t, T::one(), |z, _| {
            let mut best = 0;
            for (k, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = k;
                }
            }
            best
        })
    }

    pub fn value(&self, x: &[T]) -> T {
        self.critic.forward(x).last().expect("output layer")[0]
    }

    /// Distributions at every head for a stored action, plus the actor's
    /// activations for backpropagation.
    pub fn score(&self, x: &[T], action: &[usize], i_t: usize, temperature: T) -> Result<(Vec<PosDist<T>>, Vec<Vec<T>>)> {
        let acts = self.actor.forward(x);
        let pos = self
            .masks(i_t)
            .into_iter()
            .enumerate()
            .map(|(h, mask)| {
                let chosen = mask
                    .iter()
                    .position(|&k| k == action[h])
                    .ok_or_else(|| Error::Contract(format!("option {} at head {h} is masked out", action[h])))?;
                let all = self.head_logits(&acts, h);
                let z: Vec<T> = mask.iter().map(|&k| all[k]).collect();
                let (p, logp) = masked_softmax(&z, temperature);
                Ok(PosDist { mask, chosen, p, logp })
            })
            .collect::<Result<_>>()?;
        Ok((pos, acts))
    }
}

fn sample<T: Real>(p: &[T], rng: &mut Rng) -> usize {
    use rand::Rng as _;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &v) in p.iter().enumerate() {
        acc += v.to_f64_lossy();
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// Mean surrogate over a MAPPO batch, through the same per-sample terms as
/// the token trainer.
pub fn mappo_objective<T: Real, B: Borrow<Transition<T, Vec<T>>>>(net: &MappoNet<T>, batch: &[B], c: &PpoCoeffs) -> Result<T> {
    check_batch(batch)?;
    let mut total = T::zero();
    for tr in batch.iter().map(|b| b.borrow()) {
        let (pos, _) = net.score(&tr.obs, &tr.action, tr.num_ues, tr.temperature)?;
        total += surrogate_terms(&pos, tr, c, None).0.objective(c);
    }
    Ok(total / T::of_usize(batch.len()))
}

pub fn mappo_critic_loss<T: Real, B: Borrow<Transition<T, Vec<T>>>>(net: &MappoNet<T>, batch: &[B]) -> Result<T> {
    check_batch(batch)?;
    let mut total = T::zero();
    for tr in batch.iter().map(|b| b.borrow()) {
        let d = net.value(&tr.obs) - tr.ret;
        total += d * d;
    }
    Ok(total / T::of_usize(batch.len()))
}

/// Actor gradient of the surrogate (ascent) and critic gradient of the
/// squared error (descent), batch means.
pub fn mappo_batch_gradients<T: Real, B: Borrow<Transition<T, Vec<T>>>>(net: &MappoNet<T>, batch: &[B], c: &PpoCoeffs, actor_grads: &mut [T], critic_grads: &mut [T]) -> Result<BatchStats> {
    check_batch(batch)?;
    let n = T::of_usize(batch.len());
    let outs = net.actor.output_dim();
    let mut st = BatchStats::default();
    for tr in batch.iter().map(|b| b.borrow()) {
        let (pos, acts) = net.score(&tr.obs, &tr.action, tr.num_ues, tr.temperature)?;
        let (terms, seeds) = surrogate_terms(&pos, tr, c, Some(T::one() / n));
        let mut dout = vec![T::zero(); outs];
        let mut start = 0;
        for (h, (g, d)) in seeds.iter().zip(&pos).enumerate() {
            for (&k, &v) in d.mask.iter().zip(g) {
                dout[start + k] += v;
            }
            start += net.heads[h];
        }
        net.actor.backward(&acts, &dout, actor_grads);
        let cacts = net.critic.forward(&tr.obs);
        let v = cacts.last().expect("output layer")[0];
        net.critic.backward(&cacts, &[T::of(2.0) * (v - tr.ret) / n], critic_grads);
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

/// Leader and follower networks of one MAPPO run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MappoAgents<T: Real> {
    pub mode: MappoMode,
    pub leader: MappoNet<T>,
    pub follower: MappoNet<T>,
}

impl<T: Real> MappoAgents<T> {
    pub fn new(mode: MappoMode, env: &EnvConfig, num_ues: usize, cfg: &MappoConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, Stream::Params, 2);
        Ok(Self {
            mode,
            leader: MappoNet::new(Role::Leader, env, num_ues, cfg, &mut r)?,
            follower: MappoNet::new(Role::Follower, env, num_ues, cfg, &mut r)?,
        })
    }

    pub fn num_ues(&self) -> usize {
        self.leader.num_ues
    }

    pub fn set_adapter(&mut self, on: bool) {
        self.leader.adapter = on;
        self.follower.adapter = on;
    }
}

/// Transitions and outcome of one MAPPO episode.
pub struct MappoEpisode<T> {
    pub num_ues: usize,
    pub leader: Vec<Transition<T, Vec<T>>>,
    pub followers: Vec<Vec<Transition<T, Vec<T>>>>,
    pub kpis: crate::metrics::Kpis,
}

fn record<T: Real>(x: Vec<T>, d: MappoDecision<T>, i_t: usize, temperature: T) -> Transition<T, Vec<T>> {
    Transition {
        obs: x,
        action: d.action,
        num_ues: i_t,
        temperature,
        reward: T::zero(),
        logprob: d.logprob,
        value: d.value,
        advantage: T::zero(),
        ret: T::zero(),
        old_dists: d.dists,
        finished: false,
    }
}

fn ue_action(d: &[usize], m: usize) -> UeAction {
    UeAction {
        bitmap: Bitmap(d[..m].iter().map(|&b| b == 1).collect()),
        ucm: d[m..].to_vec(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn collect_mappo_episode<T: Real>(agents: &MappoAgents<T>, env_cfg: &EnvConfig, weights: &UtilityWeights, train: &TrainConfig, seed: u64, index: u64, temperature: f64) -> Result<MappoEpisode<T>> {
    let i_t = sample_num_ues(env_cfg, &mut rng::stream(seed, Stream::UeCount, index));
    let mut env = EnvState::new(env_cfg, weights, i_t, rng::derive_seed(seed, &[100, index]))?;
    let mut r = rng::stream(seed, Stream::Baseline, index);
    let scale = RewardScale::new(train, env_cfg, weights);
    let temp = T::of(temperature);
    let mut kpis = EpisodeKpis::new(i_t, env_cfg.num_rbgs);
    let mut lead = Vec::new();
    let mut foll: Vec<Vec<Transition<T, Vec<T>>>> = vec![Vec::new(); i_t];
    while !env.done() {
        let (x, _) = agents.leader.fit(agents.leader.features(&env, None))?;
        let d = agents.leader.act(&x, i_t, temp, &mut r);
        let dcm = d.action.clone();
        lead.push(record(x, d, i_t, temp));
        let mut actions = Vec::with_capacity(i_t);
        for (i, o) in env.follower_obs_for(&dcm)?.iter().enumerate() {
            let (x, _) = agents.follower.fit(agents.follower.features(&env, Some(o)))?;
            let d = agents.follower.act(&x, i_t, temp, &mut r);
            actions.push(ue_action(&d.action, env_cfg.num_rbgs));
            foll[i].push(record(x, d, i_t, temp));
        }
        let res = env.step(&dcm, &actions)?;
        kpis.record(&res, &env.bs().usage);
        lead.last_mut().expect("pushed above").reward = T::of(res.leader_reward / scale.leader);
        for (traj, r) in foll.iter_mut().zip(&res.follower_rewards) {
            traj.last_mut().expect("pushed above").reward = T::of(r / scale.follower);
        }
    }
    finish_trajectory(&mut lead, train.gamma, train.lambda)?;
    for t in &mut foll {
        finish_trajectory(t, train.gamma, train.lambda)?;
    }
    Ok(MappoEpisode {
        num_ues: i_t,
        leader: lead,
        followers: foll,
        kpis: kpis.report(env_cfg),
    })
}

struct NetOpt<T> {
    actor: Optimizer<T>,
    critic: Optimizer<T>,
}

#[allow(clippy::too_many_arguments)]
fn update_net<T: Real>(net: &mut MappoNet<T>, opt: &mut NetOpt<T>, buffer: &mut [Transition<T, Vec<T>>], cfg: &TrainConfig, actor_lr: f64, critic_lr: f64, rng: &mut Rng, what: &str, epoch: usize) -> Result<RoleUpdate> {
    if cfg.normalize_advantages {
        normalize_advantages(buffer);
    }
    let c = cfg.coeffs();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut ga = vec![T::zero(); net.actor.num_params()];
    let mut gc = vec![T::zero(); net.critic.num_params()];
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
            let mb: Vec<&Transition<T, Vec<T>>> = chunk.iter().map(|&i| &buffer[i]).collect();
            ga.iter_mut().chain(gc.iter_mut()).for_each(|g| *g = T::zero());
            let st = mappo_batch_gradients(net, &mb, &c, &mut ga, &mut gc)?;
            if !(st.objective.is_finite() && st.critic_loss.is_finite()) || !ga.iter().chain(&gc).all(|g| g.is_finite()) {
                return Err(Error::NonFinite { what: format!("{what} loss"), epoch });
            }
            let (na, nc) = (ga.len(), gc.len());
            out.actor_grad_norm += clip_grad_norm(&mut ga, 0..na, cfg.max_grad_norm);
            out.critic_grad_norm += clip_grad_norm(&mut gc, 0..nc, cfg.max_grad_norm);
            opt.actor.step(&mut net.actor.data, &ga, actor_lr, Direction::Ascend, 0..na);
            opt.critic.step(&mut net.critic.data, &gc, critic_lr, Direction::Descend, 0..nc);
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

/// Trains MAPPO agents at a fixed UE count with the token trainer's
/// schedule, buffer discipline and loss code.
pub fn train_mappo<T: Real>(setup: &TrainSetup, cfg: &MappoConfig, mode: MappoMode, num_ues: usize, seed: u64) -> Result<(MappoAgents<T>, Vec<EpochRecord>)> {
    setup.validate()?;
    let mut env = setup.env.clone();
    env.num_ues = vec![num_ues];
    env.num_ues_weights = vec![];
    env.validate()?;
    let t = &setup.train;
    let mut agents = MappoAgents::<T>::new(mode, &env, num_ues, cfg, seed)?;
    let mk = |n: &MappoNet<T>| NetOpt {
        actor: Optimizer::new(t.optimizer, n.actor.num_params()),
        critic: Optimizer::new(t.optimizer, n.critic.num_params()),
    };
    let (mut lo, mut fo) = (mk(&agents.leader), mk(&agents.follower));
    let total = t.max_epochs.div_ceil(t.buffer_episodes);
    let mut log = Vec::with_capacity(t.max_epochs);
    let mut lead_buf = Vec::new();
    let mut foll_buf = Vec::new();
    let mut held = 0;
    let mut updates = 0;
    for e in 0..t.max_epochs {
        let temp = temperature_at(e, t);
        let ep = collect_mappo_episode(&agents, &env, &setup.game, t, seed, e as u64, temp)?;
        lead_buf.extend(ep.leader);
        foll_buf.extend(ep.followers.into_iter().flatten());
        held += 1;
        let mut update = None;
        if held == t.buffer_episodes {
            let rate = |b: f64| cosine_rate(b, t.lr_floor, updates, total);
            let mut u = UpdateStats {
                update: updates,
                ..UpdateStats::default()
            };
            if !t.freeze_leader {
                let mut r = rng::stream(seed, Stream::Shuffle, 2 * updates as u64);
                u.leader = Some(update_net(&mut agents.leader, &mut lo, &mut lead_buf, t, rate(t.actor_lr), rate(t.critic_lr), &mut r, "leader", e)?);
            }
            if !t.freeze_followers {
                let mut r = rng::stream(seed, Stream::Shuffle, 2 * updates as u64 + 1);
                u.follower = Some(update_net(&mut agents.follower, &mut fo, &mut foll_buf, t, rate(t.follower_lr()), rate(t.critic_lr), &mut r, "follower", e)?);
            }
            lead_buf.clear();
            foll_buf.clear();
            held = 0;
            updates += 1;
            update = Some(u);
        }
        log.push(EpochRecord {
            epoch: e,
            num_ues: ep.num_ues,
            temperature: temp,
            leader_utility: ep.kpis.leader_utility,
            follower_utility: ep.kpis.follower_utility,
            kpis: ep.kpis,
            update,
            wall_s: None,
        });
    }
    Ok((agents, log))
}

/// Evaluation wrapper; records whether the adapter ever reshaped an input.
#[derive(Clone, Debug)]
pub struct MappoController<T: Real> {
    pub agents: MappoAgents<T>,
    pub decoding: Decoding,
    pub label: String,
    adapted: bool,
}

impl<T: Real> MappoController<T> {
    pub fn new(agents: MappoAgents<T>, decoding: Decoding) -> Self {
        let label = match agents.mode {
            MappoMode::S => "mappo-s",
            MappoMode::G => "mappo-g",
        };
        Self {
            agents,
            decoding,
            label: label.into(),
            adapted: false,
        }
    }

    fn decide(&self, net: &MappoNet<T>, x: &[T], i_t: usize, rng: &mut Rng) -> Vec<usize> {
        match self.decoding {
            Decoding::Greedy => net.act_greedy(x, i_t).action,
            Decoding::Sampled { temperature } => net.act(x, i_t, T::of(temperature), rng).action,
        }
    }
}

impl<T: Real> Controller for MappoController<T> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, env: &EnvState) -> Result<()> {
        if self.agents.leader.shape != FeatureShape::from_env(env.config()) {
            return Err(Error::Contract("MAPPO network built for a different RBG or UCM layout".into()));
        }
        Ok(())
    }

    fn leader(&mut self, env: &EnvState, rng: &mut Rng) -> Result<Vec<usize>> {
        let (x, a) = self.agents.leader.fit(self.agents.leader.features(env, None))?;
        self.adapted |= a;
        Ok(self.decide(&self.agents.leader, &x, env.num_ues(), rng))
    }

    fn followers(&mut self, env: &EnvState, dcm: &[usize], rng: &mut Rng) -> Result<Vec<UeAction>> {
        let m = env.num_rbgs();
        let mut out = Vec::with_capacity(env.num_ues());
        for o in env.follower_obs_for(dcm)? {
            let (x, a) = self.agents.follower.fit(self.agents.follower.features(env, Some(&o)))?;
            self.adapted |= a;
            out.push(ue_action(&self.decide(&self.agents.follower, &x, env.num_ues(), rng), m));
        }
        Ok(out)
    }

    fn adapted(&self) -> bool {
        self.adapted
    }
}
