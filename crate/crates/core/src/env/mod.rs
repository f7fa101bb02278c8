//! Seeded slotted-uplink simulator: Bernoulli traffic, FIFO buffers with ARQ,
//! Markov channels seen through noisy BS-side CSI, and per-RBG contention.

mod channel;
mod config;
mod trace;

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use channel::{estimate, period_ttis, sample_index, stationary, transition};
pub use config::EnvConfig;
pub use trace::{read_trace, write_trace, TraceHeader, TraceRecord, TRACE_SCHEMA, TRACE_VERSION};

use crate::error::{Error, Result};
use crate::game::{self, Bitmap, UtilityWeights};
use crate::rng::{self, Rng, Stream};

/// One buffered data PDU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dpdu {
    /// Arrival order within the UE, starting at 0.
    pub seq: u64,
    pub bits: u64,
}

/// A follower's joint action for one TTI.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UeAction {
    pub bitmap: Bitmap,
    pub ucm: Vec<usize>,
}

impl UeAction {
    pub fn idle(m: usize, k: usize) -> Self {
        Self {
            bitmap: Bitmap::zeros(m),
            ucm: vec![0; k],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeLocalState {
    pub buffer: VecDeque<Dpdu>,
    pub occupancy_bits: u64,
    /// True channel state index.
    pub channel: usize,
    /// TTIs between channel transitions.
    pub change_period: usize,
    /// TTIs since the last transition.
    pub phase: usize,
    pub arrival_prob: f64,
    pub next_seq: u64,
    pub last_action: Option<UeAction>,
    pub last_dcm_bits: Option<Bitmap>,
}

impl UeLocalState {
    pub fn buffered_dpdus(&self) -> usize {
        self.buffer.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsState {
    pub csi: Vec<usize>,
    pub ucm_history: Vec<Option<Vec<usize>>>,
    pub dcm_history: Vec<Option<Bitmap>>,
    /// Cumulative RBG usage `x` per UE.
    pub usage: Vec<u64>,
}

/// Running totals used by the conservation check.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub arrived_bits: u64,
    pub delivered_bits: u64,
    pub dropped_bits: u64,
    pub dropped_dpdus: u64,
}

/// What the BS sees before choosing a DCM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderObs {
    pub csi: Vec<usize>,
    pub ucm: Vec<Option<Vec<usize>>>,
    pub dcm: Vec<Option<Bitmap>>,
}

impl LeaderObs {
    pub fn num_ues(&self) -> usize {
        self.csi.len()
    }
}

/// What UE `ue` sees. `dcm_bits` holds the previous TTI's indicator until
/// [`EnvState::follower_obs_for`] fills in the current one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FollowerObs {
    /// 0-based UE index.
    pub ue: usize,
    pub channel: usize,
    pub buffer_bits: u64,
    pub last_action: Option<UeAction>,
    pub dcm_bits: Option<Bitmap>,
}

/// Outcome of contention on one TTI, before buffers are touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub received: Vec<usize>,
    pub attempted: Vec<usize>,
    /// Transmitters per RBG.
    pub collision_map: Vec<usize>,
    /// dPDUs delivered on each RBG.
    pub delivered_per_rbg: Vec<usize>,
    /// Buffer positions (from the head) delivered, per UE, ascending.
    pub delivered_positions: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    /// TTI index this result belongs to.
    pub t: usize,
    pub received: Vec<usize>,
    pub attempted: Vec<usize>,
    pub collision_map: Vec<usize>,
    pub delivered_per_rbg: Vec<usize>,
    pub consistency: Vec<f64>,
    pub leader_reward: f64,
    pub follower_rewards: Vec<f64>,
    pub arrived: Vec<bool>,
    pub dropped: Vec<bool>,
    pub leader_obs: LeaderObs,
    pub follower_obs: Vec<FollowerObs>,
    pub done: bool,
}

struct Streams {
    arrivals: Rng,
    channel: Rng,
    csi: Rng,
    erasure: Rng,
}

/// Full simulator state for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    cfg: EnvConfig,
    weights: UtilityWeights,
    seed: u64,
    t: usize,
    ues: Vec<UeLocalState>,
    bs: BsState,
    totals: Totals,
    arrivals_rng: Rng,
    channel_rng: Rng,
    csi_rng: Rng,
    erasure_rng: Rng,
}

impl EnvState {
    /// Fresh episode with `num_ues` UEs: empty buffers, stationary channels,
    /// zero usage and null histories.
    pub fn new(cfg: &EnvConfig, weights: &UtilityWeights, num_ues: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if !cfg.num_ues.contains(&num_ues) {
            return Err(Error::config(
                "env.num_ues",
                format!("I = {num_ues} not among admissible counts {:?}", cfg.num_ues),
            ));
        }
        let mut init = rng::stream(seed, Stream::Init, 0);
        let pi = stationary(&cfg.channel_transition);
        let ues: Vec<UeLocalState> = (0..num_ues)
            .map(|i| {
                let channel = match cfg.initial_channel_state {
                    Some(s) => s,
                    None => sample_index(&pi, &mut init),
                };
                let change_period = match cfg.channel_change_period_tti {
                    Some(p) => p,
                    None => {
                        let [lo, hi] = cfg.channel_change_ms;
                        let ms = if hi > lo { init.gen_range(lo..=hi) } else { lo };
                        period_ttis(ms, cfg.tti_duration_s)
                    }
                };
                UeLocalState {
                    buffer: VecDeque::new(),
                    occupancy_bits: 0,
                    channel,
                    change_period,
                    phase: 0,
                    arrival_prob: cfg.arrival_prob(i),
                    next_seq: 0,
                    last_action: None,
                    last_dcm_bits: None,
                }
            })
            .collect();
        let streams = Streams {
            arrivals: rng::stream(seed, Stream::Arrivals, 0),
            channel: rng::stream(seed, Stream::Channel, 0),
            csi: rng::stream(seed, Stream::Csi, 0),
            erasure: rng::stream(seed, Stream::Erasure, 0),
        };
        let mut env = Self {
            cfg: cfg.clone(),
            weights: weights.clone(),
            seed,
            t: 0,
            bs: BsState {
                csi: vec![0; num_ues],
                ucm_history: vec![None; num_ues],
                dcm_history: vec![None; num_ues],
                usage: vec![0; num_ues],
            },
            ues,
            totals: Totals::default(),
            arrivals_rng: streams.arrivals,
            channel_rng: streams.channel,
            csi_rng: streams.csi,
            erasure_rng: streams.erasure,
        };
        env.estimate_csi();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &UtilityWeights {
        &self.weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_ues(&self) -> usize {
        self.ues.len()
    }

    pub fn num_rbgs(&self) -> usize {
        self.cfg.num_rbgs
    }

    /// TTIs elapsed in this episode.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.cfg.episode_len
    }

    pub fn ues(&self) -> &[UeLocalState] {
        &self.ues
    }

    pub fn bs(&self) -> &BsState {
        &self.bs
    }

    pub fn totals(&self) -> &Totals {
        &self.totals
    }

    /// Spectral efficiency of UE `ue`'s current true channel.
    pub fn nu(&self, ue: usize) -> f64 {
        self.cfg.spectral_efficiency[self.ues[ue].channel]
    }

    /// Bernoulli arrivals; a dPDU that would overflow the buffer is dropped.
    pub fn sample_arrivals(&mut self) -> (Vec<bool>, Vec<bool>) {
        let bits = self.cfg.dpdu_bits;
        let mut arrived = vec![false; self.ues.len()];
        let mut dropped = vec![false; self.ues.len()];
        for (i, ue) in self.ues.iter_mut().enumerate() {
            let u: f64 = self.arrivals_rng.gen();
            if u >= ue.arrival_prob {
                continue;
            }
            arrived[i] = true;
            self.totals.arrived_bits += bits;
            let fits = self
                .cfg
                .buffer_cap_bits
                .map_or(true, |cap| ue.occupancy_bits + bits <= cap);
            if fits {
                ue.buffer.push_back(Dpdu { seq: ue.next_seq, bits });
                ue.occupancy_bits += bits;
            } else {
                dropped[i] = true;
                self.totals.dropped_bits += bits;
                self.totals.dropped_dpdus += 1;
            }
            ue.next_seq += 1;
        }
        (arrived, dropped)
    }

    /// Advances every UE's channel clock and transitions when a period ends.
    pub fn evolve_channels(&mut self) {
        for ue in &mut self.ues {
            ue.phase += 1;
            if ue.phase >= ue.change_period {
                ue.phase = 0;
                ue.channel = transition(&self.cfg.channel_transition, ue.channel, &mut self.channel_rng);
            }
        }
    }

    /// Refreshes the BS's CSI estimates from the true channels.
    pub fn estimate_csi(&mut self) {
        let n = self.cfg.num_channel_states();
        for (est, ue) in self.bs.csi.iter_mut().zip(&self.ues) {
            *est = estimate(ue.channel, n, self.cfg.csi_error_prob, &mut self.csi_rng);
        }
    }

    pub fn leader_obs(&self) -> LeaderObs {
        LeaderObs {
            csi: self.bs.csi.clone(),
            ucm: self.bs.ucm_history.clone(),
            dcm: self.bs.dcm_history.clone(),
        }
    }

    /// Follower observations carrying the previous TTI's DCM bits.
    pub fn follower_obs(&self) -> Vec<FollowerObs> {
        self.ues
            .iter()
            .enumerate()
            .map(|(i, ue)| FollowerObs {
                ue: i,
                channel: ue.channel,
                buffer_bits: ue.occupancy_bits,
                last_action: ue.last_action.clone(),
                dcm_bits: ue.last_dcm_bits.clone(),
            })
            .collect()
    }

    /// Follower observations once the leader has announced `dcm`.
    pub fn follower_obs_for(&self, dcm: &[usize]) -> Result<Vec<FollowerObs>> {
        self.check_dcm(dcm)?;
        let i_t = self.num_ues();
        let mut obs = self.follower_obs();
        for o in &mut obs {
            o.dcm_bits = Some(game::dcm_bits_for_ue(dcm, o.ue + 1, i_t)?);
        }
        Ok(obs)
    }

    pub fn build_observations(&self) -> (LeaderObs, Vec<FollowerObs>) {
        (self.leader_obs(), self.follower_obs())
    }

    fn check_dcm(&self, dcm: &[usize]) -> Result<()> {
        if dcm.len() != self.cfg.num_rbgs {
            return Err(Error::Protocol(format!(
                "DCM has {} tokens, expected M = {}",
                dcm.len(),
                self.cfg.num_rbgs
            )));
        }
        if let Some(&bad) = dcm.iter().find(|&&t| t > self.num_ues()) {
            return Err(Error::Protocol(format!(
                "DCM token {bad} outside 0..={}",
                self.num_ues()
            )));
        }
        Ok(())
    }

    fn check_actions(&self, actions: &[UeAction]) -> Result<()> {
        if actions.len() != self.num_ues() {
            return Err(Error::Protocol(format!(
                "{} UE actions for {} active UEs",
                actions.len(),
                self.num_ues()
            )));
        }
        for (i, a) in actions.iter().enumerate() {
            if a.bitmap.len() != self.cfg.num_rbgs {
                return Err(Error::Protocol(format!(
                    "UE {i} bitmap has {} bits, expected {}",
                    a.bitmap.len(),
                    self.cfg.num_rbgs
                )));
            }
            if a.ucm.len() != self.cfg.ucm_len || a.ucm.iter().any(|&u| u >= self.cfg.ucm_vocab) {
                return Err(Error::Protocol(format!("UE {i} UCM {:?} is malformed", a.ucm)));
            }
        }
        Ok(())
    }

    /// Removes delivered dPDUs; everything else keeps its FIFO position.
    pub fn apply_arq(&mut self, res: &Resolution) {
        for (ue, positions) in self.ues.iter_mut().zip(&res.delivered_positions) {
            if positions.is_empty() {
                continue;
            }
            let mut k = 0;
            let mut idx = 0;
            let mut freed = 0;
            ue.buffer.retain(|d| {
                let keep = !(k < positions.len() && positions[k] == idx);
                if !keep {
                    k += 1;
                    freed += d.bits;
                }
                idx += 1;
                keep
            });
            ue.occupancy_bits -= freed;
            self.totals.delivered_bits += freed;
        }
    }

    /// One TTI of the leader-first loop.
    pub fn step(&mut self, dcm: &[usize], actions: &[UeAction]) -> Result<StepResult> {
        if self.done() {
            return Err(Error::Protocol(format!(
                "episode already finished after {} TTIs",
                self.t
            )));
        }
        self.check_dcm(dcm)?;
        self.check_actions(actions)?;
        let i_t = self.num_ues();

        let dcm_bits: Vec<Bitmap> = (1..=i_t)
            .map(|i| game::dcm_bits_for_ue(dcm, i, i_t))
            .collect::<Result<_>>()?;

        let bitmaps: Vec<Bitmap> = actions.iter().map(|a| a.bitmap.clone()).collect();
        let res = resolve_transmissions(&bitmaps, &self.ues, &mut self.erasure_rng, &self.cfg);
        for (x, b) in self.bs.usage.iter_mut().zip(&bitmaps) {
            *x += b.popcount() as u64;
        }
        self.apply_arq(&res);

        let consistency: Vec<f64> = bitmaps
            .iter()
            .zip(&dcm_bits)
            .map(|(b, d)| game::consistency(b, d))
            .collect::<Result<_>>()?;
        let follower_rewards: Vec<f64> = (0..i_t)
            .map(|i| game::follower_utility(res.received[i], res.attempted[i], consistency[i], &self.weights))
            .collect();
        let rec: Vec<f64> = res.received.iter().map(|&r| r as f64).collect();
        let usage: Vec<f64> = self.bs.usage.iter().map(|&x| x as f64).collect();
        let leader_reward = game::leader_utility(&rec, &usage, &self.weights)?;

        for (i, ue) in self.ues.iter_mut().enumerate() {
            ue.last_action = Some(actions[i].clone());
            ue.last_dcm_bits = Some(dcm_bits[i].clone());
        }
        self.bs.ucm_history = actions.iter().map(|a| Some(a.ucm.clone())).collect();
        self.bs.dcm_history = dcm_bits.into_iter().map(Some).collect();

        let (arrived, dropped) = self.sample_arrivals();
        self.evolve_channels();
        self.estimate_csi();

        let t = self.t;
        self.t += 1;
        let (leader_obs, follower_obs) = self.build_observations();
        Ok(StepResult {
            t,
            received: res.received,
            attempted: res.attempted,
            collision_map: res.collision_map,
            delivered_per_rbg: res.delivered_per_rbg,
            consistency,
            leader_reward,
            follower_rewards,
            arrived,
            dropped,
            leader_obs,
            follower_obs,
            done: self.done(),
        })
    }

    /// A trace line describing `res` and the post-step state.
    pub fn trace_record(&self, dcm: &[usize], actions: &[UeAction], res: &StepResult) -> TraceRecord {
        TraceRecord {
            t: res.t,
            dcm: dcm.to_vec(),
            bitmaps: actions.iter().map(|a| a.bitmap.to_string()).collect(),
            ucm: actions.iter().map(|a| a.ucm.clone()).collect(),
            received: res.received.clone(),
            attempted: res.attempted.clone(),
            collision_map: res.collision_map.clone(),
            leader_reward: res.leader_reward,
            follower_rewards: res.follower_rewards.clone(),
            arrived: res.arrived.clone(),
            dropped: res.dropped.clone(),
            buffer_bits: self.ues.iter().map(|u| u.occupancy_bits).collect(),
            channel: self.ues.iter().map(|u| u.channel).collect(),
            csi: self.bs.csi.clone(),
            usage: self.bs.usage.clone(),
        }
    }

    pub fn trace_header(&self) -> TraceHeader {
        TraceHeader::new(self.num_ues(), self.cfg.num_rbgs, self.cfg.episode_len, self.seed)
    }
}

/// `floor(popcount * N_rb_rbg * N_sc_rb * N_symbl_sh * nu)` bits.
pub fn compute_tbs(bitmap: &Bitmap, nu: f64, cfg: &EnvConfig) -> u64 {
    let re = (bitmap.popcount() as u64 * cfg.rbs_per_rbg * cfg.subcarriers_per_rb * cfg.symbols_per_slot) as f64;
    (re * nu).floor() as u64
}

/// Per-RBG contention. Each UE loads whole dPDUs head-of-line onto its
/// selected RBGs in ascending order; a lone transmitter's RBG delivers unless
/// erased, a shared RBG delivers nothing.
///
/// One erasure draw is consumed per (UE, RBG) pair regardless of the outcome,
/// so the stream stays aligned across policies and TBLER values.
pub fn resolve_transmissions(bitmaps: &[Bitmap], ues: &[UeLocalState], erasure_rng: &mut Rng, cfg: &EnvConfig) -> Resolution {
    let i_t = bitmaps.len();
    let m = cfg.num_rbgs;
    debug_assert_eq!(ues.len(), i_t);
    let collision_map: Vec<usize> = (0..m).map(|r| bitmaps.iter().filter(|b| b.get(r)).count()).collect();
    let mut received = vec![0; i_t];
    let mut attempted = vec![0; i_t];
    let mut delivered_per_rbg = vec![0; m];
    let mut delivered_positions = vec![Vec::new(); i_t];
    for i in 0..i_t {
        let per_rbg = cfg.rbg_capacity_dpdus(cfg.spectral_efficiency[ues[i].channel]) as usize;
        let mut next = 0;
        for r in 0..m {
            let erased = erasure_rng.gen::<f64>() < cfg.tbler;
            if !bitmaps[i].get(r) {
                continue;
            }
            let load = per_rbg.min(ues[i].buffer.len() - next);
            attempted[i] += load;
            if load > 0 && collision_map[r] == 1 && !erased {
                received[i] += load;
                delivered_per_rbg[r] += load;
                delivered_positions[i].extend(next..next + load);
            }
            next += load;
        }
    }
    Resolution {
        received,
        attempted,
        collision_map,
        delivered_per_rbg,
        delivered_positions,
    }
}

/// Draws a UE count from the configured episode distribution.
pub fn sample_num_ues(cfg: &EnvConfig, rng: &mut Rng) -> usize {
    cfg.num_ues[sample_index(&cfg.ue_count_probs(), rng)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> EnvConfig {
        EnvConfig {
            num_rbgs: 2,
            episode_len: 24,
            ..EnvConfig::default()
        }
    }

    fn env(c: &EnvConfig, i: usize, seed: u64) -> EnvState {
        EnvState::new(c, &UtilityWeights::default(), i, seed).unwrap()
    }

    fn ue_with(buffer: usize, channel: usize) -> UeLocalState {
        UeLocalState {
            buffer: (0..buffer as u64).map(|s| Dpdu { seq: s, bits: 256 }).collect(),
            occupancy_bits: 256 * buffer as u64,
            channel,
            change_period: 1,
            phase: 0,
            arrival_prob: 0.0,
            next_seq: buffer as u64,
            last_action: None,
            last_dcm_bits: None,
        }
    }

    #[test]
    fn init_contract() {
        let e = env(&EnvConfig::default(), 3, 7);
        assert_eq!(e.num_ues(), 3);
        assert!(e.ues().iter().all(|u| u.occupancy_bits == 0 && u.buffer.is_empty()));
        assert!(e.bs().usage.iter().all(|&x| x == 0));
        assert_eq!(e, env(&EnvConfig::default(), 3, 7));
        let (l, f) = e.build_observations();
        assert!(l.ucm.iter().all(Option::is_none) && l.dcm.iter().all(Option::is_none));
        assert!(f.iter().all(|o| o.last_action.is_none() && o.dcm_bits.is_none()));
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut c = EnvConfig::default();
        c.arrival_probs = vec![1.2];
        assert!(matches!(
            EnvState::new(&c, &UtilityWeights::default(), 3, 7),
            Err(Error::Config { .. })
        ));
        assert!(EnvState::new(&EnvConfig::default(), &UtilityWeights::default(), 7, 7).is_err());
    }

    #[test]
    fn tbs_examples() {
        let c = EnvConfig::default();
        assert_eq!(compute_tbs(&"00000".parse().unwrap(), 1.0, &c), 0);
        assert_eq!(compute_tbs(&"1".parse().unwrap(), 1.0, &c), 168);
        assert_eq!(compute_tbs(&"11".parse().unwrap(), 2.0, &c), 672);
    }

    #[test]
    fn two_ue_collision() {
        let mut c = cfg();
        c.num_rbgs = 1;
        let ues = vec![ue_with(3, 2), ue_with(3, 2)];
        let b: Vec<Bitmap> = vec!["1".parse().unwrap(), "1".parse().unwrap()];
        let r = resolve_transmissions(&b, &ues, &mut Rng::seed_from_u64(0), &c);
        assert_eq!(r.collision_map, vec![2]);
        assert_eq!(r.received, vec![0, 0]);
        assert_eq!(r.attempted, vec![2, 2]);
    }

    #[test]
    fn single_ue_delivery() {
        let mut c = cfg();
        c.tbler = 0.0;
        c.num_rbgs = 1;
        let r = resolve_transmissions(&["1".parse().unwrap()], &[ue_with(1, 1)], &mut Rng::seed_from_u64(0), &c);
        assert_eq!((r.received[0], r.attempted[0]), (1, 1));
    }

    #[test]
    fn arq_keeps_failed_in_order() {
        let mut c = cfg();
        c.num_ues = vec![1];
        c.arrival_probs = vec![0.0];
        let mut e = env(&c, 1, 1);
        e.ues[0] = ue_with(3, 2);
        e.totals.arrived_bits = 768;
        let res = Resolution {
            received: vec![2],
            attempted: vec![3],
            collision_map: vec![1, 1],
            delivered_per_rbg: vec![2, 0],
            delivered_positions: vec![vec![0, 2]],
        };
        e.apply_arq(&res);
        assert_eq!(e.ues[0].occupancy_bits, 256);
        assert_eq!(e.ues[0].buffer.iter().map(|d| d.seq).collect::<Vec<_>>(), vec![1]);
        let none = Resolution {
            delivered_positions: vec![vec![]],
            ..res
        };
        e.apply_arq(&none);
        assert_eq!(e.ues[0].occupancy_bits, 256);
    }

    #[test]
    fn exclusive_allocation_has_no_collisions() {
        let mut c = cfg();
        c.num_rbgs = 4;
        let mut e = env(&c, 3, 11);
        let dcm = vec![1; 4];
        let actions = vec![
            UeAction { bitmap: Bitmap::ones(4), ucm: vec![1, 2] },
            UeAction::idle(4, 2),
            UeAction::idle(4, 2),
        ];
        for _ in 0..10 {
            let r = e.step(&dcm, &actions).unwrap();
            assert!(r.collision_map.iter().all(|&n| n <= 1));
            assert_eq!(r.leader_obs.ucm[0], Some(vec![1, 2]));
        }
        assert_eq!(e.bs().usage, vec![40, 0, 0]);
    }

    #[test]
    fn step_rejects_mismatch() {
        let mut e = env(&cfg(), 3, 1);
        assert!(matches!(e.step(&[0, 0], &[UeAction::idle(2, 2)]), Err(Error::Protocol(_))));
        assert!(matches!(e.step(&[4, 0], &vec![UeAction::idle(2, 2); 3]), Err(Error::Protocol(_))));
        assert!(matches!(e.step(&[0], &vec![UeAction::idle(2, 2); 3]), Err(Error::Protocol(_))));
    }

    #[test]
    fn episode_ends() {
        let mut c = cfg();
        c.episode_len = 2;
        let mut e = env(&c, 3, 1);
        let a = vec![UeAction::idle(2, 2); 3];
        assert!(!e.step(&[0, 0], &a).unwrap().done);
        assert!(e.step(&[0, 0], &a).unwrap().done);
        assert!(e.step(&[0, 0], &a).is_err());
    }

    #[test]
    fn empty_buffer_transmission_counts_usage_only() {
        let mut c = cfg();
        c.arrival_probs = vec![0.0];
        let mut e = env(&c, 3, 2);
        let mut a = vec![UeAction::idle(2, 2); 3];
        a[0].bitmap = Bitmap::ones(2);
        let r = e.step(&[0, 0], &a).unwrap();
        assert_eq!(r.attempted, vec![0, 0, 0]);
        assert_eq!(e.bs().usage, vec![2, 0, 0]);
    }
}
