use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{EpisodeKpis, Kpis};
use crate::env::{EnvConfig, EnvState, StepResult, UeAction};
use crate::error::{Error, Result};
use crate::game::UtilityWeights;
use crate::policy::{Role, TokenPolicy};
use crate::rng::{self, Rng, Stream};
use crate::scalar::Real;

/// Anything that can drive one episode: a leader decision then one action per
/// UE each TTI.
pub trait Controller {
    fn name(&self) -> String;

    /// Called on a fresh environment before the first TTI.
    fn reset(&mut self, env: &EnvState) -> Result<()> {
        let _ = env;
        Ok(())
    }

    fn leader(&mut self, env: &EnvState, rng: &mut Rng) -> Result<Vec<usize>>;

    fn followers(&mut self, env: &EnvState, dcm: &[usize], rng: &mut Rng) -> Result<Vec<UeAction>>;

    fn observe(&mut self, res: &StepResult) {
        let _ = res;
    }

    /// True when observations were padded or truncated to fit the network.
    fn adapted(&self) -> bool {
        false
    }
}

/// How token policies pick actions during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Decoding {
    Greedy,
    Sampled { temperature: f64 },
}

/// Leader and follower token policies.
#[derive(Clone, Debug)]
pub struct TokenController<T> {
    pub leader: TokenPolicy<T>,
    pub follower: TokenPolicy<T>,
    pub decoding: Decoding,
    pub label: String,
}

impl<T: Real> TokenController<T> {
    pub fn new(leader: TokenPolicy<T>, follower: TokenPolicy<T>, decoding: Decoding) -> Self {
        Self {
            leader,
            follower,
            decoding,
            label: "token".into(),
        }
    }

    fn decode(&self, p: &TokenPolicy<T>, prompt: &crate::policy::PromptSeq, role: Role, i_t: usize, rng: &mut Rng) -> Result<crate::policy::ActionSeq<T>> {
        match self.decoding {
            Decoding::Greedy => p.greedy(prompt, role, i_t),
            Decoding::Sampled { temperature } => p.generate(prompt, role, i_t, T::of(temperature), rng),
        }
    }
}

pub(crate) fn check_schema<T: Real>(p: &TokenPolicy<T>, env: &EnvState) -> Result<()> {
    if p.schema.num_rbgs != env.num_rbgs() || p.schema.ucm_len != env.config().ucm_len {
        return Err(Error::Contract(format!(
            "policy emits {} RBG bits and {} UCM symbols, environment expects {} and {}",
            p.schema.num_rbgs,
            p.schema.ucm_len,
            env.num_rbgs(),
            env.config().ucm_len
        )));
    }
    Ok(())
}

impl<T: Real> Controller for TokenController<T> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, env: &EnvState) -> Result<()> {
        check_schema(&self.leader, env)?;
        check_schema(&self.follower, env)
    }

    fn leader(&mut self, env: &EnvState, rng: &mut Rng) -> Result<Vec<usize>> {
        let prompt = self.leader.schema.serialize_leader_obs(&env.leader_obs())?;
        let a = self.decode(&self.leader, &prompt, Role::Leader, env.num_ues(), rng)?;
        self.leader.decode_dcm(&a)
    }

    fn followers(&mut self, env: &EnvState, dcm: &[usize], rng: &mut Rng) -> Result<Vec<UeAction>> {
        env.follower_obs_for(dcm)?
            .iter()
            .map(|o| {
                let prompt = self.follower.schema.serialize_follower_obs(o)?;
                let a = self.decode(&self.follower, &prompt, Role::Follower, env.num_ues(), rng)?;
                self.follower.decode_ue_action(&a)
            })
            .collect()
    }
}

/// Result of one evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub kpis: Kpis,
    /// TTIs whose actions the environment accepted.
    pub valid_steps: usize,
    pub steps: usize,
}

/// Plays one episode on `env`. Actions the environment rejects end the
/// episode early and count as invalid.
pub fn run_episode(ctrl: &mut dyn Controller, env: &mut EnvState, rng: &mut Rng) -> Result<EpisodeReport> {
    ctrl.reset(env)?;
    let mut acc = EpisodeKpis::new(env.num_ues(), env.num_rbgs());
    let mut valid = 0;
    while !env.done() {
        let dcm = ctrl.leader(env, rng)?;
        let actions = ctrl.followers(env, &dcm, rng)?;
        match env.step(&dcm, &actions) {
            Ok(res) => {
                acc.record(&res, &env.bs().usage);
                ctrl.observe(&res);
                valid += 1;
            }
            Err(Error::Protocol(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(EpisodeReport {
        kpis: acc.report(env.config()),
        valid_steps: valid,
        steps: env.config().episode_len,
    })
}

/// One grid cell. Unset fields keep the base environment's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub num_ues: usize,
    #[serde(default)]
    pub arrival_prob: Option<f64>,
    #[serde(default)]
    pub num_rbgs: Option<usize>,
    #[serde(default)]
    pub tbler: Option<f64>,
}

impl Scenario {
    /// Base configuration specialised to this cell.
    pub fn apply(&self, base: &EnvConfig) -> Result<EnvConfig> {
        let mut c = base.clone();
        c.num_ues = vec![self.num_ues];
        c.num_ues_weights = vec![];
        if let Some(p) = self.arrival_prob {
            c.arrival_probs = vec![p];
        }
        if let Some(m) = self.num_rbgs {
            c.num_rbgs = m;
        }
        if let Some(t) = self.tbler {
            c.tbler = t;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Evaluation grid and repetition counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d::num_ues")]
    pub num_ues: Vec<usize>,
    #[serde(default)]
    pub arrival_probs: Vec<f64>,
    #[serde(default)]
    pub num_rbgs: Vec<usize>,
    #[serde(default)]
    pub tbler: Vec<f64>,
    /// Independent runs per cell.
    #[serde(default = "d::runs")]
    pub runs: usize,
    /// Episodes per run.
    #[serde(default = "d::episodes")]
    pub episodes: usize,
    #[serde(default = "d::decoding")]
    pub decoding: Decoding,
}

mod d {
    pub fn num_ues() -> Vec<usize> {
        vec![3, 4, 5]
    }
    pub fn runs() -> usize {
        5
    }
    pub fn episodes() -> usize {
        10
    }
    pub fn decoding() -> super::Decoding {
        super::Decoding::Greedy
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_ues: d::num_ues(),
            arrival_probs: vec![],
            num_rbgs: vec![],
            tbler: vec![],
            runs: d::runs(),
            episodes: d::episodes(),
            decoding: Decoding::Greedy,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ues.is_empty() || self.num_ues.contains(&0) {
            return Err(Error::config("eval.num_ues", "need at least one count, all >= 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("eval.runs", "must be >= 1"));
        }
        if self.episodes == 0 {
            return Err(Error::config("eval.episodes", "must be >= 1"));
        }
        if let Some(p) = self.arrival_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config("eval.arrival_probs", format!("{p} outside [0, 1]")));
        }
        if let Some(p) = self.tbler.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config("eval.tbler", format!("{p} outside [0, 1]")));
        }
        if let Decoding::Sampled { temperature } = self.decoding {
            if !(temperature > 0.0) {
                return Err(Error::config("eval.decoding.temperature", "must be > 0"));
            }
        }
        Ok(())
    }

    /// Cartesian product of the configured axes, UE count outermost.
    pub fn scenarios(&self) -> Vec<Scenario> {
        fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().map(|&x| Some(x)).collect()
            }
        }
        let mut out = Vec::new();
        for &i in &self.num_ues {
            for p in axis(&self.arrival_probs) {
                for m in axis(&self.num_rbgs) {
                    for t in axis(&self.tbler) {
                        out.push(Scenario {
                            num_ues: i,
                            arrival_prob: p,
                            num_rbgs: m,
                            tbler: t,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// One row of the KPI table: a (policy, scenario) cell over all runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiRow {
    pub policy: String,
    pub num_ues: usize,
    pub arrival_prob: Option<f64>,
    pub num_rbgs: usize,
    pub tbler: f64,
    pub seed: u64,
    pub runs: usize,
    pub episodes: usize,
    pub adapted: bool,
    pub valid_rate: f64,
    pub throughput_bits_per_s: Stat,
    pub throughput_dpdus_per_ue_tti: Stat,
    pub jfi: Stat,
    pub rbg_efficiency: Stat,
    pub collision_rate: Stat,
    pub mean_consistency: Stat,
    pub leader_utility: Stat,
    pub follower_utility: Stat,
}

/// Seed for episode `episode` of run `run`; identical across policies and
/// scenarios so every cell sees the same traffic and erasure draws.
pub fn episode_seed(seed: u64, run: usize, episode: usize) -> u64 {
    rng::derive_seed(seed, &[200, run as u64, episode as u64])
}

/// Evaluates every controller on every grid cell. Each run's KPIs are the
/// means over its episodes; rows report mean and deviation across runs.
pub fn evaluate(controllers: &mut [Box<dyn Controller + '_>], base: &EnvConfig, weights: &UtilityWeights, grid: &EvalConfig, seed: u64) -> Result<Vec<KpiRow>> {
    grid.validate()?;
    let mut rows = Vec::new();
    for ctrl in controllers.iter_mut() {
        for sc in grid.scenarios() {
            rows.push(evaluate_cell(ctrl.as_mut(), &sc, base, weights, grid, seed)?);
        }
    }
    Ok(rows)
}

pub fn evaluate_cell(ctrl: &mut dyn Controller, sc: &Scenario, base: &EnvConfig, weights: &UtilityWeights, grid: &EvalConfig, seed: u64) -> Result<KpiRow> {
    let cfg = sc.apply(base)?;
    let mut per_run: Vec<Kpis> = Vec::with_capacity(grid.runs);
    let (mut valid, mut total) = (0usize, 0usize);
    for run in 0..grid.runs {
        let mut sum = Kpis::default();
        for ep in 0..grid.episodes {
            let s = episode_seed(seed, run, ep);
            let mut env = EnvState::new(&cfg, weights, sc.num_ues, s)?;
            let mut rng = rng::stream(s, Stream::Baseline, 0);
            let rep = run_episode(ctrl, &mut env, &mut rng)?;
            valid += rep.valid_steps;
            total += rep.steps;
            add(&mut sum, &rep.kpis, 1.0 / grid.episodes as f64);
        }
        per_run.push(sum);
    }
    let col = |f: fn(&Kpis) -> f64| Stat::of(&per_run.iter().map(f).collect::<Vec<_>>());
    Ok(KpiRow {
        policy: ctrl.name(),
        num_ues: sc.num_ues,
        arrival_prob: sc.arrival_prob,
        num_rbgs: cfg.num_rbgs,
        tbler: cfg.tbler,
        seed,
        runs: grid.runs,
        episodes: grid.episodes,
        adapted: ctrl.adapted(),
        valid_rate: valid as f64 / total as f64,
        throughput_bits_per_s: col(|k| k.throughput_bits_per_s),
        throughput_dpdus_per_ue_tti: col(|k| k.throughput_dpdus_per_ue_tti),
        jfi: col(|k| k.jfi),
        rbg_efficiency: col(|k| k.rbg_efficiency),
        collision_rate: col(|k| k.collision_rate),
        mean_consistency: col(|k| k.mean_consistency),
        leader_utility: col(|k| k.leader_utility),
        follower_utility: col(|k| k.follower_utility),
    })
}

fn add(acc: &mut Kpis, k: &Kpis, w: f64) {
    acc.throughput_bits_per_s += w * k.throughput_bits_per_s;
    acc.throughput_dpdus_per_ue_tti += w * k.throughput_dpdus_per_ue_tti;
    acc.jfi += w * k.jfi;
    acc.rbg_efficiency += w * k.rbg_efficiency;
    acc.collision_rate += w * k.collision_rate;
    acc.mean_consistency += w * k.mean_consistency;
    acc.leader_utility += w * k.leader_utility;
    acc.follower_utility += w * k.follower_utility;
}

/// CSV column order.
pub const CSV_COLUMNS: [&str; 26] = [
    "policy",
    "num_ues",
    "arrival_prob",
    "num_rbgs",
    "tbler",
    "seed",
    "runs",
    "episodes",
    "adapted",
    "valid_rate",
    "throughput_bits_per_s_mean",
    "throughput_bits_per_s_std",
    "throughput_dpdus_per_ue_tti_mean",
    "throughput_dpdus_per_ue_tti_std",
    "jfi_mean",
    "jfi_std",
    "rbg_efficiency_mean",
    "rbg_efficiency_std",
    "collision_rate_mean",
    "collision_rate_std",
    "mean_consistency_mean",
    "mean_consistency_std",
    "leader_utility_mean",
    "leader_utility_std",
    "follower_utility_mean",
    "follower_utility_std",
];

pub fn write_csv<W: Write>(w: W, rows: &[KpiRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    out.write_record(CSV_COLUMNS).map_err(ser)?;
    for r in rows {
        let mut rec = vec![
            r.policy.clone(),
            r.num_ues.to_string(),
            r.arrival_prob.map(|p| p.to_string()).unwrap_or_default(),
            r.num_rbgs.to_string(),
            r.tbler.to_string(),
            r.seed.to_string(),
            r.runs.to_string(),
            r.episodes.to_string(),
            r.adapted.to_string(),
            r.valid_rate.to_string(),
        ];
        for s in [
            r.throughput_bits_per_s,
            r.throughput_dpdus_per_ue_tti,
            r.jfi,
            r.rbg_efficiency,
            r.collision_rate,
            r.mean_consistency,
            r.leader_utility,
            r.follower_utility,
        ] {
            rec.push(s.mean.to_string());
            rec.push(s.std.to_string());
        }
        out.write_record(&rec).map_err(ser)?;
    }
    out.flush()?;
    Ok(())
}

/// One point of a sweep series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub policy: String,
    pub x: f64,
    pub throughput_bits_per_s: Stat,
    pub jfi: Stat,
    pub rbg_efficiency: Stat,
    pub leader_utility: Stat,
}

/// Sweep series keyed by axis: `ue_scale`, `arrival_rate`, `rbg_count`,
/// `tbler`. An axis appears only when the grid varies it.
pub fn plot_data(rows: &[KpiRow], grid: &EvalConfig) -> BTreeMap<String, Vec<PlotPoint>> {
    let mut out = BTreeMap::new();
    let axes: [(&str, usize, fn(&KpiRow) -> f64); 4] = [
        ("ue_scale", grid.num_ues.len(), |r| r.num_ues as f64),
        ("arrival_rate", grid.arrival_probs.len(), |r| r.arrival_prob.unwrap_or(f64::NAN)),
        ("rbg_count", grid.num_rbgs.len(), |r| r.num_rbgs as f64),
        ("tbler", grid.tbler.len(), |r| r.tbler),
    ];
    for (name, n, x) in axes {
        if n < 2 {
            continue;
        }
        out.insert(
            name.to_string(),
            rows.iter()
                .map(|r| PlotPoint {
                    policy: r.policy.clone(),
                    x: x(r),
                    throughput_bits_per_s: r.throughput_bits_per_s,
                    jfi: r.jfi,
                    rbg_efficiency: r.rbg_efficiency,
                    leader_utility: r.leader_utility,
                })
                .collect(),
        );
    }
    out
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Throughput of one controller across a TBLER sweep at fixed UE count, with
/// the Spearman correlation between TBLER and throughput.
pub fn tbler_sweep(ctrl: &mut dyn Controller, base: &EnvConfig, weights: &UtilityWeights, num_ues: usize, tblers: &[f64], runs: usize, episodes: usize, seed: u64) -> Result<(Vec<f64>, Option<f64>)> {
    let grid = EvalConfig {
        num_ues: vec![num_ues],
        tbler: tblers.to_vec(),
        runs,
        episodes,
        ..EvalConfig::default()
    };
    let mut th = Vec::with_capacity(tblers.len());
    for sc in grid.scenarios() {
        th.push(evaluate_cell(ctrl, &sc, base, weights, &grid, seed)?.throughput_bits_per_s.mean);
    }
    let rho = spearman(tblers, &th);
    Ok((th, rho))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), None);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn grid_shape() {
        let g = EvalConfig {
            num_ues: vec![3, 4, 5],
            arrival_probs: vec![0.05, 0.25, 0.5, 0.75],
            ..EvalConfig::default()
        };
        let s = g.scenarios();
        assert_eq!(s.len(), 12);
        assert_eq!(s[0].num_ues, 3);
        assert_eq!(s[4].arrival_prob, Some(0.05));
    }

    #[test]
    fn stat_values() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
