use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment parameters. Units are part of the key names where relevant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Admissible UE counts `I`; also the support of the per-episode draw.
    #[serde(default = "defaults::num_ues")]
    pub num_ues: Vec<usize>,
    /// Probability of each entry of `num_ues`. Empty means uniform.
    #[serde(default)]
    pub num_ues_weights: Vec<f64>,
    /// `M`, resource block groups per TTI.
    pub num_rbgs: usize,
    /// `T`, TTIs per episode.
    pub episode_len: usize,
    #[serde(default = "defaults::tti_duration_s")]
    pub tti_duration_s: f64,
    /// Per-UE Bernoulli arrival probabilities, assigned to UEs cyclically.
    #[serde(default = "defaults::arrival_probs")]
    pub arrival_probs: Vec<f64>,
    #[serde(default = "defaults::dpdu_bits")]
    pub dpdu_bits: u64,
    /// Buffer capacity in bits; absent means unbounded.
    #[serde(default)]
    pub buffer_cap_bits: Option<u64>,
    #[serde(default = "defaults::tbler")]
    pub tbler: f64,
    #[serde(default = "defaults::one")]
    pub rbs_per_rbg: u64,
    #[serde(default = "defaults::subcarriers_per_rb")]
    pub subcarriers_per_rb: u64,
    #[serde(default = "defaults::symbols_per_slot")]
    pub symbols_per_slot: u64,
    /// Spectral efficiency per channel state, ordered poor to good.
    #[serde(default = "defaults::spectral_efficiency")]
    pub spectral_efficiency: Vec<f64>,
    /// Row-stochastic channel state transition matrix.
    #[serde(default = "defaults::channel_transition")]
    pub channel_transition: Vec<Vec<f64>>,
    /// Range, in milliseconds, from which each UE's channel change period is drawn.
    #[serde(default = "defaults::channel_change_ms")]
    pub channel_change_ms: [f64; 2],
    /// Fixed channel change period in TTIs; overrides `channel_change_ms`.
    #[serde(default)]
    pub channel_change_period_tti: Option<usize>,
    /// Start every UE in this state instead of sampling the stationary law.
    #[serde(default)]
    pub initial_channel_state: Option<usize>,
    #[serde(default = "defaults::csi_error_prob")]
    pub csi_error_prob: f64,
    /// `K`, UCM tokens per follower action.
    #[serde(default = "defaults::ucm_len")]
    pub ucm_len: usize,
    /// Size of the UCM signalling alphabet.
    #[serde(default = "defaults::ucm_vocab")]
    pub ucm_vocab: usize,
    /// Largest UE count any policy vocabulary must address.
    #[serde(default = "defaults::max_ues")]
    pub max_ues: usize,
}

mod defaults {
    pub fn num_ues() -> Vec<usize> {
        vec![3, 4, 5]
    }
    pub fn tti_duration_s() -> f64 {
        5e-3
    }
    pub fn arrival_probs() -> Vec<f64> {
        vec![0.1, 0.3, 0.7]
    }
    pub fn dpdu_bits() -> u64 {
        256
    }
    pub fn tbler() -> f64 {
        1e-3
    }
    pub fn one() -> u64 {
        1
    }
    pub fn subcarriers_per_rb() -> u64 {
        12
    }
    pub fn symbols_per_slot() -> u64 {
        14
    }
    pub fn spectral_efficiency() -> Vec<f64> {
        vec![1.0, 2.0, 4.0]
    }
    pub fn channel_transition() -> Vec<Vec<f64>> {
        vec![
            vec![0.8, 0.2, 0.0],
            vec![0.2, 0.6, 0.2],
            vec![0.0, 0.2, 0.8],
        ]
    }
    pub fn channel_change_ms() -> [f64; 2] {
        [1.0, 10.0]
    }
    pub fn csi_error_prob() -> f64 {
        0.1
    }
    pub fn ucm_len() -> usize {
        2
    }
    pub fn ucm_vocab() -> usize {
        8
    }
    pub fn max_ues() -> usize {
        10
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_ues: defaults::num_ues(),
            num_ues_weights: Vec::new(),
            num_rbgs: 5,
            episode_len: 24,
            tti_duration_s: defaults::tti_duration_s(),
            arrival_probs: defaults::arrival_probs(),
            dpdu_bits: defaults::dpdu_bits(),
            buffer_cap_bits: None,
            tbler: defaults::tbler(),
            rbs_per_rbg: 1,
            subcarriers_per_rb: defaults::subcarriers_per_rb(),
            symbols_per_slot: defaults::symbols_per_slot(),
            spectral_efficiency: defaults::spectral_efficiency(),
            channel_transition: defaults::channel_transition(),
            channel_change_ms: defaults::channel_change_ms(),
            channel_change_period_tti: None,
            initial_channel_state: None,
            csi_error_prob: defaults::csi_error_prob(),
            ucm_len: defaults::ucm_len(),
            ucm_vocab: defaults::ucm_vocab(),
            max_ues: defaults::max_ues(),
        }
    }
}

fn check(ok: bool, field: &str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("env.{field}"), reason()))
    }
}

fn is_prob(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.num_rbgs >= 1, "num_rbgs", || "M must be >= 1".into())?;
        check(self.num_rbgs <= 64, "num_rbgs", || "M must be <= 64".into())?;
        check(self.episode_len >= 1, "episode_len", || "T must be >= 1".into())?;
        check(self.max_ues >= 1, "max_ues", || "must be >= 1".into())?;
        check(!self.num_ues.is_empty(), "num_ues", || "at least one UE count required".into())?;
        for &i in &self.num_ues {
            check(i >= 1 && i <= self.max_ues, "num_ues", || {
                format!("UE count {i} outside 1..={}", self.max_ues)
            })?;
        }
        if !self.num_ues_weights.is_empty() {
            check(self.num_ues_weights.len() == self.num_ues.len(), "num_ues_weights", || {
                "must have one weight per UE count".into()
            })?;
            check(
                self.num_ues_weights.iter().all(|&w| w.is_finite() && w >= 0.0)
                    && self.num_ues_weights.iter().sum::<f64>() > 0.0,
                "num_ues_weights",
                || "weights must be >= 0 with a positive sum".into(),
            )?;
        }
        check(
            self.tti_duration_s.is_finite() && self.tti_duration_s > 0.0,
            "tti_duration_s",
            || "must be > 0".into(),
        )?;
        check(!self.arrival_probs.is_empty(), "arrival_probs", || "must not be empty".into())?;
        for &p in &self.arrival_probs {
            check(is_prob(p), "arrival_probs", || format!("p_a = {p} outside [0, 1]"))?;
        }
        check(self.dpdu_bits >= 1, "dpdu_bits", || "must be >= 1".into())?;
        if let Some(cap) = self.buffer_cap_bits {
            check(cap >= self.dpdu_bits, "buffer_cap_bits", || {
                "capacity must hold at least one dPDU".into()
            })?;
        }
        check(is_prob(self.tbler), "tbler", || format!("{} outside [0, 1]", self.tbler))?;
        check(self.rbs_per_rbg >= 1, "rbs_per_rbg", || "must be >= 1".into())?;
        check(self.subcarriers_per_rb >= 1, "subcarriers_per_rb", || "must be >= 1".into())?;
        check(self.symbols_per_slot >= 1, "symbols_per_slot", || "must be >= 1".into())?;
        let n = self.spectral_efficiency.len();
        check(n >= 1, "spectral_efficiency", || "need at least one channel state".into())?;
        check(
            self.spectral_efficiency.iter().all(|&v| v.is_finite() && v > 0.0),
            "spectral_efficiency",
            || "every state needs nu > 0".into(),
        )?;
        check(self.channel_transition.len() == n, "channel_transition", || {
            format!("expected {n} rows, one per channel state")
        })?;
        for (r, row) in self.channel_transition.iter().enumerate() {
            check(row.len() == n, "channel_transition", || format!("row {r} must have {n} entries"))?;
            check(row.iter().all(|&p| p.is_finite() && p >= 0.0), "channel_transition", || {
                format!("row {r} has a negative entry")
            })?;
            let s: f64 = row.iter().sum();
            check((s - 1.0).abs() <= 1e-12, "channel_transition", || {
                format!("row {r} sums to {s}, not 1")
            })?;
        }
        let [lo, hi] = self.channel_change_ms;
        check(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi, "channel_change_ms", || {
            "need 0 <= min <= max".into()
        })?;
        if let Some(p) = self.channel_change_period_tti {
            check(p >= 1, "channel_change_period_tti", || "must be >= 1".into())?;
        }
        if let Some(s) = self.initial_channel_state {
            check(s < n, "initial_channel_state", || format!("state {s} >= {n} states"))?;
        }
        check(is_prob(self.csi_error_prob), "csi_error_prob", || {
            format!("{} outside [0, 1]", self.csi_error_prob)
        })?;
        check(self.ucm_vocab >= 1, "ucm_vocab", || "must be >= 1".into())?;
        Ok(())
    }

    pub fn num_channel_states(&self) -> usize {
        self.spectral_efficiency.len()
    }

    /// Arrival probability of UE `ue` (0-based).
    pub fn arrival_prob(&self, ue: usize) -> f64 {
        self.arrival_probs[ue % self.arrival_probs.len()]
    }

    /// Bits one RBG carries at spectral efficiency `nu`.
    pub fn rbg_capacity_bits(&self, nu: f64) -> u64 {
        let re = (self.rbs_per_rbg * self.subcarriers_per_rb * self.symbols_per_slot) as f64;
        (re * nu).floor() as u64
    }

    /// Whole dPDUs one RBG carries at spectral efficiency `nu`.
    pub fn rbg_capacity_dpdus(&self, nu: f64) -> u64 {
        self.rbg_capacity_bits(nu) / self.dpdu_bits
    }

    /// Largest per-TTI delivery any single UE can achieve, in dPDUs.
    pub fn max_dpdus_per_tti(&self) -> u64 {
        let best = self.spectral_efficiency.iter().copied().fold(0.0, f64::max);
        self.rbg_capacity_dpdus(best) * self.num_rbgs as u64
    }

    /// Normalized episode-level UE count distribution over `num_ues`.
    pub fn ue_count_probs(&self) -> Vec<f64> {
        if self.num_ues_weights.is_empty() {
            vec![1.0 / self.num_ues.len() as f64; self.num_ues.len()]
        } else {
            let s: f64 = self.num_ues_weights.iter().sum();
            self.num_ues_weights.iter().map(|w| w / s).collect()
        }
    }
}
