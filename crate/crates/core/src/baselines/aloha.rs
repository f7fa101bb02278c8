use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, FollowerObs, StepResult, UeAction};
use crate::error::{Error, Result};
use crate::game::Bitmap;
use crate::metrics::Controller;
use crate::rng::Rng;

/// Adaptive slotted-ALOHA constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlohaConfig {
    pub p_init: f64,
    /// Multiplier after a collision.
    pub decay: f64,
    /// Increment after a delivery.
    pub recovery: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl Default for AlohaConfig {
    fn default() -> Self {
        Self {
            p_init: 0.5,
            decay: 0.8,
            recovery: 0.05,
            p_min: 0.05,
            p_max: 0.9,
        }
    }
}

impl AlohaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.p_min && self.p_min <= self.p_max && self.p_max <= 1.0) {
            return Err(Error::config("aloha.p_min", "need 0 < p_min <= p_max <= 1"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("aloha.decay", "must lie in (0, 1]"));
        }
        if !(self.recovery >= 0.0) {
            return Err(Error::config("aloha.recovery", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per-UE transmit probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlohaState {
    pub cfg: AlohaConfig,
    pub p: Vec<f64>,
}

impl AlohaState {
    pub fn new(cfg: AlohaConfig, num_ues: usize) -> Self {
        let p0 = cfg.p_init.clamp(cfg.p_min, cfg.p_max);
        Self { p: vec![p0; num_ues], cfg }
    }

    fn clamp(&mut self, ue: usize) {
        self.p[ue] = self.p[ue].clamp(self.cfg.p_min, self.cfg.p_max);
    }

    pub fn on_collision(&mut self, ue: usize) {
        self.p[ue] *= self.cfg.decay;
        self.clamp(ue);
    }

    pub fn on_success(&mut self, ue: usize) {
        self.p[ue] += self.cfg.recovery;
        self.clamp(ue);
    }
}

/// With a non-empty buffer, transmit on one uniformly drawn RBG with
/// probability `p`; otherwise stay idle.
pub fn aloha_act(state: &AlohaState, obs: &FollowerObs, num_rbgs: usize, rng: &mut Rng) -> Bitmap {
    let mut b = Bitmap::zeros(num_rbgs);
    if obs.buffer_bits > 0 && num_rbgs > 0 && rng.gen_bool(state.p[obs.ue]) {
        b.0[rng.gen_range(0..num_rbgs)] = true;
    }
    b
}

/// ALOHA followers under an idle leader (all-zero DCM).
#[derive(Clone, Debug)]
pub struct AlohaController {
    pub cfg: AlohaConfig,
    pub state: AlohaState,
    last: Vec<Bitmap>,
}

impl AlohaController {
    pub fn new(cfg: AlohaConfig) -> Self {
        Self {
            state: AlohaState::new(cfg.clone(), 0),
            cfg,
            last: Vec::new(),
        }
    }
}

impl Controller for AlohaController {
    fn name(&self) -> String {
        "aloha".into()
    }

    fn reset(&mut self, env: &EnvState) -> Result<()> {
        self.state = AlohaState::new(self.cfg.clone(), env.num_ues());
        self.last.clear();
        Ok(())
    }

    fn leader(&mut self, env: &EnvState, _rng: &mut Rng) -> Result<Vec<usize>> {
        Ok(vec![0; env.num_rbgs()])
    }

    fn followers(&mut self, env: &EnvState, dcm: &[usize], rng: &mut Rng) -> Result<Vec<UeAction>> {
        let k = env.config().ucm_len;
        self.last = env
            .follower_obs_for(dcm)?
            .iter()
            .map(|o| aloha_act(&self.state, o, env.num_rbgs(), rng))
            .collect();
        Ok(self
            .last
            .iter()
            .map(|b| UeAction {
                bitmap: b.clone(),
                ucm: vec![0; k],
            })
            .collect())
    }

    fn observe(&mut self, res: &StepResult) {
        for ue in 0..self.last.len() {
            let used: Vec<usize> = (0..self.last[ue].len()).filter(|&m| self.last[ue].get(m)).collect();
            if used.is_empty() {
                continue;
            }
            if used.iter().any(|&m| res.collision_map[m] >= 2) {
                self.state.on_collision(ue);
            } else if res.received[ue] > 0 {
                self.state.on_success(ue);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn probability_rules() {
        let mut s = AlohaState::new(AlohaConfig::default(), 2);
        assert_eq!(s.p[0], 0.5);
        s.on_collision(0);
        assert!((s.p[0] - 0.4).abs() < 1e-15);
        for _ in 0..100 {
            s.on_collision(1);
        }
        assert_eq!(s.p[1], 0.05);
        for _ in 0..100 {
            s.on_success(1);
        }
        assert_eq!(s.p[1], 0.9);
    }

    #[test]
    fn empty_buffer_is_idle() {
        let s = AlohaState::new(AlohaConfig::default(), 1);
        let obs = FollowerObs {
            ue: 0,
            channel: 1,
            buffer_bits: 0,
            last_action: None,
            dcm_bits: None,
        };
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(aloha_act(&s, &obs, 4, &mut rng).popcount(), 0);
        }
        let busy = FollowerObs { buffer_bits: 256, ..obs };
        let n = (0..1000).filter(|_| aloha_act(&s, &busy, 4, &mut rng).popcount() == 1).count();
        assert!((n as f64 / 1000.0 - 0.5).abs() < 0.06);
    }
}
