use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, StepResult, TraceRecord};
use crate::game;

/// Episode-level KPIs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Kpis {
    pub throughput_bits_per_s: f64,
    pub throughput_dpdus_per_ue_tti: f64,
    pub jfi: f64,
    pub rbg_efficiency: f64,
    /// Share of occupied (RBG, TTI) slots with two or more transmitters.
    pub collision_rate: f64,
    pub mean_consistency: f64,
    /// Mean per-TTI leader reward.
    pub leader_utility: f64,
    /// Mean per-TTI, per-UE follower reward.
    pub follower_utility: f64,
}

/// Running totals over one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeKpis {
    pub num_ues: usize,
    pub num_rbgs: usize,
    pub ttis: usize,
    pub delivered_dpdus: u64,
    pub attempted_dpdus: u64,
    pub usage: Vec<u64>,
    pub occupied_slots: u64,
    pub collided_slots: u64,
    pub consistency_sum: f64,
    pub leader_reward_sum: f64,
    pub follower_reward_sum: f64,
}

impl EpisodeKpis {
    pub fn new(num_ues: usize, num_rbgs: usize) -> Self {
        Self {
            num_ues,
            num_rbgs,
            ttis: 0,
            delivered_dpdus: 0,
            attempted_dpdus: 0,
            usage: vec![0; num_ues],
            occupied_slots: 0,
            collided_slots: 0,
            consistency_sum: 0.0,
            leader_reward_sum: 0.0,
            follower_reward_sum: 0.0,
        }
    }

    /// Adds one TTI. `usage` is the cumulative RBG usage after the step.
    pub fn record(&mut self, res: &StepResult, usage: &[u64]) {
        self.ttis += 1;
        self.delivered_dpdus += res.received.iter().map(|&r| r as u64).sum::<u64>();
        self.attempted_dpdus += res.attempted.iter().map(|&r| r as u64).sum::<u64>();
        self.usage.copy_from_slice(usage);
        self.occupied_slots += res.collision_map.iter().filter(|&&n| n >= 1).count() as u64;
        self.collided_slots += res.collision_map.iter().filter(|&&n| n >= 2).count() as u64;
        self.consistency_sum += res.consistency.iter().sum::<f64>();
        self.leader_reward_sum += res.leader_reward;
        self.follower_reward_sum += res.follower_rewards.iter().sum::<f64>();
    }

    pub fn report(&self, cfg: &EnvConfig) -> Kpis {
        let ue_ttis = (self.num_ues * self.ttis) as f64;
        let ttis = self.ttis as f64;
        let (bits, per_ue) = throughput_from_totals(self.delivered_dpdus, self.num_ues, self.ttis, cfg);
        let usage: Vec<f64> = self.usage.iter().map(|&x| x as f64).collect();
        Kpis {
            throughput_bits_per_s: bits,
            throughput_dpdus_per_ue_tti: per_ue,
            jfi: game::jfi(&usage),
            rbg_efficiency: efficiency(self.delivered_dpdus, self.usage.iter().sum()),
            collision_rate: ratio(self.collided_slots as f64, self.occupied_slots as f64),
            mean_consistency: ratio(self.consistency_sum, ue_ttis),
            leader_utility: ratio(self.leader_reward_sum, ttis),
            follower_utility: ratio(self.follower_reward_sum, ue_ttis),
        }
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn efficiency(delivered: u64, usage: u64) -> f64 {
    ratio(delivered as f64, usage as f64)
}

fn throughput_from_totals(delivered: u64, num_ues: usize, ttis: usize, cfg: &EnvConfig) -> (f64, f64) {
    if num_ues == 0 || ttis == 0 {
        return (0.0, 0.0);
    }
    let per_ue_tti = delivered as f64 / (num_ues * ttis) as f64;
    let bits = per_ue_tti * cfg.dpdu_bits as f64 / cfg.tti_duration_s;
    (bits, per_ue_tti)
}

/// Throughput of a complete trace: bits per second of mean per-UE delivery,
/// and delivered dPDUs per UE per TTI.
pub fn throughput(trace: &[TraceRecord], cfg: &EnvConfig) -> (f64, f64) {
    let delivered: u64 = trace.iter().flat_map(|r| r.received.iter()).map(|&v| v as u64).sum();
    let num_ues = trace.first().map_or(0, |r| r.received.len());
    throughput_from_totals(delivered, num_ues, trace.len(), cfg)
}

/// Delivered dPDUs per unit of RBG usage; 0 when nothing was used.
pub fn rbg_efficiency(trace: &[TraceRecord]) -> f64 {
    let delivered: u64 = trace.iter().flat_map(|r| r.received.iter()).map(|&v| v as u64).sum();
    let usage: u64 = trace.last().map_or(0, |r| r.usage.iter().sum());
    efficiency(delivered, usage)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(received: Vec<usize>, usage: Vec<u64>) -> TraceRecord {
        TraceRecord {
            t: 0,
            dcm: vec![],
            bitmaps: vec![],
            ucm: vec![],
            attempted: received.clone(),
            received,
            collision_map: vec![],
            leader_reward: 0.0,
            follower_rewards: vec![],
            arrived: vec![],
            dropped: vec![],
            buffer_bits: vec![],
            channel: vec![],
            csi: vec![],
            usage,
        }
    }

    #[test]
    fn throughput_examples() {
        let cfg = EnvConfig::default();
        let zero: Vec<_> = (0..24).map(|_| rec(vec![0, 0], vec![0, 0])).collect();
        assert_eq!(throughput(&zero, &cfg), (0.0, 0.0));
        // One dPDU of 256 bits per UE per TTI on average.
        let one: Vec<_> = (0..24).map(|_| rec(vec![1, 1], vec![0, 0])).collect();
        assert!((throughput(&one, &cfg).0 - 51_200.0).abs() < 1e-9);
        let two: Vec<_> = (0..24).map(|_| rec(vec![2, 2], vec![0, 0])).collect();
        assert_eq!(throughput(&two, &cfg).0, 2.0 * throughput(&one, &cfg).0);
    }

    #[test]
    fn efficiency_examples() {
        let mut t: Vec<_> = (0..10).map(|_| rec(vec![1], vec![0])).collect();
        t.last_mut().unwrap().usage = vec![20];
        assert_eq!(rbg_efficiency(&t), 0.5);
        assert_eq!(rbg_efficiency(&[rec(vec![0], vec![0])]), 0.0);
    }
}
