use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{consistency, interactive_utility, jfi, potential_value, Bitmap, StageGame, UtilityWeights};
use crate::scalar::Real;

/// Largest `I * M` whose joint bitmap space is enumerated.
pub const MAX_JOINT_BITS: usize = 16;

fn check_size(num_ues: usize, num_rbgs: usize) -> Result<()> {
    let bits = num_ues * num_rbgs;
    if bits > MAX_JOINT_BITS {
        return Err(Error::Size {
            requested: format!("2^{bits} joint profiles (I = {num_ues}, M = {num_rbgs})"),
            limit: format!("2^{MAX_JOINT_BITS}"),
        });
    }
    Ok(())
}

/// Joint profile number `code`: UE `i` holds bits `[i*M, (i+1)*M)`.
pub fn decode_profile(code: u64, num_ues: usize, num_rbgs: usize) -> Vec<Bitmap> {
    let mask = (1u64 << num_rbgs) - 1;
    (0..num_ues)
        .map(|i| Bitmap::from_mask((code >> (i * num_rbgs)) & mask, num_rbgs))
        .collect()
}

/// Largest `|dF'_i - dPhi|` over all profiles, UEs and unilateral bitmap
/// deviations, for the utility `f`.
pub fn potential_violation_with<T: Real>(game: &StageGame<T>, f: impl Fn(&[Bitmap], usize) -> T) -> Result<T> {
    let (i_n, m) = (game.num_ues, game.num_rbgs);
    check_size(i_n, m)?;
    let mut worst = T::zero();
    for code in 0..(1u64 << (i_n * m)) {
        let joint = decode_profile(code, i_n, m);
        let phi = potential_value(&joint, game);
        for i in 0..i_n {
            let fi = f(&joint, i);
            let mut dev = joint.clone();
            for alt in 0..(1u64 << m) {
                dev[i] = Bitmap::from_mask(alt, m);
                let d = (f(&dev, i) - fi) - (potential_value(&dev, game) - phi);
                worst = worst.max(d.abs());
            }
        }
    }
    Ok(worst)
}

/// `max |dF'_i - dPhi|` for the interactive utility.
pub fn verify_exact_potential<T: Real>(game: &StageGame<T>) -> Result<T> {
    potential_violation_with(game, |j, i| interactive_utility(j, i, game))
}

/// Full stage utility of UE `i` with full buffers: the efficiency term
/// compares what `i` delivers alone against what it loads onto its RBGs.
pub fn stage_utility<T: Real>(joint: &[Bitmap], ue: usize, game: &StageGame<T>, w: &UtilityWeights) -> T {
    let rec = interactive_utility(joint, ue, game);
    let tx: T = (0..game.num_rbgs)
        .filter(|&m| joint[ue].get(m))
        .map(|m| game.capacity[m])
        .sum();
    let eff = if tx > T::zero() { rec / tx } else { T::zero() };
    let c: T = consistency(&joint[ue], &game.dcm_bits[ue]).expect("bitmap widths agree");
    T::of(w.rho1) * eff + T::of(w.rho2) * c
}

/// Pure profiles where no UE gains more than `tol` by deviating alone.
pub fn enumerate_follower_ne<T: Real>(game: &StageGame<T>, w: &UtilityWeights, tol: T) -> Result<Vec<Vec<Bitmap>>> {
    let (i_n, m) = (game.num_ues, game.num_rbgs);
    check_size(i_n, m)?;
    let mut out = Vec::new();
    'profile: for code in 0..(1u64 << (i_n * m)) {
        let joint = decode_profile(code, i_n, m);
        for i in 0..i_n {
            let base = stage_utility(&joint, i, game, w);
            let mut dev = joint.clone();
            for alt in 0..(1u64 << m) {
                dev[i] = Bitmap::from_mask(alt, m);
                if stage_utility(&dev, i, game, w) > base + tol {
                    continue 'profile;
                }
            }
        }
        out.push(joint);
    }
    Ok(out)
}

/// How the leader scores a DCM whose follower subgame has several equilibria.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeaderScoring {
    /// Worst equilibrium for the leader.
    Pessimistic,
    /// Best equilibrium for the leader.
    Optimistic,
}

/// Leader's one-shot value of a follower profile: mean delivered dPDUs plus
/// `epsilon` times the fairness of RBG usage.
pub fn leader_stage_value<T: Real>(joint: &[Bitmap], game: &StageGame<T>, w: &UtilityWeights) -> T {
    let rec: Vec<T> = (0..game.num_ues).map(|i| interactive_utility(joint, i, game)).collect();
    let usage: Vec<T> = joint.iter().map(|b| T::of_usize(b.popcount())).collect();
    let mean = rec.iter().copied().sum::<T>() / T::of_usize(rec.len());
    mean + T::of(w.epsilon) * jfi(&usage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackelbergSolution {
    pub dcm: Vec<usize>,
    pub followers_ne: Vec<Vec<Bitmap>>,
    pub leader_value: f64,
    pub dcms_searched: usize,
}

/// Exhaustive leader search over all `(I+1)^M` DCMs. DCMs are visited in
/// lexicographic order and only a strictly better value replaces the
/// incumbent.
pub fn brute_force_stackelberg(num_ues: usize, capacity: &[f64], w: &UtilityWeights, scoring: LeaderScoring) -> Result<StackelbergSolution> {
    let m = capacity.len();
    check_size(num_ues, m)?;
    let count = (num_ues + 1).checked_pow(m as u32).filter(|&c| c <= 1 << 20).ok_or_else(|| Error::Size {
        requested: format!("({num_ues}+1)^{m} DCMs"),
        limit: "2^20".into(),
    })?;
    let base = StageGame::new(num_ues, capacity.to_vec())?;
    let mut best: Option<StackelbergSolution> = None;
    for code in 0..count {
        let mut dcm = vec![0; m];
        let mut c = code;
        for slot in dcm.iter_mut().rev() {
            *slot = c % (num_ues + 1);
            c /= num_ues + 1;
        }
        let game = base.clone().with_dcm(&dcm)?;
        let ne = enumerate_follower_ne(&game, w, 1e-12)?;
        let values = ne.iter().map(|j| leader_stage_value(j, &game, w));
        let v = match scoring {
            LeaderScoring::Pessimistic => values.fold(f64::INFINITY, f64::min),
            LeaderScoring::Optimistic => values.fold(f64::NEG_INFINITY, f64::max),
        };
        if ne.is_empty() {
            continue;
        }
        if best.as_ref().is_none_or(|b| v > b.leader_value) {
            best = Some(StackelbergSolution {
                dcm,
                followers_ne: ne,
                leader_value: v,
                dcms_searched: count,
            });
        }
    }
    best.ok_or_else(|| Error::Precondition("no DCM admits a follower equilibrium".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bm(s: &str) -> Bitmap {
        s.parse().unwrap()
    }

    #[test]
    fn profile_decoding() {
        let j = decode_profile(0b10_01, 2, 2);
        assert_eq!(j, vec![Bitmap::from_mask(0b01, 2), Bitmap::from_mask(0b10, 2)]);
    }

    #[test]
    fn two_by_one_potential_is_exact() {
        let g = StageGame::new(2, vec![1.0]).unwrap();
        assert_eq!(verify_exact_potential(&g).unwrap(), 0.0);
    }

    #[test]
    fn size_limit() {
        let g = StageGame::new(6, vec![1.0; 6]).unwrap();
        assert!(matches!(verify_exact_potential(&g), Err(Error::Size { .. })));
    }

    #[test]
    fn compliant_profile_is_unique_ne_when_consistency_dominates() {
        let g = StageGame::new(2, vec![1.0, 1.0]).unwrap().with_dcm(&[1, 2]).unwrap();
        let w = UtilityWeights {
            rho1: 1.0,
            rho2: 100.0,
            epsilon: 5.0,
        };
        let ne = enumerate_follower_ne(&g, &w, 1e-12).unwrap();
        assert_eq!(ne, vec![vec![bm("10"), bm("01")]]);
    }
}
