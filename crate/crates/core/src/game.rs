//! Utilities, rewards and fairness for the leader/follower uplink game, plus
//! the congestion-game potential used by the equilibrium analysis.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Weights of the follower utility (`rho1`, `rho2`) and the leader's fairness
/// weight `epsilon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilityWeights {
    pub rho1: f64,
    pub rho2: f64,
    pub epsilon: f64,
}

impl Default for UtilityWeights {
    fn default() -> Self {
        Self {
            rho1: 8.0,
            rho2: 10.0,
            epsilon: 5.0,
        }
    }
}

impl UtilityWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("game.rho1", self.rho1),
            ("game.rho2", self.rho2),
            ("game.epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// An `M`-bit RBG selection. Bit `m` set means RBG `m` is used.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bitmap(pub Vec<bool>);

impl Bitmap {
    pub fn zeros(m: usize) -> Self {
        Bitmap(vec![false; m])
    }

    pub fn ones(m: usize) -> Self {
        Bitmap(vec![true; m])
    }

    /// Bit `m` of the result is bit `m` of `mask`.
    pub fn from_mask(mask: u64, m: usize) -> Self {
        Bitmap((0..m).map(|k| mask >> k & 1 == 1).collect())
    }

    pub fn mask(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (k, &b)| acc | (u64::from(b) << k))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, m: usize) -> bool {
        self.0[m]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }
}

impl From<Vec<bool>> for Bitmap {
    fn from(v: Vec<bool>) -> Self {
        Bitmap(v)
    }
}

impl fmt::Display for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Bitmap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Decode(format!("bad bitmap character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Bitmap)
    }
}

/// Per-UE intent bits from a leader DCM: bit `m` is set iff token `m`
/// equals `ue` (1-based; token 0 means "unallocated").
pub fn dcm_bits_for_ue(dcm: &[usize], ue: usize, num_ues: usize) -> Result<Bitmap> {
    if ue == 0 || ue > num_ues {
        return Err(Error::Decode(format!("UE index {ue} outside 1..={num_ues}")));
    }
    dcm.iter()
        .map(|&tok| {
            if tok > num_ues {
                Err(Error::Decode(format!("DCM token {tok} outside 0..={num_ues}")))
            } else {
                Ok(tok == ue)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Bitmap)
}

/// Normalized Hamming similarity between a UE bitmap and its DCM bits.
pub fn consistency<T: Real>(bitmap: &Bitmap, dcm_bits: &Bitmap) -> Result<T> {
    if bitmap.len() != dcm_bits.len() {
        return Err(Error::Contract(format!(
            "bitmap length {} != DCM length {}",
            bitmap.len(),
            dcm_bits.len()
        )));
    }
    if bitmap.is_empty() {
        return Err(Error::Contract("empty bitmap".into()));
    }
    let agree = bitmap
        .bits()
        .iter()
        .zip(dcm_bits.bits())
        .filter(|(a, d)| a == d)
        .count();
    Ok(T::of_usize(agree) / T::of_usize(bitmap.len()))
}

/// Follower reward: `rho1 * rec/tx + rho2 * C`, with the efficiency term
/// taken as 0 when nothing was attempted.
pub fn follower_utility<T: Real>(rec: usize, tx: usize, consistency: T, w: &UtilityWeights) -> T {
    debug_assert!(rec <= tx, "received {rec} > attempted {tx}");
    let eff = if tx == 0 {
        T::zero()
    } else {
        T::of_usize(rec) / T::of_usize(tx)
    };
    T::of(w.rho1) * eff + T::of(w.rho2) * consistency
}

/// Jain's fairness index. An all-zero vector counts as perfectly fair.
pub fn jfi<T: Real>(x: &[T]) -> T {
    assert!(!x.is_empty(), "JFI of an empty vector");
    let sum: T = x.iter().copied().sum();
    let sq: T = x.iter().map(|&v| v * v).sum();
    if sq == T::zero() {
        return T::one();
    }
    sum * sum / (T::of_usize(x.len()) * sq)
}

/// Leader reward: mean received dPDUs plus `epsilon` times the JFI of the
/// cumulative RBG usage.
pub fn leader_utility<T: Real>(received: &[T], usage: &[T], w: &UtilityWeights) -> Result<T> {
    if received.len() != usage.len() || received.is_empty() {
        return Err(Error::Contract(format!(
            "received ({}) and usage ({}) must be equal-length and non-empty",
            received.len(),
            usage.len()
        )));
    }
    let mean = received.iter().copied().sum::<T>() / T::of_usize(received.len());
    Ok(mean + T::of(w.epsilon) * jfi(usage))
}

/// A one-shot follower subgame: `capacity[m]` is the deliverable dPDU count
/// `N_m` shared by every UE on RBG `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageGame<T> {
    pub num_ues: usize,
    pub num_rbgs: usize,
    pub capacity: Vec<T>,
    /// Per-UE DCM intent bits.
    pub dcm_bits: Vec<Bitmap>,
}

impl<T: Real> StageGame<T> {
    pub fn new(num_ues: usize, capacity: Vec<T>) -> Result<Self> {
        if num_ues == 0 || capacity.is_empty() {
            return Err(Error::Contract("stage game needs I >= 1 and M >= 1".into()));
        }
        if capacity.iter().any(|&n| n < T::zero()) {
            return Err(Error::Contract("N_m must be >= 0".into()));
        }
        let m = capacity.len();
        Ok(Self {
            num_ues,
            num_rbgs: m,
            capacity,
            dcm_bits: vec![Bitmap::zeros(m); num_ues],
        })
    }

    /// Sets the DCM intent from a token sequence over `{0..I}`.
    pub fn with_dcm(mut self, dcm: &[usize]) -> Result<Self> {
        if dcm.len() != self.num_rbgs {
            return Err(Error::Contract(format!(
                "DCM length {} != M = {}",
                dcm.len(),
                self.num_rbgs
            )));
        }
        self.dcm_bits = (1..=self.num_ues)
            .map(|i| dcm_bits_for_ue(dcm, i, self.num_ues))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    fn check_profile(&self, joint: &[Bitmap]) {
        debug_assert_eq!(joint.len(), self.num_ues);
        debug_assert!(joint.iter().all(|b| b.len() == self.num_rbgs));
    }

    /// Number of UEs selecting each RBG.
    pub fn load(&self, joint: &[Bitmap]) -> Vec<usize> {
        self.check_profile(joint);
        (0..self.num_rbgs)
            .map(|m| joint.iter().filter(|b| b.get(m)).count())
            .collect()
    }
}

/// `sum_m a_{i,m} * prod_{j != i} (1 - a_{j,m}) * N_m`: what UE `i` delivers
/// on RBGs it holds alone.
pub fn interactive_utility<T: Real>(joint: &[Bitmap], ue: usize, game: &StageGame<T>) -> T {
    game.check_profile(joint);
    let mut total = T::zero();
    for m in 0..game.num_rbgs {
        if !joint[ue].get(m) {
            continue;
        }
        let alone = joint
            .iter()
            .enumerate()
            .all(|(j, b)| j == ue || !b.get(m));
        if alone {
            total += game.capacity[m];
        }
    }
    total
}

/// Congestion potential `sum_m sum_{j=1}^{load_m} C_m(j)` with `C_m(1) = N_m`
/// and `C_m(j > 1) = 0`.
///
/// A collided RBG still contributes `N_m` here even though nothing is
/// delivered on it; the unilateral-deviation identity holds regardless.
pub fn potential_value<T: Real>(joint: &[Bitmap], game: &StageGame<T>) -> T {
    game.load(joint)
        .iter()
        .zip(&game.capacity)
        .filter(|(&load, _)| load >= 1)
        .map(|(_, &n)| n)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bm(s: &str) -> Bitmap {
        s.parse().unwrap()
    }

    #[test]
    fn dcm_bits_follow_token_equality() {
        assert_eq!(dcm_bits_for_ue(&[1, 0, 2, 1, 0], 1, 2).unwrap(), bm("10010"));
        assert_eq!(dcm_bits_for_ue(&[3, 3], 3, 3).unwrap(), bm("11"));
        for ue in 1..=3 {
            assert_eq!(dcm_bits_for_ue(&[0, 0, 0], ue, 3).unwrap(), bm("000"));
        }
        assert!(matches!(dcm_bits_for_ue(&[4, 0], 1, 3), Err(Error::Decode(_))));
        assert!(dcm_bits_for_ue(&[1, 0], 0, 3).is_err());
    }

    #[test]
    fn consistency_examples() {
        assert_eq!(consistency::<f64>(&bm("10101"), &bm("10101")).unwrap(), 1.0);
        assert_eq!(consistency::<f64>(&bm("10101"), &bm("01010")).unwrap(), 0.0);
        assert!((consistency::<f64>(&bm("10101"), &bm("10001")).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(
            consistency::<f64>(&bm("101"), &bm("10")),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn follower_utility_examples() {
        let w = UtilityWeights::default();
        assert_eq!(follower_utility(0, 0, 0.5_f64, &w), 5.0);
        assert_eq!(follower_utility(2, 2, 1.0_f64, &w), 18.0);
        assert_eq!(follower_utility(0, 3, 0.0_f64, &w), 0.0);
    }

    #[test]
    fn jfi_examples() {
        assert_eq!(jfi(&[3.0_f64, 3.0, 3.0]), 1.0);
        assert!((jfi(&[0.0_f64, 0.0, 7.0, 0.0, 0.0]) - 0.2).abs() < 1e-15);
        assert!((jfi(&[1.0_f64, 2.0, 3.0]) - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(jfi(&[0.0_f64; 4]), 1.0);
    }

    #[test]
    fn leader_utility_examples() {
        let w = UtilityWeights::default();
        assert_eq!(leader_utility(&[2.0_f64, 2.0], &[5.0, 5.0], &w).unwrap(), 7.0);
        assert_eq!(leader_utility(&[0.0_f64, 0.0], &[0.0, 0.0], &w).unwrap(), 5.0);
        assert_eq!(leader_utility(&[4.0_f64], &[3.0], &w).unwrap(), 9.0);
        assert!(leader_utility(&[1.0_f64], &[1.0, 2.0], &w).is_err());
    }

    #[test]
    fn interactive_utility_examples() {
        let g = StageGame::new(2, vec![1.0_f64]).unwrap();
        assert_eq!(interactive_utility(&[bm("1"), bm("0")], 0, &g), 1.0);
        assert_eq!(interactive_utility(&[bm("1"), bm("1")], 0, &g), 0.0);
        assert_eq!(interactive_utility(&[bm("1"), bm("1")], 1, &g), 0.0);

        let g = StageGame::new(3, vec![2.0_f64, 3.0]).unwrap();
        let joint = [bm("10"), bm("01"), bm("11")];
        for i in 0..3 {
            assert_eq!(interactive_utility(&joint, i, &g), 0.0);
        }
    }

    #[test]
    fn potential_examples() {
        let g = StageGame::new(2, vec![2.0_f64]).unwrap();
        assert_eq!(potential_value(&[bm("0"), bm("0")], &g), 0.0);
        assert_eq!(potential_value(&[bm("1"), bm("0")], &g), 2.0);
        assert_eq!(potential_value(&[bm("1"), bm("1")], &g), 2.0);
    }

    #[test]
    fn stage_game_dcm() {
        let g = StageGame::new(2, vec![1.0_f64, 1.0]).unwrap().with_dcm(&[1, 2]).unwrap();
        assert_eq!(g.dcm_bits, vec![bm("10"), bm("01")]);
    }

    fn bitmaps(m: usize) -> impl Strategy<Value = (Bitmap, Bitmap)> {
        (prop::collection::vec(any::<bool>(), m), prop::collection::vec(any::<bool>(), m))
            .prop_map(|(a, b)| (Bitmap(a), Bitmap(b)))
    }

    proptest! {
        #[test]
        fn consistency_is_symmetric_hamming((a, b) in (1usize..9).prop_flat_map(bitmaps)) {
            let c1: f64 = consistency(&a, &b).unwrap();
            let c2: f64 = consistency(&b, &a).unwrap();
            let hamming = a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count();
            prop_assert_eq!(c1, c2);
            prop_assert!((c1 - (1.0 - hamming as f64 / a.len() as f64)).abs() < 1e-12);
        }

        #[test]
        fn jfi_bounds(x in prop::collection::vec(0.0f64..100.0, 1..12)) {
            prop_assume!(x.iter().any(|&v| v > 0.0));
            let j = jfi(&x);
            let n = x.len() as f64;
            prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
            let all_equal = x.iter().all(|&v| (v - x[0]).abs() == 0.0);
            if all_equal {
                prop_assert!((j - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(j < 1.0);
            }
        }

        #[test]
        fn leader_utility_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..30.0), 1..8),
            rot in 0usize..8,
        ) {
            let w = UtilityWeights::default();
            let (rec, x): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut rec2 = rec.clone();
            let mut x2 = x.clone();
            let r = rot % rec.len();
            rec2.rotate_left(r);
            x2.rotate_left(r);
            rec2.reverse();
            x2.reverse();
            let a = leader_utility(&rec, &x, &w).unwrap();
            let b = leader_utility(&rec2, &x2, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn follower_utility_monotone(tx in 1usize..10, rec in 0usize..10, c in 0.0f64..1.0, dc in 0.0f64..0.5) {
            let w = UtilityWeights::default();
            let rec = rec.min(tx);
            let base = follower_utility(rec, tx, c, &w);
            if rec < tx {
                prop_assert!(follower_utility(rec + 1, tx, c, &w) >= base);
            }
            prop_assert!(follower_utility(rec, tx, (c + dc).min(1.0), &w) >= base);
        }
    }
}
