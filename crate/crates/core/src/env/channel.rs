//! Markov channel states and BS-side CSI estimation.

use rand::Rng as _;

use crate::rng::Rng;

/// Stationary distribution of a row-stochastic matrix.
///
/// Iterates the lazy chain `(I + P) / 2`, which shares `P`'s stationary
/// law and is aperiodic. Reducible chains return the limit reached from the
/// uniform start.
pub fn stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..100_000 {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in p.iter().enumerate() {
            for (j, &pij) in row.iter().enumerate() {
                next[j] += pi[i] * pij;
            }
        }
        let mut delta = 0.0_f64;
        for j in 0..n {
            let v = 0.5 * (pi[j] + next[j]);
            delta = delta.max((v - pi[j]).abs());
            pi[j] = v;
        }
        if delta < 1e-15 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter().map(|v| v / s).collect()
}

/// Draws an index from a discrete distribution.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative value.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// One Markov transition from `state`.
pub fn transition(p: &[Vec<f64>], state: usize, rng: &mut Rng) -> usize {
    sample_index(&p[state], rng)
}

/// BS estimate of a true state: correct with probability `1 - err`,
/// otherwise a uniformly drawn different state.
pub fn estimate(true_state: usize, num_states: usize, err: f64, rng: &mut Rng) -> usize {
    let flip = rng.gen::<f64>() < err;
    if !flip || num_states < 2 {
        return true_state;
    }
    let k = rng.gen_range(0..num_states - 1);
    if k >= true_state {
        k + 1
    } else {
        k
    }
}

/// Channel change period in TTIs for a duration in milliseconds.
pub fn period_ttis(ms: f64, tti_s: f64) -> usize {
    ((ms / (tti_s * 1e3)).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn stationary_of_default_matrix_is_uniform() {
        let p = vec![vec![0.8, 0.2, 0.0], vec![0.2, 0.6, 0.2], vec![0.0, 0.2, 0.8]];
        for v in stationary(&p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_of_asymmetric_chain() {
        // Two-state chain: pi = (b, a) / (a + b).
        let (a, b) = (0.3, 0.1);
        let pi = stationary(&[vec![1.0 - a, a], vec![b, 1.0 - b]]);
        assert!((pi[0] - b / (a + b)).abs() < 1e-12);
        assert!((pi[1] - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn estimate_never_matches_when_always_wrong() {
        let mut rng = Rng::seed_from_u64(3);
        for s in 0..2 {
            for _ in 0..1000 {
                assert_ne!(estimate(s, 2, 1.0, &mut rng), s);
            }
        }
    }

    #[test]
    fn period_conversion() {
        assert_eq!(period_ttis(1.0, 5e-3), 1);
        assert_eq!(period_ttis(10.0, 5e-3), 2);
        assert_eq!(period_ttis(50.0, 5e-3), 10);
    }
}
