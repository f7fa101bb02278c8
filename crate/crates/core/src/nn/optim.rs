use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    fn sign<T: Real>(self) -> T {
        match self {
            Direction::Ascend => T::one(),
            Direction::Descend => -T::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// Plain or adaptive-moment steps on a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer<T> {
    Sgd,
    Adam(Adam<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(n)),
        }
    }

    /// Moves `params` along `grads` (ascent) or against them (descent),
    /// touching only indices in `range`.
    pub fn step(&mut self, params: &mut [T], grads: &[T], rate: f64, dir: Direction, range: std::ops::Range<usize>) {
        let s: T = dir.sign();
        let lr = T::of(rate);
        match self {
            Optimizer::Sgd => {
                for i in range {
                    params[i] += s * lr * grads[i];
                }
            }
            Optimizer::Adam(a) => {
                a.t += 1;
                let (b1, b2) = (T::of(a.beta1), T::of(a.beta2));
                let c1 = T::one() - T::of(a.beta1.powi(a.t as i32));
                let c2 = T::one() - T::of(a.beta2.powi(a.t as i32));
                let eps = T::of(a.eps);
                for i in range {
                    let g = grads[i];
                    a.m[i] = b1 * a.m[i] + (T::one() - b1) * g;
                    a.v[i] = b2 * a.v[i] + (T::one() - b2) * g * g;
                    let mh = a.m[i] / c1;
                    let vh = a.v[i] / c2;
                    params[i] += s * lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub fn cosine_rate(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let x = (step.min(total) as f64) / total as f64;
    let lo = base * floor;
    lo + 0.5 * (base - lo) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Rescales `grads[range]` to norm at most `max_norm`; returns the norm before
/// clipping. Non-positive `max_norm` disables clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], range: std::ops::Range<usize>, max_norm: f64) -> f64 {
    let norm = grads[range.clone()]
        .iter()
        .map(|&g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in &mut grads[range] {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut o = Optimizer::new(kind, 2);
            o.step(&mut p, &[0.0, 0.0], 0.1, Direction::Ascend, 0..2);
            assert_eq!(p, vec![1.0, -2.0]);
        }
    }

    #[test]
    fn ascent_increases_concave_quadratic() {
        // f(x) = -(x - 3)^2
        let f = |x: f64| -(x - 3.0) * (x - 3.0);
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = vec![0.0f64];
            let mut o = Optimizer::new(kind, 1);
            let g = vec![-2.0 * (p[0] - 3.0)];
            let before = f(p[0]);
            o.step(&mut p, &g, 0.1, Direction::Ascend, 0..1);
            assert!(f(p[0]) > before);
        }
    }

    #[test]
    fn rate_scales_step() {
        let g = vec![0.3f64, -0.4];
        let mut a = vec![0.0; 2];
        let mut b = vec![0.0; 2];
        Optimizer::new(OptimizerKind::Sgd, 2).step(&mut a, &g, 0.2, Direction::Ascend, 0..2);
        Optimizer::new(OptimizerKind::Sgd, 2).step(&mut b, &g, 0.1, Direction::Ascend, 0..2);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nb / na - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_rate(1.0, 0.1, 0, 10), 1.0);
        assert!((cosine_rate(1.0, 0.1, 10, 10) - 0.1).abs() < 1e-12);
        assert!((cosine_rate(1.0, 0.0, 5, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0..2, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
