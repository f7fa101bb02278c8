use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::scalar::Real;

/// Fully connected network with tanh hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<T: Real> {
    pub sizes: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Mlp<T> {
    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases; the output layer is
    /// scaled by `out_scale`.
    pub fn init(sizes: &[usize], out_scale: f64, rng: &mut Rng) -> Self {
        let mut data = Vec::new();
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt() * if l == last { out_scale } else { 1.0 };
            data.extend((0..w[0] * w[1]).map(|_| T::of(rng.gen_range(-bound..=bound))));
            data.extend((0..w[1]).map(|_| T::zero()));
        }
        Self {
            sizes: sizes.to_vec(),
            data,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    /// Layer activations, input first, output last.
    pub fn forward(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let n = self.sizes.len() - 1;
        for l in 0..n {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.data[off..off + i * o];
            let b = &self.data[off + i * o..off + i * o + o];
            let inp = &acts[l];
            let out: Vec<T> = (0..o)
                .map(|r| {
                    let z = w[r * i..(r + 1) * i].iter().zip(inp).map(|(&a, &b)| a * b).sum::<T>() + b[r];
                    if l + 1 < n {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
            off += i * o + o;
        }
        acts
    }

    /// Accumulates `d(out . dout)/dparams` into `grads`.
    pub fn backward(&self, acts: &[Vec<T>], dout: &[T], grads: &mut [T]) {
        let n = self.sizes.len() - 1;
        let mut offs = Vec::with_capacity(n);
        let mut off = 0;
        for l in 0..n {
            offs.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dout.to_vec();
        for l in (0..n).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < n {
                for (d, &a) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= T::one() - a * a;
                }
            }
            let off = offs[l];
            let inp = &acts[l];
            for r in 0..o {
                for c in 0..i {
                    grads[off + r * i + c] += delta[r] * inp[c];
                }
                grads[off + i * o + r] += delta[r];
            }
            if l > 0 {
                let w = &self.data[off..off + i * o];
                delta = (0..i).map(|c| (0..o).map(|r| w[r * i + c] * delta[r]).sum()).collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(2);
        let net = Mlp::<f64>::init(&[4, 5, 3], 1.0, &mut rng);
        let x = [0.3, -0.7, 0.1, 0.9];
        let dout = [0.5, -1.0, 2.0];
        let f = |n: &Mlp<f64>| n.forward(&x).last().unwrap().iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>();
        let mut g = vec![0.0; net.num_params()];
        net.backward(&net.forward(&x), &dout, &mut g);
        for k in 0..net.num_params() {
            let mut p = net.clone();
            p.data[k] += 1e-6;
            let up = f(&p);
            p.data[k] -= 2e-6;
            let num = (up - f(&p)) / 2e-6;
            assert!((num - g[k]).abs() < 1e-7, "param {k}: {num} vs {}", g[k]);
        }
    }
}
