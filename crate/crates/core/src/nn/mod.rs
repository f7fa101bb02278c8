//! A small pre-LN causal transformer over token ids, with hand-written
//! backpropagation and a scalar value head.
//!
//! Every op runs one row (sequence position) at a time, and row `p` depends
//! only on rows `<= p`. Extending a cached prefix therefore produces exactly
//! the same numbers as running the full sequence, which keeps sampled and
//! re-scored log-probabilities bit-identical.

mod optim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, cosine_rate, Adam, Direction, Optimizer, OptimizerKind};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;

/// Network shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub value_hidden: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("policy.{field}"), reason));
        if self.vocab == 0 {
            return bad("vocab", "must be >= 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model", "must be a positive multiple of n_heads");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model", "must be even (sinusoidal positions)");
        }
        if self.d_ff == 0 || self.value_hidden == 0 {
            return bad("d_ff", "hidden widths must be >= 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
    vw1: usize,
    vb1: usize,
    vw2: usize,
    vb2: usize,
    /// Start of the value head; everything before it is the policy trunk.
    value_start: usize,
    len: usize,
}

impl Layout {
    fn new(s: &ModelSpec) -> Self {
        let (d, f, v, h) = (s.d_model, s.d_ff, s.vocab, s.value_hidden);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(v * d);
        let layers = (0..s.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let out_w = take(v * d);
        let out_b = take(v);
        let value_start = take(0);
        let vw1 = take(d * h);
        let vb1 = take(h);
        let vw2 = take(h);
        let vb2 = take(1);
        let len = vb2 + 1;
        Self {
            tok_emb,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            vw1,
            vb1,
            vw2,
            vb2,
            value_start,
            len,
        }
    }
}

/// Parameters of the transformer and its value head in one flat vector.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    spec: ModelSpec,
    layout: Layout,
    pub data: Vec<T>,
}

impl<T: Real> PartialEq for Transformer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.data == other.data
    }
}

#[derive(Clone, Debug, Default)]
struct LayerActs<T> {
    x_in: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention weights, row `p` stores `n_heads * (p + 1)` entries.
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    a2: Vec<T>,
    f_pre: Vec<T>,
    f_act: Vec<T>,
}

/// Cached forward activations of one token sequence.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    tokens: Vec<usize>,
    layers: Vec<LayerActs<T>>,
    x_out: Vec<T>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    /// Final normalized hidden states, one row per position.
    h: Vec<T>,
}

impl<T> Activations<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

/// Gradient seeds on the logits of one position: `(token, dL/dz_token)`.
#[derive(Clone, Debug, Default)]
pub struct LogitGrad<T> {
    pub pos: usize,
    pub grads: Vec<(usize, T)>,
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = x W + b` with `W` stored `[in][out]`.
#[inline]
fn linear_row<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, &w[i * n..(i + 1) * n], out);
        }
    }
}

/// Accumulates `dW += x^T dy`, `db += dy` and returns `dx = W dy`.
#[inline]
fn linear_row_back<T: Real>(x: &[T], dy: &[T], w: &[T], dw: &mut [T], db: &mut [T], dx: &mut [T]) {
    let n = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        dx[i] += dot(row, dy);
        axpy(xi, dy, &mut dw[i * n..(i + 1) * n]);
    }
    for (b, &g) in db.iter_mut().zip(dy) {
        *b += g;
    }
}

/// Layer norm of one row; returns `(xhat, rstd)` and writes `g * xhat + b`.
#[inline]
fn layernorm_row<T: Real>(x: &[T], g: &[T], b: &[T], xhat: &mut [T], out: &mut [T]) -> T {
    let n = T::of_usize(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = g[i] * xhat[i] + b[i];
    }
    rstd
}

#[inline]
fn layernorm_row_back<T: Real>(dy: &[T], xhat: &[T], rstd: T, g: &[T], dg: &mut [T], db: &mut [T], dx: &mut [T]) {
    let n = T::of_usize(dy.len());
    let mut mean_d = T::zero();
    let mut mean_dx = T::zero();
    for i in 0..dy.len() {
        let d = dy[i] * g[i];
        mean_d += d;
        mean_dx += d * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for i in 0..dy.len() {
        let d = dy[i] * g[i];
        dx[i] += rstd * (d - mean_d - xhat[i] * mean_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

/// Sinusoidal position code added to row `pos`.
fn add_position<T: Real>(pos: usize, row: &mut [T]) {
    let d = row.len();
    for i in 0..d / 2 {
        let freq = (10_000f64).powf(-((2 * i) as f64) / d as f64);
        let a = pos as f64 * freq;
        row[2 * i] += T::of(a.sin());
        row[2 * i + 1] += T::of(a.cos());
    }
}

fn rows<T>(v: &[T], width: usize, r: usize) -> &[T] {
    &v[r * width..(r + 1) * width]
}

/// Offset of attention-weight row `p` in the packed triangular store.
#[inline]
fn prob_offset(heads: usize, p: usize) -> usize {
    heads * p * (p + 1) / 2
}

impl<T: Real> Transformer<T> {
    /// Small-uniform initialization; the value head's output layer starts at 0.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut data = vec![T::zero(); layout.len];
        let (d, f, h) = (spec.d_model, spec.d_ff, spec.value_hidden);
        let mut fill = |data: &mut [T], at: usize, n: usize, scale: f64| {
            for v in &mut data[at..at + n] {
                *v = T::of(rng.gen_range(-scale..scale));
            }
        };
        fill(&mut data, layout.tok_emb, spec.vocab * d, 0.5);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        for l in &layout.layers {
            for (at, n, s) in [
                (l.wq, d * d, sd),
                (l.wk, d * d, sd),
                (l.wv, d * d, sd),
                (l.wo, d * d, sd),
                (l.w1, d * f, sd),
                (l.w2, f * d, sf),
            ] {
                fill(&mut data, at, n, s);
            }
            data[l.ln1_g..l.ln1_g + d].fill(T::one());
            data[l.ln2_g..l.ln2_g + d].fill(T::one());
        }
        data[layout.lnf_g..layout.lnf_g + d].fill(T::one());
        fill(&mut data, layout.out_w, spec.vocab * d, sd);
        fill(&mut data, layout.vw1, d * h, sd);
        Ok(Self { spec, layout, data })
    }

    /// Rebuilds a model from a spec and a flat parameter vector.
    pub fn from_parts(spec: ModelSpec, data: Vec<T>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if data.len() != layout.len {
            return Err(Error::Serialization(format!(
                "parameter vector has {} entries, spec needs {}",
                data.len(),
                layout.len
            )));
        }
        Ok(Self { spec, layout, data })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    /// Index range of the value head inside `data`.
    pub fn value_range(&self) -> std::ops::Range<usize> {
        self.layout.value_start..self.layout.len
    }

    /// Index range of the token-output layer inside `data`.
    pub fn output_range(&self) -> std::ops::Range<usize> {
        self.layout.out_w..self.layout.value_start
    }

    /// Zeroes the token-output layer so every logit is 0.
    pub fn zero_output_head(&mut self) {
        let r = self.output_range();
        self.data[r].fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    fn p(&self, at: usize, n: usize) -> &[T] {
        &self.data[at..at + n]
    }

    pub fn start(&self) -> Activations<T> {
        Activations {
            tokens: Vec::new(),
            layers: vec![LayerActs::default(); self.spec.n_layers],
            x_out: Vec::new(),
            xhat_f: Vec::new(),
            rstd_f: Vec::new(),
            h: Vec::new(),
        }
    }

    /// Runs the full sequence from scratch.
    pub fn forward(&self, tokens: &[usize]) -> Activations<T> {
        let mut acts = self.start();
        self.extend(&mut acts, tokens);
        acts
    }

    /// Appends `tokens` to a cached prefix.
    pub fn extend(&self, acts: &mut Activations<T>, tokens: &[usize]) {
        for &tok in tokens {
            self.push_row(acts, tok);
        }
    }

    fn push_row(&self, acts: &mut Activations<T>, tok: usize) {
        assert!(tok < self.spec.vocab, "token {tok} outside vocabulary");
        let s = &self.spec;
        let (d, f, nh, dh) = (s.d_model, s.d_ff, s.n_heads, s.head_dim());
        let p = acts.tokens.len();
        acts.tokens.push(tok);
        let scale = T::one() / T::of_usize(dh).sqrt();

        let mut x: Vec<T> = self.p(self.layout.tok_emb + tok * d, d).to_vec();
        add_position(p, &mut x);

        let mut tmp = vec![T::zero(); d];
        let mut a = vec![T::zero(); d];
        for (li, lo) in self.layout.layers.iter().enumerate() {
            let la = &mut acts.layers[li];
            la.x_in.extend_from_slice(&x);

            let rstd = layernorm_row(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), &mut tmp, &mut a);
            la.xhat1.extend_from_slice(&tmp);
            la.rstd1.push(rstd);
            la.a1.extend_from_slice(&a);

            let mut q = vec![T::zero(); d];
            let mut k = vec![T::zero(); d];
            let mut v = vec![T::zero(); d];
            linear_row(&a, self.p(lo.wq, d * d), self.p(lo.bq, d), &mut q);
            linear_row(&a, self.p(lo.wk, d * d), self.p(lo.bk, d), &mut k);
            linear_row(&a, self.p(lo.wv, d * d), self.p(lo.bv, d), &mut v);
            la.q.extend_from_slice(&q);
            la.k.extend_from_slice(&k);
            la.v.extend_from_slice(&v);

            let mut att = vec![T::zero(); d];
            for hh in 0..nh {
                let hs = hh * dh..(hh + 1) * dh;
                let qh = &q[hs.clone()];
                let mut sc: Vec<T> = (0..=p)
                    .map(|j| dot(qh, &la.k[j * d + hs.start..j * d + hs.end]) * scale)
                    .collect();
                let mx = sc.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in &mut sc {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in &mut sc {
                    *v /= z;
                }
                let out = &mut att[hs.clone()];
                for (j, &w) in sc.iter().enumerate() {
                    axpy(w, &la.v[j * d + hs.start..j * d + hs.end], out);
                }
                la.probs.extend_from_slice(&sc);
            }
            la.att.extend_from_slice(&att);

            linear_row(&att, self.p(lo.wo, d * d), self.p(lo.bo, d), &mut tmp);
            for i in 0..d {
                x[i] += tmp[i];
            }
            la.x_mid.extend_from_slice(&x);

            let rstd = layernorm_row(&x, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), &mut tmp, &mut a);
            la.xhat2.extend_from_slice(&tmp);
            la.rstd2.push(rstd);
            la.a2.extend_from_slice(&a);

            let mut hid = vec![T::zero(); f];
            linear_row(&a, self.p(lo.w1, d * f), self.p(lo.b1, f), &mut hid);
            la.f_pre.extend_from_slice(&hid);
            for v in &mut hid {
                *v = gelu(*v);
            }
            la.f_act.extend_from_slice(&hid);
            linear_row(&hid, self.p(lo.w2, f * d), self.p(lo.b2, d), &mut tmp);
            for i in 0..d {
                x[i] += tmp[i];
            }
        }
        acts.x_out.extend_from_slice(&x);
        let rstd = layernorm_row(
            &x,
            self.p(self.layout.lnf_g, d),
            self.p(self.layout.lnf_b, d),
            &mut tmp,
            &mut a,
        );
        acts.xhat_f.extend_from_slice(&tmp);
        acts.rstd_f.push(rstd);
        acts.h.extend_from_slice(&a);
    }

    /// Final hidden state at `pos`.
    pub fn hidden<'a>(&self, acts: &'a Activations<T>, pos: usize) -> &'a [T] {
        rows(&acts.h, self.spec.d_model, pos)
    }

    /// Logits at `pos` for the listed tokens only.
    pub fn logits(&self, acts: &Activations<T>, pos: usize, tokens: &[usize]) -> Vec<T> {
        let d = self.spec.d_model;
        let h = self.hidden(acts, pos);
        tokens
            .iter()
            .map(|&t| dot(self.p(self.layout.out_w + t * d, d), h) + self.data[self.layout.out_b + t])
            .collect()
    }

    /// Value head on a (detached) hidden state; also returns its hidden layer.
    fn value_parts(&self, h: &[T]) -> (Vec<T>, T) {
        let (d, vh) = (self.spec.d_model, self.spec.value_hidden);
        let mut z = vec![T::zero(); vh];
        linear_row(h, self.p(self.layout.vw1, d * vh), self.p(self.layout.vb1, vh), &mut z);
        for v in &mut z {
            *v = v.tanh();
        }
        let out = dot(&z, self.p(self.layout.vw2, vh)) + self.data[self.layout.vb2];
        (z, out)
    }

    pub fn value_of_hidden(&self, h: &[T]) -> T {
        self.value_parts(h).1
    }

    /// Accumulates `dv * dV/dtheta` into the value-head slice of `grads`.
    /// No gradient reaches the trunk.
    pub fn value_backward(&self, h: &[T], dv: T, grads: &mut [T]) {
        let (d, vh) = (self.spec.d_model, self.spec.value_hidden);
        let (z, _) = self.value_parts(h);
        let lay = &self.layout;
        grads[lay.vb2] += dv;
        let mut dz = vec![T::zero(); vh];
        for j in 0..vh {
            grads[lay.vw2 + j] += dv * z[j];
            dz[j] = dv * self.data[lay.vw2 + j] * (T::one() - z[j] * z[j]);
        }
        for i in 0..d {
            axpy(h[i], &dz, &mut grads[lay.vw1 + i * vh..lay.vw1 + (i + 1) * vh]);
        }
        for j in 0..vh {
            grads[lay.vb1 + j] += dz[j];
        }
    }

    /// Backpropagates logit gradients through the trunk into `grads`.
    pub fn backward(&self, acts: &Activations<T>, seeds: &[LogitGrad<T>], grads: &mut [T]) {
        assert_eq!(grads.len(), self.data.len());
        let s = &self.spec;
        let (d, f, nh, dh) = (s.d_model, s.d_ff, s.n_heads, s.head_dim());
        let n = acts.len();
        if n == 0 || seeds.iter().all(|sd| sd.grads.is_empty()) {
            return;
        }
        let lay = &self.layout;
        let last = seeds.iter().map(|sd| sd.pos).max().unwrap_or(0);
        let n = n.min(last + 1);

        // dL/dh at each position.
        let mut dx = vec![T::zero(); n * d];
        for sd in seeds {
            let h = rows(&acts.h, d, sd.pos);
            let dh_row = &mut dx[sd.pos * d..(sd.pos + 1) * d];
            for &(t, g) in &sd.grads {
                axpy(g, self.p(lay.out_w + t * d, d), dh_row);
                axpy(g, h, &mut grads[lay.out_w + t * d..lay.out_w + (t + 1) * d]);
                grads[lay.out_b + t] += g;
            }
        }

        // Final layer norm.
        let mut dres = vec![T::zero(); n * d];
        {
            let (gs, rest) = grads.split_at_mut(lay.lnf_b);
            let dg = &mut gs[lay.lnf_g..lay.lnf_g + d];
            let db = &mut rest[..d];
            for p in 0..n {
                layernorm_row_back(
                    &dx[p * d..(p + 1) * d],
                    rows(&acts.xhat_f, d, p),
                    acts.rstd_f[p],
                    self.p(lay.lnf_g, d),
                    dg,
                    db,
                    &mut dres[p * d..(p + 1) * d],
                );
            }
        }

        let scale = T::one() / T::of_usize(dh).sqrt();
        for (li, lo) in lay.layers.iter().enumerate().rev() {
            let la = &acts.layers[li];

            // MLP: x_out = x_mid + W2 gelu(W1 LN2(x_mid)).
            let mut d_mid = dres.clone();
            let mut da2 = vec![T::zero(); n * d];
            {
                let mut dact = vec![T::zero(); f];
                for p in 0..n {
                    dact.iter_mut().for_each(|v| *v = T::zero());
                    let dy = &dres[p * d..(p + 1) * d];
                    let (g_lo, g_hi) = grads.split_at_mut(lo.b2);
                    linear_row_back(
                        rows(&la.f_act, f, p),
                        dy,
                        self.p(lo.w2, f * d),
                        &mut g_lo[lo.w2..lo.w2 + f * d],
                        &mut g_hi[..d],
                        &mut dact,
                    );
                    let pre = rows(&la.f_pre, f, p);
                    for j in 0..f {
                        dact[j] *= gelu_grad(pre[j]);
                    }
                    let (g_lo, g_hi) = grads.split_at_mut(lo.b1);
                    linear_row_back(
                        rows(&la.a2, d, p),
                        &dact,
                        self.p(lo.w1, d * f),
                        &mut g_lo[lo.w1..lo.w1 + d * f],
                        &mut g_hi[..f],
                        &mut da2[p * d..(p + 1) * d],
                    );
                }
                let (g_lo, g_hi) = grads.split_at_mut(lo.ln2_b);
                for p in 0..n {
                    layernorm_row_back(
                        &da2[p * d..(p + 1) * d],
                        rows(&la.xhat2, d, p),
                        la.rstd2[p],
                        self.p(lo.ln2_g, d),
                        &mut g_lo[lo.ln2_g..lo.ln2_g + d],
                        &mut g_hi[..d],
                        &mut d_mid[p * d..(p + 1) * d],
                    );
                }
            }

            // Attention: x_mid = x_in + Wo attn(LN1(x_in)).
            let mut d_in = d_mid.clone();
            let mut datt = vec![T::zero(); n * d];
            {
                let (g_lo, g_hi) = grads.split_at_mut(lo.bo);
                for p in 0..n {
                    linear_row_back(
                        rows(&la.att, d, p),
                        &d_mid[p * d..(p + 1) * d],
                        self.p(lo.wo, d * d),
                        &mut g_lo[lo.wo..lo.wo + d * d],
                        &mut g_hi[..d],
                        &mut datt[p * d..(p + 1) * d],
                    );
                }
            }
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dprob = Vec::new();
            for p in 0..n {
                let base = prob_offset(nh, p);
                for hh in 0..nh {
                    let hs = hh * dh..(hh + 1) * dh;
                    let pr = &la.probs[base + hh * (p + 1)..base + (hh + 1) * (p + 1)];
                    let dout = &datt[p * d + hs.start..p * d + hs.end];
                    dprob.clear();
                    let mut acc = T::zero();
                    for j in 0..=p {
                        let vj = &la.v[j * d + hs.start..j * d + hs.end];
                        let dp = dot(dout, vj);
                        acc += pr[j] * dp;
                        dprob.push(dp);
                        axpy(pr[j], dout, &mut dv[j * d + hs.start..j * d + hs.end]);
                    }
                    let qp = &la.q[p * d + hs.start..p * d + hs.end];
                    for j in 0..=p {
                        let ds = pr[j] * (dprob[j] - acc) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &la.k[j * d + hs.start..j * d + hs.end];
                        axpy(ds, kj, &mut dq[p * d + hs.start..p * d + hs.end]);
                        axpy(ds, qp, &mut dk[j * d + hs.start..j * d + hs.end]);
                    }
                }
            }
            let mut da1 = vec![T::zero(); n * d];
            for (w, b, dy) in [(lo.wq, lo.bq, &dq), (lo.wk, lo.bk, &dk), (lo.wv, lo.bv, &dv)] {
                let (g_lo, g_hi) = grads.split_at_mut(b);
                for p in 0..n {
                    linear_row_back(
                        rows(&la.a1, d, p),
                        &dy[p * d..(p + 1) * d],
                        self.p(w, d * d),
                        &mut g_lo[w..w + d * d],
                        &mut g_hi[..d],
                        &mut da1[p * d..(p + 1) * d],
                    );
                }
            }
            {
                let (g_lo, g_hi) = grads.split_at_mut(lo.ln1_b);
                for p in 0..n {
                    layernorm_row_back(
                        &da1[p * d..(p + 1) * d],
                        rows(&la.xhat1, d, p),
                        la.rstd1[p],
                        self.p(lo.ln1_g, d),
                        &mut g_lo[lo.ln1_g..lo.ln1_g + d],
                        &mut g_hi[..d],
                        &mut d_in[p * d..(p + 1) * d],
                    );
                }
            }
            dres = d_in;
        }

        for p in 0..n {
            let t = acts.tokens[p];
            axpy(
                T::one(),
                &dres[p * d..(p + 1) * d],
                &mut grads[lay.tok_emb + t * d..lay.tok_emb + (t + 1) * d],
            );
        }
    }
}

/// Softmax of `logits / temperature`, returned with its log.
pub fn masked_softmax<T: Real>(logits: &[T], temperature: T) -> (Vec<T>, Vec<T>) {
    let scaled: Vec<T> = logits.iter().map(|&z| z / temperature).collect();
    let mx = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = mx + scaled.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
    let logp: Vec<T> = scaled.iter().map(|&z| z - lse).collect();
    let p = logp.iter().map(|&l| l.exp()).collect();
    (p, logp)
}

/// Entropy of a distribution given its probabilities and log-probabilities.
pub fn entropy<T: Real>(p: &[T], logp: &[T]) -> T {
    -p.iter().zip(logp).map(|(&a, &b)| if a > T::zero() { a * b } else { T::zero() }).sum::<T>()
}
