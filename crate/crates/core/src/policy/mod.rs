//! Autoregressive token policies with per-position admissibility masks.

mod vocab;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use vocab::{PromptSeq, Role, Schema, Vocab, ACT, BUFFER_BUCKETS, NULL, ROLE_FOLLOWER, ROLE_LEADER, SEP};

use crate::env::{EnvConfig, UeAction};
use crate::error::{Error, Result};
use crate::game::Bitmap;
use crate::nn::{masked_softmax, Activations, ModelSpec, Transformer};
use crate::rng::Rng;
use crate::scalar::Real;

/// Network size knobs; the vocabulary size comes from the environment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub value_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            value_hidden: 64,
        }
    }
}

impl PolicyConfig {
    pub fn model_spec(&self, vocab: usize) -> ModelSpec {
        ModelSpec {
            vocab,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            value_hidden: self.value_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec(1).validate()
    }
}

/// A decoded action with its per-token log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSeq<T> {
    pub role: Role,
    pub tokens: Vec<usize>,
    pub token_logprobs: Vec<T>,
    pub logprob: T,
}

/// A decoded action plus what the trainer needs from the same forward pass.
#[derive(Clone, Debug)]
pub struct Decoded<T> {
    pub action: ActionSeq<T>,
    /// Masked distribution at each action position.
    pub dists: Vec<Vec<T>>,
    /// Value-head estimate for the prompt.
    pub value: T,
}

/// The masked distribution at one action position.
#[derive(Clone, Debug)]
pub struct PosDist<T> {
    pub mask: Vec<usize>,
    /// Index into `mask` of the token taken.
    pub chosen: usize,
    pub p: Vec<T>,
    pub logp: Vec<T>,
}

/// Forward pass over `prompt ++ action` with every position's distribution.
#[derive(Clone, Debug)]
pub struct Scored<T> {
    pub acts: Activations<T>,
    pub prompt_len: usize,
    pub positions: Vec<PosDist<T>>,
}

impl<T: Real> Scored<T> {
    pub fn logprob(&self) -> T {
        self.positions.iter().map(|d| d.logp[d.chosen]).sum()
    }
}

/// A parameter bundle: transformer trunk, token head and value head.
#[derive(Clone, Debug)]
pub struct TokenPolicy<T> {
    pub schema: Schema,
    pub model: Transformer<T>,
}

impl<T: Real> PartialEq for TokenPolicy<T> {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.model == other.model
    }
}

fn sample<T: Real>(p: &[T], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk.to_f64_lossy();
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&v| v > T::zero()).unwrap_or(0)
}

/// Lowest index among the maxima.
fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for k in 1..z.len() {
        if z[k] > z[best] {
            best = k;
        }
    }
    best
}

impl<T: Real> TokenPolicy<T> {
    pub fn new(env: &EnvConfig, cfg: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        let schema = Schema::from_env(env);
        let model = Transformer::init(cfg.model_spec(schema.vocab.size()), rng)?;
        Ok(Self { schema, model })
    }

    pub fn cast<U: Real>(&self) -> TokenPolicy<U> {
        TokenPolicy {
            schema: self.schema.clone(),
            model: self.model.cast(),
        }
    }

    fn check_prompt(&self, prompt: &PromptSeq, role: Role) -> Result<()> {
        if prompt.role != role || prompt.tokens.last() != Some(&ACT) {
            return Err(Error::Contract(format!("prompt is not a {role:?} prompt")));
        }
        Ok(())
    }

    fn decode(&self, prompt: &PromptSeq, role: Role, i_t: usize, temperature: T, mut pick: impl FnMut(&[T], &[T]) -> usize) -> Result<Decoded<T>> {
        self.check_prompt(prompt, role)?;
        if !(temperature > T::zero()) {
            return Err(Error::Contract("temperature must be > 0".into()));
        }
        let masks = self.schema.pag_mask(role, i_t)?;
        let mut acts = self.model.forward(&prompt.tokens);
        let value = self.model.value_of_hidden(self.model.hidden(&acts, acts.len() - 1));
        let mut tokens = Vec::with_capacity(masks.len());
        let mut lps = Vec::with_capacity(masks.len());
        let mut dists = Vec::with_capacity(masks.len());
        for (j, mask) in masks.iter().enumerate() {
            if j > 0 {
                self.model.extend(&mut acts, &tokens[j - 1..j]);
            }
            let z = self.model.logits(&acts, acts.len() - 1, mask);
            let (p, logp) = masked_softmax(&z, temperature);
            let k = pick(&z, &p);
            tokens.push(mask[k]);
            lps.push(logp[k]);
            dists.push(p);
        }
        let logprob = lps.iter().copied().sum();
        Ok(Decoded {
            action: ActionSeq {
                role,
                tokens,
                token_logprobs: lps,
                logprob,
            },
            dists,
            value,
        })
    }

    /// Samples an action and also returns the per-position distributions and
    /// the prompt's value estimate.
    pub fn act(&self, prompt: &PromptSeq, role: Role, i_t: usize, temperature: T, rng: &mut Rng) -> Result<Decoded<T>> {
        self.decode(prompt, role, i_t, temperature, |_, p| sample(p, rng))
    }

    /// Greedy counterpart of [`TokenPolicy::act`].
    pub fn act_greedy(&self, prompt: &PromptSeq, role: Role, i_t: usize) -> Result<Decoded<T>> {
        self.decode(prompt, role, i_t, T::one(), |z, _| argmax(z))
    }

    /// Samples an action token by token from the masked, tempered softmax.
    pub fn generate(&self, prompt: &PromptSeq, role: Role, i_t: usize, temperature: T, rng: &mut Rng) -> Result<ActionSeq<T>> {
        Ok(self.act(prompt, role, i_t, temperature, rng)?.action)
    }

    /// Per-position argmax of the masked logits; ties go to the lowest id.
    /// Log-probabilities are reported at temperature 1.
    pub fn greedy(&self, prompt: &PromptSeq, role: Role, i_t: usize) -> Result<ActionSeq<T>> {
        Ok(self.act_greedy(prompt, role, i_t)?.action)
    }

    /// Runs `prompt ++ action` once and returns each position's distribution.
    pub fn score(&self, prompt: &PromptSeq, action: &[usize], role: Role, i_t: usize, temperature: T) -> Result<Scored<T>> {
        self.check_prompt(prompt, role)?;
        let masks = self.schema.pag_mask(role, i_t)?;
        if action.len() != masks.len() {
            return Err(Error::Contract(format!(
                "action has {} tokens, expected {}",
                action.len(),
                masks.len()
            )));
        }
        let mut seq = prompt.tokens.clone();
        seq.extend_from_slice(&action[..action.len() - 1]);
        let acts = self.model.forward(&seq);
        let n = prompt.tokens.len();
        let positions = masks
            .into_iter()
            .enumerate()
            .map(|(j, mask)| {
                let chosen = mask.iter().position(|&t| t == action[j]).ok_or_else(|| {
                    Error::Contract(format!(
                        "token {} at action position {j} is outside the admissible set",
                        self.schema.vocab.name(action[j])
                    ))
                })?;
                let z = self.model.logits(&acts, n - 1 + j, &mask);
                let (p, logp) = masked_softmax(&z, temperature);
                Ok(PosDist { mask, chosen, p, logp })
            })
            .collect::<Result<_>>()?;
        Ok(Scored {
            acts,
            prompt_len: n,
            positions,
        })
    }

    /// Sum of per-token masked log-probabilities of `action`.
    pub fn action_logprob(&self, prompt: &PromptSeq, action: &[usize], role: Role, i_t: usize, temperature: T) -> Result<T> {
        Ok(self.score(prompt, action, role, i_t, temperature)?.logprob())
    }

    /// Log-probability of `action` under a softmax over whole sequences:
    /// `exp(sum log P)` renormalized over every admissible action.
    pub fn exact_eq13(&self, prompt: &PromptSeq, action: &[usize], role: Role, i_t: usize, temperature: T) -> Result<T> {
        let target = self.action_logprob(prompt, action, role, i_t, temperature)?;
        let all = self.enumerate_logprobs(prompt, role, i_t, temperature)?;
        let mx = all.iter().map(|(_, l)| *l).fold(T::neg_infinity(), T::max);
        let lse = mx + all.iter().map(|(_, l)| (*l - mx).exp()).sum::<T>().ln();
        Ok(target - lse)
    }

    /// Every admissible action with its sequence log-probability.
    pub fn enumerate_logprobs(&self, prompt: &PromptSeq, role: Role, i_t: usize, temperature: T) -> Result<Vec<(Vec<usize>, T)>> {
        const LIMIT: f64 = 200_000.0;
        self.check_prompt(prompt, role)?;
        let masks = self.schema.pag_mask(role, i_t)?;
        let count: f64 = masks.iter().map(|m| m.len() as f64).product();
        if count > LIMIT {
            return Err(Error::Size {
                requested: format!("{count} action sequences"),
                limit: format!("{LIMIT}"),
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        let acts = self.model.forward(&prompt.tokens);
        self.enumerate_from(&acts, &masks, temperature, &mut Vec::new(), T::zero(), &mut out);
        Ok(out)
    }

    fn enumerate_from(&self, acts: &Activations<T>, masks: &[Vec<usize>], temperature: T, prefix: &mut Vec<usize>, lp: T, out: &mut Vec<(Vec<usize>, T)>) {
        let j = prefix.len();
        if j == masks.len() {
            out.push((prefix.clone(), lp));
            return;
        }
        let z = self.model.logits(acts, acts.len() - 1, &masks[j]);
        let (_, logp) = masked_softmax(&z, temperature);
        for (k, &tok) in masks[j].iter().enumerate() {
            prefix.push(tok);
            if j + 1 < masks.len() {
                let mut next = acts.clone();
                self.model.extend(&mut next, &[tok]);
                self.enumerate_from(&next, masks, temperature, prefix, lp + logp[k], out);
            } else {
                self.enumerate_from(acts, masks, temperature, prefix, lp + logp[k], out);
            }
            prefix.pop();
        }
    }

    /// State-value estimate from the final prompt position.
    pub fn value(&self, prompt: &PromptSeq) -> T {
        let acts = self.model.forward(&prompt.tokens);
        self.model.value_of_hidden(self.model.hidden(&acts, acts.len() - 1))
    }

    /// DCM values `0..=I` of a leader action.
    pub fn decode_dcm(&self, a: &ActionSeq<T>) -> Result<Vec<usize>> {
        a.tokens
            .iter()
            .map(|&t| {
                self.schema
                    .vocab
                    .num_value(t)
                    .ok_or_else(|| Error::Decode(format!("{} is not a numeral", self.schema.vocab.name(t))))
            })
            .collect()
    }

    /// Bitmap and UCM of a follower action.
    pub fn decode_ue_action(&self, a: &ActionSeq<T>) -> Result<UeAction> {
        let m = self.schema.num_rbgs;
        if a.tokens.len() != m + self.schema.ucm_len {
            return Err(Error::Decode("follower action has the wrong length".into()));
        }
        let v = &self.schema.vocab;
        let bits = a.tokens[..m]
            .iter()
            .map(|&t| match v.num_value(t) {
                Some(0) => Ok(false),
                Some(1) => Ok(true),
                _ => Err(Error::Decode(format!("{} is not a bit", v.name(t)))),
            })
            .collect::<Result<Vec<_>>>()?;
        let ucm = a.tokens[m..]
            .iter()
            .map(|&t| v.ucm_value(t).ok_or_else(|| Error::Decode(format!("{} is not a UCM symbol", v.name(t)))))
            .collect::<Result<_>>()?;
        Ok(UeAction {
            bitmap: Bitmap(bits),
            ucm,
        })
    }

    /// Token encoding of a follower action (inverse of `decode_ue_action`).
    pub fn encode_ue_action(&self, a: &UeAction) -> Vec<usize> {
        let v = &self.schema.vocab;
        a.bitmap
            .bits()
            .iter()
            .map(|&b| v.num(b as usize))
            .chain(a.ucm.iter().map(|&u| v.ucm(u)))
            .collect()
    }

    pub fn encode_dcm(&self, dcm: &[usize]) -> Vec<usize> {
        dcm.iter().map(|&k| self.schema.vocab.num(k)).collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "stackmac.policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint of one parameter bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub config_hash: String,
    pub schema: Schema,
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl<T: Real> TokenPolicy<T> {
    pub fn to_checkpoint(&self, config_hash: &str) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::type_name().into(),
            config_hash: config_hash.into(),
            schema: self.schema.clone(),
            spec: self.model.spec().clone(),
            params: self.model.data.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    /// Restores a bundle; `expected_hash` guards against mixing configs.
    pub fn from_checkpoint(ck: &PolicyCheckpoint, expected_hash: Option<&str>) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if let Some(h) = expected_hash {
            if h != ck.config_hash {
                return Err(Error::HashMismatch {
                    checkpoint: ck.config_hash.clone(),
                    config: h.into(),
                });
            }
        }
        let data = ck.params.iter().map(|&v| T::of(v)).collect();
        Ok(Self {
            schema: ck.schema.clone(),
            model: Transformer::from_parts(ck.spec.clone(), data)?,
        })
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_checkpoint(config_hash))?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: PolicyCheckpoint = serde_json::from_reader(f)?;
        Self::from_checkpoint(&ck, expected_hash)
    }
}
