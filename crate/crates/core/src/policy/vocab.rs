//! Token vocabulary and the fixed prompt schema.
//!
//! | ids                       | meaning                         |
//! |---------------------------|---------------------------------|
//! | 0                         | null (empty history slot)       |
//! | 1                         | block separator                 |
//! | 2, 3                      | leader / follower role markers  |
//! | 4                         | action start                    |
//! | `num(0..=max_ues)`        | numerals: UE ids, DCM and bits  |
//! | `channel(0..states)`      | channel quality                 |
//! | `ucm(0..ucm_vocab)`       | uplink signalling symbols       |
//! | `digit(0..10)`            | scalar fields                   |

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, FollowerObs, LeaderObs};
use crate::error::{Error, Result};
use crate::game::Bitmap;

pub const NULL: usize = 0;
pub const SEP: usize = 1;
pub const ROLE_LEADER: usize = 2;
pub const ROLE_FOLLOWER: usize = 3;
pub const ACT: usize = 4;
const FIRST_NUM: usize = 5;

/// Largest buffer occupancy, in dPDUs, the prompt distinguishes.
pub const BUFFER_BUCKETS: u64 = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Leader,
    Follower,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub max_ues: usize,
    pub channel_states: usize,
    pub ucm_vocab: usize,
}

impl Vocab {
    pub fn num(&self, k: usize) -> usize {
        debug_assert!(k <= self.max_ues);
        FIRST_NUM + k
    }

    pub fn channel(&self, c: usize) -> usize {
        FIRST_NUM + self.max_ues + 1 + c
    }

    pub fn ucm(&self, u: usize) -> usize {
        self.channel(self.channel_states) + u
    }

    pub fn digit(&self, d: usize) -> usize {
        self.ucm(self.ucm_vocab) + d
    }

    pub fn size(&self) -> usize {
        self.digit(10)
    }

    /// Inverse of [`Vocab::num`].
    pub fn num_value(&self, tok: usize) -> Option<usize> {
        (FIRST_NUM..=FIRST_NUM + self.max_ues).contains(&tok).then(|| tok - FIRST_NUM)
    }

    pub fn ucm_value(&self, tok: usize) -> Option<usize> {
        (self.ucm(0)..self.ucm(self.ucm_vocab)).contains(&tok).then(|| tok - self.ucm(0))
    }

    /// Human-readable name of a token id.
    pub fn name(&self, tok: usize) -> String {
        match tok {
            NULL => "<null>".into(),
            SEP => "<sep>".into(),
            ROLE_LEADER => "<bs>".into(),
            ROLE_FOLLOWER => "<ue>".into(),
            ACT => "<act>".into(),
            t if t < self.channel(0) => format!("{}", t - FIRST_NUM),
            t if t < self.ucm(0) => format!("<ch{}>", t - self.channel(0)),
            t if t < self.digit(0) => format!("<u{}>", t - self.ucm(0)),
            t if t < self.size() => format!("<d{}>", t - self.digit(0)),
            t => format!("<?{t}>"),
        }
    }
}

/// Prompt and action layout for one environment shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub vocab: Vocab,
    pub num_rbgs: usize,
    pub ucm_len: usize,
    pub dpdu_bits: u64,
}

/// A serialized observation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSeq {
    pub role: Role,
    pub tokens: Vec<usize>,
}

fn ser(msg: String) -> Error {
    Error::Serialization(msg)
}

impl Schema {
    pub fn from_env(cfg: &EnvConfig) -> Self {
        Self {
            vocab: Vocab {
                max_ues: cfg.max_ues,
                channel_states: cfg.num_channel_states(),
                ucm_vocab: cfg.ucm_vocab,
            },
            num_rbgs: cfg.num_rbgs,
            ucm_len: cfg.ucm_len,
            dpdu_bits: cfg.dpdu_bits,
        }
    }

    /// Tokens per leader-prompt UE block.
    pub fn leader_block_len(&self) -> usize {
        1 + self.ucm_len + self.num_rbgs + 1
    }

    pub fn leader_prompt_len(&self, num_ues: usize) -> usize {
        2 + num_ues * self.leader_block_len() + 1
    }

    pub fn follower_prompt_len(&self) -> usize {
        2 + 1 + 2 + self.num_rbgs + self.ucm_len + self.num_rbgs + 1
    }

    pub fn action_len(&self, role: Role) -> usize {
        match role {
            Role::Leader => self.num_rbgs,
            Role::Follower => self.num_rbgs + self.ucm_len,
        }
    }

    fn channel_tok(&self, c: usize) -> Result<usize> {
        if c >= self.vocab.channel_states {
            return Err(ser(format!("channel state {c} outside 0..{}", self.vocab.channel_states)));
        }
        Ok(self.vocab.channel(c))
    }

    fn bits(&self, out: &mut Vec<usize>, bits: Option<&Bitmap>) -> Result<()> {
        match bits {
            None => out.extend(std::iter::repeat(NULL).take(self.num_rbgs)),
            Some(b) if b.len() == self.num_rbgs => {
                out.extend(b.bits().iter().map(|&x| self.vocab.num(x as usize)));
            }
            Some(b) => return Err(ser(format!("bitmap of length {} with M = {}", b.len(), self.num_rbgs))),
        }
        Ok(())
    }

    fn ucm(&self, out: &mut Vec<usize>, ucm: Option<&[usize]>) -> Result<()> {
        match ucm {
            None => out.extend(std::iter::repeat(NULL).take(self.ucm_len)),
            Some(u) if u.len() == self.ucm_len => {
                for &s in u {
                    if s >= self.vocab.ucm_vocab {
                        return Err(ser(format!("UCM symbol {s} outside 0..{}", self.vocab.ucm_vocab)));
                    }
                    out.push(self.vocab.ucm(s));
                }
            }
            Some(u) => return Err(ser(format!("UCM of length {} with K = {}", u.len(), self.ucm_len))),
        }
        Ok(())
    }

    /// `[<bs> I] ([ch] [ucm; K] [dcm bits; M] <sep>) x I <act>`
    pub fn serialize_leader_obs(&self, o: &LeaderObs) -> Result<PromptSeq> {
        let i_t = o.num_ues();
        if i_t == 0 || i_t > self.vocab.max_ues {
            return Err(ser(format!("{i_t} UEs outside 1..={}", self.vocab.max_ues)));
        }
        if o.ucm.len() != i_t || o.dcm.len() != i_t {
            return Err(ser("leader observation fields disagree on I".into()));
        }
        let mut t = Vec::with_capacity(self.leader_prompt_len(i_t));
        t.push(ROLE_LEADER);
        t.push(self.vocab.num(i_t));
        for i in 0..i_t {
            t.push(self.channel_tok(o.csi[i])?);
            self.ucm(&mut t, o.ucm[i].as_deref())?;
            self.bits(&mut t, o.dcm[i].as_ref())?;
            t.push(SEP);
        }
        t.push(ACT);
        Ok(PromptSeq { role: Role::Leader, tokens: t })
    }

    /// `[<ue> id] [ch] [buffer digits; 2] [last bitmap; M] [last ucm; K] [dcm bits; M] <act>`
    pub fn serialize_follower_obs(&self, o: &FollowerObs) -> Result<PromptSeq> {
        if o.ue >= self.vocab.max_ues {
            return Err(ser(format!("UE index {} outside 0..{}", o.ue, self.vocab.max_ues)));
        }
        let mut t = Vec::with_capacity(self.follower_prompt_len());
        t.push(ROLE_FOLLOWER);
        t.push(self.vocab.num(o.ue + 1));
        t.push(self.channel_tok(o.channel)?);
        let dpdus = (o.buffer_bits / self.dpdu_bits).min(BUFFER_BUCKETS) as usize;
        t.push(self.vocab.digit(dpdus / 10));
        t.push(self.vocab.digit(dpdus % 10));
        let last = o.last_action.as_ref();
        self.bits(&mut t, last.map(|a| &a.bitmap))?;
        self.ucm(&mut t, last.map(|a| a.ucm.as_slice()))?;
        self.bits(&mut t, o.dcm_bits.as_ref())?;
        t.push(ACT);
        Ok(PromptSeq { role: Role::Follower, tokens: t })
    }

    /// Admissible token ids at every action position, in semantic order:
    /// index `k` of a position's list is the value `k`.
    pub fn pag_mask(&self, role: Role, i_t: usize) -> Result<Vec<Vec<usize>>> {
        if i_t == 0 {
            return Err(Error::Contract("PAG mask needs I_t >= 1".into()));
        }
        if i_t > self.vocab.max_ues {
            return Err(Error::Contract(format!("I_t = {i_t} exceeds max_ues {}", self.vocab.max_ues)));
        }
        Ok(match role {
            Role::Leader => {
                let numerals: Vec<usize> = (0..=i_t).map(|k| self.vocab.num(k)).collect();
                vec![numerals; self.num_rbgs]
            }
            Role::Follower => {
                let bits = vec![self.vocab.num(0), self.vocab.num(1)];
                let ucm: Vec<usize> = (0..self.vocab.ucm_vocab).map(|u| self.vocab.ucm(u)).collect();
                let mut m = vec![bits; self.num_rbgs];
                m.extend(std::iter::repeat(ucm).take(self.ucm_len));
                m
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::UeAction;

    fn schema() -> Schema {
        Schema::from_env(&EnvConfig::default())
    }

    #[test]
    fn ids_are_dense() {
        let v = schema().vocab;
        let mut names: Vec<String> = (0..v.size()).map(|t| v.name(t)).collect();
        assert!(names.iter().all(|n| !n.starts_with("<?")));
        names.sort();
        names.dedup();
        assert_eq!(names.len(), v.size());
        assert_eq!(v.num_value(v.num(7)), Some(7));
        assert_eq!(v.ucm_value(v.ucm(3)), Some(3));
    }

    fn fobs() -> FollowerObs {
        FollowerObs {
            ue: 0,
            channel: 1,
            buffer_bits: 512,
            last_action: None,
            dcm_bits: None,
        }
    }

    #[test]
    fn follower_prompt() {
        let s = schema();
        let p = s.serialize_follower_obs(&fobs()).unwrap();
        assert_eq!(p, s.serialize_follower_obs(&fobs()).unwrap());
        assert_eq!(p.tokens.len(), s.follower_prompt_len());
        assert_eq!(&p.tokens[3..5], &[s.vocab.digit(0), s.vocab.digit(2)]);
        assert!(p.tokens[5..5 + 5 + 2 + 5].iter().all(|&t| t == NULL));
        let mut o = fobs();
        o.last_action = Some(UeAction { bitmap: "10100".parse().unwrap(), ucm: vec![1, 7] });
        o.dcm_bits = Some("00001".parse().unwrap());
        let q = s.serialize_follower_obs(&o).unwrap();
        assert_eq!(q.tokens.len(), p.tokens.len());
        o.channel = 3;
        assert!(matches!(s.serialize_follower_obs(&o), Err(Error::Serialization(_))));
    }

    fn lobs(i: usize) -> LeaderObs {
        LeaderObs {
            csi: (0..i).map(|k| k % 3).collect(),
            ucm: vec![None; i],
            dcm: vec![None; i],
        }
    }

    #[test]
    fn leader_prompt_is_affine_in_ues() {
        let s = schema();
        let p3 = s.serialize_leader_obs(&lobs(3)).unwrap();
        let p5 = s.serialize_leader_obs(&lobs(5)).unwrap();
        assert_eq!(p3.tokens.iter().filter(|&&t| t == SEP).count(), 3);
        assert_eq!(p5.tokens.len() - p3.tokens.len(), 2 * s.leader_block_len());
        assert_eq!(p3.tokens.len(), s.leader_prompt_len(3));
    }

    #[test]
    fn permuting_ues_permutes_blocks() {
        let s = schema();
        let mut o = lobs(3);
        o.ucm[0] = Some(vec![1, 2]);
        let p = s.serialize_leader_obs(&o).unwrap();
        let mut q = o.clone();
        q.csi.swap(0, 2);
        q.ucm.swap(0, 2);
        q.dcm.swap(0, 2);
        let r = s.serialize_leader_obs(&q).unwrap();
        let b = s.leader_block_len();
        assert_eq!(p.tokens[2..2 + b], r.tokens[2 + 2 * b..2 + 3 * b]);
        assert_eq!(p.tokens[2 + 2 * b..2 + 3 * b], r.tokens[2..2 + b]);
    }

    #[test]
    fn masks() {
        let s = schema();
        assert_eq!(s.pag_mask(Role::Leader, 3).unwrap()[0].len(), 4);
        let f = s.pag_mask(Role::Follower, 4).unwrap();
        assert_eq!(f[0], vec![s.vocab.num(0), s.vocab.num(1)]);
        assert_eq!(f[5].len(), 8);
        assert!(matches!(s.pag_mask(Role::Leader, 0), Err(Error::Contract(_))));
    }
}
