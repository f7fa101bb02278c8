use crate::env::{EnvState, UeAction};
use crate::error::Result;
use crate::game::dcm_bits_for_ue;
use crate::metrics::{check_schema, Controller, Decoding};
use crate::policy::{Role, TokenPolicy};
use crate::rng::Rng;
use crate::scalar::Real;

/// A token leader whose followers transmit exactly on their DCM bits.
#[derive(Clone, Debug)]
pub struct DictatorController<T> {
    pub leader: TokenPolicy<T>,
    pub decoding: Decoding,
}

impl<T: Real> DictatorController<T> {
    pub fn new(leader: TokenPolicy<T>, decoding: Decoding) -> Self {
        Self { leader, decoding }
    }
}

impl<T: Real> Controller for DictatorController<T> {
    fn name(&self) -> String {
        "dictator".into()
    }

    fn reset(&mut self, env: &EnvState) -> Result<()> {
        check_schema(&self.leader, env)
    }

    fn leader(&mut self, env: &EnvState, rng: &mut Rng) -> Result<Vec<usize>> {
        let prompt = self.leader.schema.serialize_leader_obs(&env.leader_obs())?;
        let a = match self.decoding {
            Decoding::Greedy => self.leader.greedy(&prompt, Role::Leader, env.num_ues())?,
            Decoding::Sampled { temperature } => self.leader.generate(&prompt, Role::Leader, env.num_ues(), T::of(temperature), rng)?,
        };
        self.leader.decode_dcm(&a)
    }

    fn followers(&mut self, env: &EnvState, dcm: &[usize], _rng: &mut Rng) -> Result<Vec<UeAction>> {
        let i_t = env.num_ues();
        (1..=i_t)
            .map(|i| {
                Ok(UeAction {
                    bitmap: dcm_bits_for_ue(dcm, i, i_t)?,
                    ucm: vec![0; env.config().ucm_len],
                })
            })
            .collect()
    }
}
