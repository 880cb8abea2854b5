use rand::Rng as _;

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokens::{TokenId, TokenSequence};

/// The absorbing corruption structure over `vocab_size` clean tokens plus
/// MASK (id `vocab_size`).
///
/// Rates use the convention `Q(y, x)` = rate of jumping from `x` to `y`:
/// every clean token leaks into MASK at unit rate and MASK is absorbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbsorbingTransition {
    pub vocab_size: u32,
}

impl AbsorbingTransition {
    pub fn new(vocab_size: u32) -> Self {
        Self { vocab_size }
    }

    pub fn mask_id(&self) -> TokenId {
        self.vocab_size
    }

    pub fn states(&self) -> usize {
        self.vocab_size as usize + 1
    }

    /// `Q(to, from)`.
    pub fn rate(&self, to: TokenId, from: TokenId) -> f64 {
        let mask = self.mask_id();
        if from == mask {
            0.0
        } else if to == from {
            -1.0
        } else if to == mask {
            1.0
        } else {
            0.0
        }
    }

    /// Dense `(N+1) x (N+1)` generator, row-major with `[to][from]`.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.states();
        (0..n)
            .map(|to| (0..n).map(|from| self.rate(to as TokenId, from as TokenId)).collect())
            .collect()
    }
}

/// Law of one token at time t given its clean value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMarginal {
    pub stay: f64,
    pub mask: f64,
}

impl ForwardMarginal {
    /// Expands to a full probability vector over `N + 1` states.
    pub fn dense(&self, x0: TokenId, model: &AbsorbingTransition) -> Vec<f64> {
        let mut p = vec![0.0; model.states()];
        p[x0 as usize] = self.stay;
        p[model.mask_id() as usize] = self.mask;
        p
    }
}

pub fn forward_marginal(
    x0: TokenId,
    t: f64,
    model: &AbsorbingTransition,
    schedule: &NoiseSchedule,
) -> Result<ForwardMarginal> {
    if x0 >= model.vocab_size {
        return Err(Error::InvalidCleanToken { position: 0 });
    }
    Ok(ForwardMarginal {
        stay: schedule.survival(t)?,
        mask: schedule.mask_probability(t)?,
    })
}

/// Masks each position independently with probability 1 - ᾱ(t).
pub fn corrupt(
    x0: &TokenSequence,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TokenSequence> {
    let ids = corrupt_ids(x0.ids(), x0.vocab_size(), t, schedule, rng)?;
    x0.with_ids(ids)
}

pub(crate) fn corrupt_ids(
    x0: &[TokenId],
    vocab_size: u32,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<TokenId>> {
    if let Some(position) = x0.iter().position(|&id| id >= vocab_size) {
        return Err(Error::InvalidCleanToken { position });
    }
    let p = schedule.mask_probability(t)?;
    Ok(x0
        .iter()
        .map(|&id| if rng.random::<f64>() < p { vocab_size } else { id })
        .collect())
}
