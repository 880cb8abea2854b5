use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tokens::TokenId;

/// Concrete-score estimates: for each position, the ratio p_t(y)/p_t(x) for
/// every clean candidate `y`, stored as a dense `len x vocab_size` table.
///
/// Scores toward MASK are only meaningful at unmasked positions and are
/// carried separately when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteScore {
    vocab_size: usize,
    values: Vec<f64>,
    to_mask: Option<Vec<f64>>,
}

impl ConcreteScore {
    pub fn new(vocab_size: usize, values: Vec<f64>) -> Self {
        assert!(vocab_size > 0 && values.len().is_multiple_of(vocab_size));
        Self {
            vocab_size,
            values,
            to_mask: None,
        }
    }

    pub fn with_to_mask(mut self, to_mask: Vec<f64>) -> Self {
        assert_eq!(to_mask.len(), self.len());
        self.to_mask = Some(to_mask);
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.vocab_size
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, position: usize) -> &[f64] {
        &self.values[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn get(&self, position: usize, candidate: usize) -> f64 {
        self.values[position * self.vocab_size + candidate]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_mask(&self) -> Option<&[f64]> {
        self.to_mask.as_deref()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            vocab_size: self.vocab_size,
            values: self.values.iter().map(|v| v * factor).collect(),
            to_mask: self.to_mask.as_ref().map(|m| m.iter().map(|v| v * factor).collect()),
        }
    }
}

/// Anything that produces concrete scores for a token sequence at time t.
///
/// `Record` is whatever the implementation needs later to differentiate
/// through the evaluation (activations for a network, nothing for a closed
/// form).
pub trait ScoreFn {
    type Record;

    fn vocab_size(&self) -> u32;

    fn evaluate(&self, x: &[TokenId], t: f64) -> Result<(ConcreteScore, Self::Record)>;

    fn score(&self, x: &[TokenId], t: f64) -> Result<ConcreteScore> {
        self.evaluate(x, t).map(|(s, _)| s)
    }
}

/// Adapts a closure into a [`ScoreFn`] with no gradient record.
pub struct AnalyticScore<F> {
    vocab_size: u32,
    f: F,
}

impl<F> AnalyticScore<F>
where
    F: Fn(&[TokenId], f64) -> Result<ConcreteScore>,
{
    pub fn new(vocab_size: u32, f: F) -> Self {
        Self { vocab_size, f }
    }
}

impl<F> ScoreFn for AnalyticScore<F>
where
    F: Fn(&[TokenId], f64) -> Result<ConcreteScore>,
{
    type Record = ();

    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn evaluate(&self, x: &[TokenId], t: f64) -> Result<(ConcreteScore, ())> {
        Ok(((self.f)(x, t)?, ()))
    }
}

/// Exact denoising ratio p_{t|0}(y|x0) / p_{t|0}(x_t|x0) for single-site
/// changes of `x_t`.
///
/// At a masked position only `y = x0[i]` is reachable, with ratio ᾱ/(1-ᾱ);
/// every other clean candidate has ratio exactly 0. At an unmasked position
/// the only other reachable state is MASK, with ratio (1-ᾱ)/ᾱ. The entry for
/// `y == x_t[i]` is 1.
pub fn true_concrete_score(
    x_t: &[TokenId],
    x0: &[TokenId],
    vocab_size: u32,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ConcreteScore> {
    if x_t.len() != x0.len() {
        return Err(Error::LengthMismatch {
            left: x_t.len(),
            right: x0.len(),
        });
    }
    let n = vocab_size as usize;
    let alpha = schedule.survival(t)?;
    let unmask = schedule.unmask_ratio(t)?;
    let remask = schedule.mask_probability(t)? / alpha;
    let mut values = vec![0.0; x0.len() * n];
    let mut to_mask = vec![1.0; x0.len()];
    for (i, (&xt, &clean)) in x_t.iter().zip(x0).enumerate() {
        if clean >= vocab_size {
            return Err(Error::InvalidCleanToken { position: i });
        }
        let row = &mut values[i * n..(i + 1) * n];
        if xt == vocab_size {
            row[clean as usize] = unmask;
        } else if xt == clean {
            row[clean as usize] = 1.0;
            to_mask[i] = remask;
        } else {
            return Err(Error::InconsistentCorruption { position: i });
        }
    }
    Ok(ConcreteScore::new(n, values).with_to_mask(to_mask))
}
