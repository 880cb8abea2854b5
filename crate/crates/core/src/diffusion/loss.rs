//! Diffusion-weighted denoising score entropy.
//!
//! For a clean sequence x0, time t and corruption x_t the integrand is
//!
//! ```text
//! Σ_i Σ_{y ≠ x_t} Q_t(x_t, y) [ s_y - a_y ln s_y + K(a_y) ],   K(a) = a ln a - a
//! ```
//!
//! with `a_y` the exact ratio p_{t|0}(y|x0)/p_{t|0}(x_t|x0). Under absorbing
//! corruption only masked positions have incoming rates (σ(t), from every
//! clean token), so unmasked positions contribute nothing. The time integral
//! over [ε, T] is estimated with uniform samples.

use rand::Rng as _;

use super::schedule::NoiseSchedule;
use super::score::{ConcreteScore, ScoreFn};
use super::transition::corrupt_ids;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokens::{TokenId, TokenSequence};

/// Scores are floored here before entering a logarithm.
pub const SCORE_FLOOR: f64 = 1e-30;

/// K(a) = a ln a - a, with K(0) = 0.
pub fn entropy_offset(a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * a.ln() - a
    }
}

/// s - a ln s + K(a). Nonnegative, zero iff s == a.
pub fn score_entropy_term(s: f64, a: f64) -> f64 {
    let s = s.max(SCORE_FLOOR);
    if a == 0.0 {
        s
    } else {
        s - a * s.ln() + entropy_offset(a)
    }
}

/// d/ds of [`score_entropy_term`].
pub fn score_entropy_grad(s: f64, a: f64) -> f64 {
    1.0 - a / s.max(SCORE_FLOOR)
}

/// dLoss/dScore at the positions that carry weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreCotangent {
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl ScoreCotangent {
    pub fn scale(&mut self, factor: f64) {
        for (_, row) in &mut self.rows {
            row.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossSample<R> {
    pub t: f64,
    pub x_t: Vec<TokenId>,
    /// This sample's contribution to the estimate.
    pub value: f64,
    pub cotangent: ScoreCotangent,
    pub record: R,
}

/// Monte-Carlo loss value plus everything needed to backpropagate it.
#[derive(Debug, Clone)]
pub struct LossEstimate<R> {
    pub value: f64,
    pub samples: Vec<LossSample<R>>,
}

impl<R> LossEstimate<R> {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Multiplies the value and every cotangent by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.value *= factor;
        for s in &mut self.samples {
            s.value *= factor;
            s.cotangent.scale(factor);
        }
    }
}

fn check_score(score: &ConcreteScore, positions: impl Iterator<Item = usize>) -> Result<()> {
    for i in positions {
        for (y, &v) in score.row(i).iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidScore {
                    position: i,
                    candidate: y,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// The integrand at a fixed (t, x_t), and its gradient with respect to the
/// scores at masked positions.
pub fn dwdse_integrand(
    x0: &[TokenId],
    x_t: &[TokenId],
    vocab_size: u32,
    t: f64,
    score: &ConcreteScore,
    schedule: &NoiseSchedule,
) -> Result<(f64, ScoreCotangent)> {
    if x0.len() != x_t.len() || score.len() != x0.len() {
        return Err(Error::LengthMismatch {
            left: x0.len(),
            right: x_t.len().min(score.len()),
        });
    }
    let mask = vocab_size;
    let sigma = schedule.rate(t)?;
    let ratio = schedule.unmask_ratio(t)?;
    let masked: Vec<usize> = (0..x_t.len()).filter(|&i| x_t[i] == mask).collect();
    check_score(score, masked.iter().copied())?;
    let mut total = 0.0;
    let mut cot = ScoreCotangent::default();
    for &i in &masked {
        let clean = x0[i];
        if clean >= vocab_size {
            return Err(Error::InvalidCleanToken { position: i });
        }
        let row = score.row(i);
        let mut g = Vec::with_capacity(row.len());
        for (y, &s) in row.iter().enumerate() {
            let a = if y as TokenId == clean { ratio } else { 0.0 };
            total += sigma * score_entropy_term(s, a);
            g.push(sigma * score_entropy_grad(s, a));
        }
        cot.rows.push((i, g));
    }
    for (i, (&a, &b)) in x_t.iter().zip(x0).enumerate() {
        if a != mask && a != b {
            return Err(Error::InconsistentCorruption { position: i });
        }
    }
    Ok((total, cot))
}

/// Loss contribution of one externally drawn (t, x_t), weighted by `weight`.
pub fn dwdse_sample<S: ScoreFn>(
    x0: &[TokenId],
    x_t: Vec<TokenId>,
    t: f64,
    weight: f64,
    score_fn: &S,
    schedule: &NoiseSchedule,
) -> Result<LossSample<S::Record>> {
    let (score, record) = score_fn.evaluate(&x_t, t)?;
    let (value, mut cotangent) =
        dwdse_integrand(x0, &x_t, score_fn.vocab_size(), t, &score, schedule)?;
    cotangent.scale(weight);
    Ok(LossSample {
        t,
        x_t,
        value: value * weight,
        cotangent,
        record,
    })
}

/// Monte-Carlo estimate of the loss for one clean sequence using
/// `time_samples` draws of t ~ U[ε, T] and x_t ~ p_{t|0}.
pub fn dwdse_loss<S: ScoreFn>(
    x0: &TokenSequence,
    score_fn: &S,
    schedule: &NoiseSchedule,
    time_samples: usize,
    rng: &mut Rng,
) -> Result<LossEstimate<S::Record>> {
    if time_samples == 0 {
        return Err(Error::InvalidParameter("time_samples must be >= 1".into()));
    }
    let (eps, horizon) = (schedule.epsilon, schedule.horizon());
    let weight = (horizon - eps) / time_samples as f64;
    let mut samples = Vec::with_capacity(time_samples);
    let mut value = 0.0;
    for _ in 0..time_samples {
        let t = rng.random_range(eps..=horizon);
        let x_t = corrupt_ids(x0.ids(), x0.vocab_size(), t, schedule, rng)?;
        let s = dwdse_sample(x0.ids(), x_t, t, weight, score_fn, schedule)?;
        value += s.value;
        samples.push(s);
    }
    if !value.is_finite() {
        let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
        return Err(Error::NumericalFailure(format!(
            "non-finite loss {value}; t samples {ts:?}"
        )));
    }
    Ok(LossEstimate { value, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::score::{true_concrete_score, AnalyticScore};
    use crate::rng;

    #[test]
    fn term_is_zero_at_the_true_ratio_and_convex() {
        for &a in &[1e-6, 0.3, 1.0, 7.5, 1e4] {
            assert!(score_entropy_term(a, a).abs() <= 1e-9 * a.max(1.0));
            for &f in &[0.5, 0.9, 1.1, 2.0] {
                assert!(score_entropy_term(a * f, a) > 0.0);
            }
        }
        assert_eq!(score_entropy_term(0.0, 0.0), SCORE_FLOOR);
    }

    #[test]
    fn doubled_score_closed_form() {
        // s = 2a: 2a - a ln(2a) + a ln a - a = a (1 - ln 2)
        for &a in &[0.01, 0.5820, 3.0] {
            let got = score_entropy_term(2.0 * a, a);
            assert!((got - a * (1.0 - std::f64::consts::LN_2)).abs() < 1e-12);
            assert!(got > 0.0);
        }
    }

    #[test]
    fn exact_score_gives_zero_loss() {
        let s = NoiseSchedule::default();
        let x0 = TokenSequence::new(vec![0, 3, 2, 1, 1, 0], 4, 75.0).unwrap();
        let clean = x0.ids().to_vec();
        let f = AnalyticScore::new(4, move |xt: &[TokenId], t| true_concrete_score(xt, &clean, 4, t, &s));
        let est = dwdse_loss(&x0, &f, &s, 200, &mut rng::stream(1, &[])).unwrap();
        assert!(est.value.abs() < 1e-8, "{}", est.value);
    }

    #[test]
    fn negative_score_is_rejected() {
        let s = NoiseSchedule::default();
        let x0 = TokenSequence::new(vec![0, 1], 2, 75.0).unwrap();
        let f = AnalyticScore::new(2, |xt: &[TokenId], _| Ok(ConcreteScore::new(2, vec![-1.0; xt.len() * 2])));
        // t close to 1 so at least one position is masked
        let s2 = s;
        let err = dwdse_sample(x0.ids(), vec![2, 2], 0.9, 1.0, &f, &s2).unwrap_err();
        assert!(matches!(err, Error::InvalidScore { .. }));
        assert!(dwdse_loss(&x0, &f, &s, 0, &mut rng::stream(0, &[])).is_err());
    }
}
