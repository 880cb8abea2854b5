//! Euler discretization of the reverse-time absorbing chain.
//!
//! Over a step of length dt ending at time t, a masked position jumps to
//! clean token y with probability σ(t)·s_y·dt. Unmasked positions have no
//! reverse rates (nothing but MASK flows into them forward in time) and
//! never change.

use rand::Rng as _;

use super::schedule::NoiseSchedule;
use super::score::{ConcreteScore, ScoreFn};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokens::{TokenId, TokenSequence};

/// Per-position cap on the total jump probability of one step.
pub const JUMP_CAP: f64 = 1.0 - 1e-6;
/// Fraction of sequence positions allowed to hit [`JUMP_CAP`] before a step
/// is rejected as too large.
pub const MAX_CAPPED_FRACTION: f64 = 0.01;

/// Transition probabilities out of MASK for one position: entries `0..N`
/// are jumps to clean tokens, entry `N` is staying masked. Returns whether
/// the cap was applied.
pub fn reverse_kernel(row: &[f64], sigma: f64, dt: f64) -> (Vec<f64>, bool) {
    let mut p: Vec<f64> = row.iter().map(|s| sigma * s * dt).collect();
    let total: f64 = p.iter().sum();
    let capped = total > JUMP_CAP;
    let jump = if capped {
        p.iter_mut().for_each(|v| *v *= JUMP_CAP / total);
        JUMP_CAP
    } else {
        total
    };
    p.push(1.0 - jump);
    (p, capped)
}

fn draw(p: &[f64], rng: &mut Rng) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (k, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

fn check_scores(score: &ConcreteScore, i: usize) -> Result<()> {
    for (y, &v) in score.row(i).iter().enumerate() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidScore {
                position: i,
                candidate: y,
                value: v,
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step_ids(
    x: &mut [TokenId],
    vocab_size: u32,
    t: f64,
    dt: f64,
    score: &ConcreteScore,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    clamp: Option<&[bool]>,
    strict: bool,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if t - dt < schedule.epsilon - 1e-12 {
        return Err(Error::InvalidTime {
            t: t - dt,
            horizon: schedule.horizon(),
        });
    }
    if score.len() != x.len() || score.vocab_size() != vocab_size as usize {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: score.len(),
        });
    }
    let sigma = schedule.rate(t)?;
    let active: Vec<usize> = (0..x.len())
        .filter(|&i| x[i] == vocab_size && !clamp.is_some_and(|c| c[i]))
        .collect();
    let mut kernels = Vec::with_capacity(active.len());
    let mut capped = 0;
    for &i in &active {
        check_scores(score, i)?;
        let (p, c) = reverse_kernel(score.row(i), sigma, dt);
        capped += c as usize;
        kernels.push(p);
    }
    if strict && capped as f64 > MAX_CAPPED_FRACTION * x.len() as f64 {
        return Err(Error::StepTooLarge {
            capped,
            positions: x.len(),
        });
    }
    for (&i, p) in active.iter().zip(&kernels) {
        x[i] = draw(p, rng) as TokenId;
    }
    Ok(())
}

/// One reverse Euler step from t to t - dt. Positions with `clamp[i]` set
/// are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    x_t: &TokenSequence,
    t: f64,
    dt: f64,
    score: &ConcreteScore,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    clamp: Option<&[bool]>,
) -> Result<TokenSequence> {
    if let Some(c) = clamp {
        if c.len() != x_t.len() {
            return Err(Error::LengthMismatch {
                left: c.len(),
                right: x_t.len(),
            });
        }
    }
    let mut ids = x_t.ids().to_vec();
    step_ids(&mut ids, x_t.vocab_size(), t, dt, score, schedule, rng, clamp, true)?;
    x_t.with_ids(ids)
}

/// Uniform time grid from T down to ε with `steps` intervals.
pub fn time_grid(schedule: &NoiseSchedule, steps: usize) -> Vec<f64> {
    let (eps, horizon) = (schedule.epsilon, schedule.horizon());
    (0..=steps)
        .map(|k| {
            if k == steps {
                eps
            } else {
                horizon - (horizon - eps) * k as f64 / steps as f64
            }
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Runs the reverse chain from `x_T` to ε, then fills any MASK left at ε
/// with the highest-scoring clean token.
///
/// Intermediate steps reject oversize jumps. The last interval ends at the
/// time floor, where the exact kernel unmasks nearly every remaining
/// position, so saturating the cap there is accepted.
pub fn sample_reverse<S: ScoreFn>(
    x_big_t: &TokenSequence,
    score_fn: &S,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut Rng,
    clamp: Option<&[bool]>,
) -> Result<TokenSequence> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be >= 1".into()));
    }
    let vocab = x_big_t.vocab_size();
    if score_fn.vocab_size() != vocab {
        return Err(Error::DimensionMismatch {
            left: score_fn.vocab_size() as usize,
            right: vocab as usize,
        });
    }
    if let Some(c) = clamp {
        if c.len() != x_big_t.len() {
            return Err(Error::LengthMismatch {
                left: c.len(),
                right: x_big_t.len(),
            });
        }
        if let Some(i) = (0..c.len()).find(|&i| c[i] && x_big_t.is_masked(i)) {
            return Err(Error::InvalidParameter(format!(
                "clamped position {i} is masked"
            )));
        }
    }
    let mut x = x_big_t.ids().to_vec();
    let grid = time_grid(schedule, steps);
    for k in 0..steps {
        if !x.contains(&vocab) {
            break;
        }
        let (t, next) = (grid[k], grid[k + 1]);
        let score = score_fn.score(&x, t)?;
        let strict = k + 1 < steps;
        step_ids(&mut x, vocab, t, t - next, &score, schedule, rng, clamp, strict)?;
    }
    if x.contains(&vocab) {
        let score = score_fn.score(&x, schedule.epsilon)?;
        for i in 0..x.len() {
            if x[i] == vocab {
                check_scores(&score, i)?;
                x[i] = argmax(score.row(i)) as TokenId;
            }
        }
    }
    x_big_t.with_ids(x)
}
