use crate::error::{Error, Result};

/// Default lower end of the diffusion time interval.
pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// Survival decays linearly from 1 at t=0 to `terminal_survival` at
    /// t=1, i.e. total noise `-ln(1 - (1 - terminal_survival) t)`.
    LogLinear { terminal_survival: f64 },
    /// Constant rate; total noise `rate * t`.
    Constant { rate: f64 },
}

/// Scalar noise schedule σ(t) on the horizon [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Sampling floor; diffusion times live in `[epsilon, horizon]`.
    pub epsilon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::log_linear(1e-3)
    }
}

impl NoiseSchedule {
    pub const HORIZON: f64 = 1.0;

    pub fn log_linear(terminal_survival: f64) -> Self {
        Self {
            kind: ScheduleKind::LogLinear { terminal_survival },
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant { rate },
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn horizon(&self) -> f64 {
        Self::HORIZON
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ScheduleKind::LogLinear { terminal_survival: d } => d > 0.0 && d < 1.0,
            ScheduleKind::Constant { rate } => rate > 0.0 && rate.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("bad schedule {:?}", self.kind)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < Self::HORIZON) {
            return Err(Error::InvalidParameter(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        Ok(())
    }

    /// Training schedules must leave the terminal state almost fully masked.
    pub fn validate_terminal(&self) -> Result<()> {
        self.validate()?;
        let end = self.survival(Self::HORIZON)?;
        if end > 1e-3 * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "terminal survival {end} exceeds 1e-3"
            )));
        }
        Ok(())
    }

    fn check(&self, t: f64) -> Result<()> {
        if !(0.0..=Self::HORIZON).contains(&t) {
            return Err(Error::InvalidTime {
                t,
                horizon: Self::HORIZON,
            });
        }
        Ok(())
    }

    /// σ(t).
    pub fn rate(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(match self.kind {
            ScheduleKind::LogLinear { terminal_survival: d } => (1.0 - d) / (1.0 - (1.0 - d) * t),
            ScheduleKind::Constant { rate } => rate,
        })
    }

    /// ∫₀ᵗ σ(s) ds.
    pub fn total_noise(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(match self.kind {
            ScheduleKind::LogLinear { terminal_survival: d } => -(-(1.0 - d) * t).ln_1p(),
            ScheduleKind::Constant { rate } => rate * t,
        })
    }

    /// ᾱ(t) = exp(-∫₀ᵗ σ), the probability a token is still unmasked.
    pub fn survival(&self, t: f64) -> Result<f64> {
        Ok((-self.total_noise(t)?).exp())
    }

    /// 1 - ᾱ(t), computed without cancellation for small t.
    pub fn mask_probability(&self, t: f64) -> Result<f64> {
        Ok(-(-self.total_noise(t)?).exp_m1())
    }

    /// ᾱ/(1-ᾱ): the concrete-score ratio from MASK back to the clean token.
    pub fn unmask_ratio(&self, t: f64) -> Result<f64> {
        let noise = self.total_noise(t)?;
        Ok(1.0 / noise.exp_m1())
    }
}
