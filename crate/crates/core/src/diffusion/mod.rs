//! Absorbing-state continuous-time discrete diffusion.

pub mod loss;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod transition;

pub use loss::{
    dwdse_integrand, dwdse_loss, dwdse_sample, score_entropy_term, LossEstimate, LossSample,
    ScoreCotangent,
};
pub use sampler::{reverse_step, sample_reverse, time_grid};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use score::{true_concrete_score, AnalyticScore, ConcreteScore, ScoreFn};
pub use transition::{corrupt, forward_marginal, AbsorbingTransition, ForwardMarginal};
