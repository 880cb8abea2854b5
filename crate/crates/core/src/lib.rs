//! Audio inpainting with an absorbing-state discrete diffusion over codec
//! tokens.
//!
//! The pipeline: [`codec`] turns a waveform into a token sequence, the
//! [`diffusion`] module defines the forward masking process, loss and reverse
//! sampler, [`net`] provides a transformer score model, [`train`] fits it,
//! [`inpaint`] fills gaps and [`metrics`] scores restorations.

pub mod audio;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod inpaint;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod tokens;
pub mod train;

pub use audio::{read_wav, write_wav, Waveform};
pub use codec::{decode, encode, train_codebook, CodecParams, CodecSpec};
pub use config::RunConfig;
pub use diffusion::{
    dwdse_loss, sample_reverse, true_concrete_score, ConcreteScore, NoiseSchedule, ScoreFn,
};
pub use error::{Error, ErrorClass, Result};
pub use inpaint::{inpaint, make_corrupted, GapSpec, InpaintConfig, InpaintResult};
pub use metrics::{frechet_distance, lsd, EmbeddingStats, SpectrogramParams};
pub use net::{Gradients, ModelConfig, ScoreNetwork};
pub use tokens::{TokenId, TokenSequence};
pub use train::{make_batches, train_step, TrainConfig, TrainState};
