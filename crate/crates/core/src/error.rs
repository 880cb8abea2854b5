use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    // token codec
    #[error("corpus too small: {frames} frames available, {needed} required")]
    CorpusTooSmall { frames: usize, needed: usize },
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("audio too short: {len} samples, need at least {needed}")]
    AudioTooShort { len: usize, needed: usize },
    #[error("MASK token at position {position} cannot be decoded")]
    MaskedTokenInDecode { position: usize },
    #[error("malformed token stream: {0}")]
    MalformedTokenStream(String),
    #[error("malformed codec file: {0}")]
    MalformedCodec(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // diffusion
    #[error("time {t} outside [0, {horizon}]")]
    InvalidTime { t: f64, horizon: f64 },
    #[error("clean sequence contains MASK at position {position}")]
    InvalidCleanToken { position: usize },
    #[error("x_t disagrees with x_0 at unmasked position {position}")]
    InconsistentCorruption { position: usize },
    #[error("invalid score {value} at position {position}, candidate {candidate}")]
    InvalidScore {
        position: usize,
        candidate: usize,
        value: f64,
    },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("reverse step too large: jump cap bound at {capped} of {positions} positions")]
    StepTooLarge { capped: usize, positions: usize },

    // score network
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    // trainer
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sequence of length {len} shorter than crop length {needed}")]
    SequenceTooShort { len: usize, needed: usize },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    // inpainting
    #[error("invalid gap: {0}")]
    InvalidGap(String),
    #[error("masked run of {run} tokens exceeds usable context of {context}")]
    GapTooWide { run: usize, context: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),

    // metrics
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid embedding statistics: {0}")]
    InvalidStats(String),
    #[error("no counterpart for {}", .0.display())]
    PairingError(PathBuf),

    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NumericalFailure(_)
            | Error::StepTooLarge { .. }
            | Error::InvalidScore { .. }
            | Error::InvalidModel(_) => ErrorClass::Numerical,
            Error::InvalidParameter(_) | Error::InvalidConfig(_) | Error::Config(_) => {
                ErrorClass::Usage
            }
            _ => ErrorClass::Data,
        }
    }
}
