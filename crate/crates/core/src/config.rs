//! Run configuration: a `key = value` text file with dotted section keys,
//! overridable per key, and printable in fully resolved form.
//!
//! ```text
//! # comment
//! seed = 7
//! codec.codebook_size = 64
//! train.profile = overfit
//! train.batch_size = 4
//! ```
//!
//! `train.profile` selects the base training settings; every other
//! `train.*` key overrides that base regardless of line order. Unknown keys
//! are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::codec::CodecParams;
use crate::diffusion::schedule::ScheduleKind;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::inpaint::InpaintConfig;
use crate::metrics::SpectrogramParams;
use crate::net::ModelConfig;
use crate::train::{CorruptionMode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecParams,
    pub schedule: NoiseSchedule,
    pub model: ModelConfig,
    pub train_profile: String,
    pub train: TrainConfig,
    pub inpaint: InpaintConfig,
    pub metrics: SpectrogramParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let codec = CodecParams::default();
        Self {
            seed: 0,
            model: ModelConfig {
                vocab_size: codec.codebook_size as u32,
                ..ModelConfig::default()
            },
            codec,
            schedule: NoiseSchedule::default(),
            train_profile: "desk".into(),
            train: TrainConfig::desk(),
            inpaint: InpaintConfig::default(),
            metrics: SpectrogramParams::default(),
        }
    }
}

/// Parsed but not yet applied `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigEntries(BTreeMap<String, String>);

impl ConfigEntries {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.0.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn from_entries(entries: &ConfigEntries) -> Result<Self> {
        let mut c = Self::default();
        let map = &entries.0;
        if let Some(p) = map.get("train.profile") {
            c.train = TrainConfig::profile(p).map_err(|e| Error::Config(e.to_string()))?;
            c.train_profile = p.clone();
        }
        let mut survival = None;
        let mut rate = None;
        let mut kind = None;
        for (key, v) in map {
            let k = key.as_str();
            match k {
                "seed" => c.seed = parse(k, v)?,
                "codec.sample_rate" => c.codec.sample_rate = parse(k, v)?,
                "codec.frame_length" => c.codec.frame_length = parse(k, v)?,
                "codec.hop_length" => c.codec.hop_length = parse(k, v)?,
                "codec.codebook_size" => c.codec.codebook_size = parse(k, v)?,
                "codec.bands" => c.codec.bands = parse(k, v)?,
                "codec.max_iterations" => c.codec.max_iterations = parse(k, v)?,
                "schedule.kind" => kind = Some(v.clone()),
                "schedule.terminal_survival" => survival = Some(parse::<f64>(k, v)?),
                "schedule.rate" => rate = Some(parse::<f64>(k, v)?),
                "schedule.epsilon" => c.schedule.epsilon = parse(k, v)?,
                "model.dim" => c.model.dim = parse(k, v)?,
                "model.depth" => c.model.depth = parse(k, v)?,
                "model.heads" => c.model.heads = parse(k, v)?,
                "model.context_length" => c.model.context_length = parse(k, v)?,
                "model.mlp_ratio" => c.model.mlp_ratio = parse(k, v)?,
                "model.time_features" => c.model.time_features = parse(k, v)?,
                "train.profile" => {}
                "train.batch_size" => c.train.batch_size = parse(k, v)?,
                "train.sequence_length" => c.train.sequence_length = parse(k, v)?,
                "train.learning_rate" => c.train.learning_rate = parse(k, v)?,
                "train.weight_decay" => c.train.weight_decay = parse(k, v)?,
                "train.beta1" => c.train.beta1 = parse(k, v)?,
                "train.beta2" => c.train.beta2 = parse(k, v)?,
                "train.adam_epsilon" => c.train.adam_epsilon = parse(k, v)?,
                "train.warmup_steps" => c.train.warmup_steps = parse(k, v)?,
                "train.grad_clip" => c.train.grad_clip = parse(k, v)?,
                "train.total_steps" => c.train.total_steps = parse(k, v)?,
                "train.checkpoint_interval" => c.train.checkpoint_interval = parse(k, v)?,
                "train.log_interval" => c.train.log_interval = parse(k, v)?,
                "train.ema_decay" => c.train.ema_decay = parse(k, v)?,
                "train.time_samples" => c.train.time_samples = parse(k, v)?,
                "train.loop_padding" => c.train.loop_padding = parse(k, v)?,
                "train.corruption" => {
                    c.train.corruption = match v.as_str() {
                        "independent" => CorruptionMode::Independent,
                        "span" => CorruptionMode::Span,
                        _ => return Err(Error::Config(format!("{k}: expected independent or span, got {v:?}"))),
                    }
                }
                "inpaint.steps" => c.inpaint.steps = parse(k, v)?,
                "inpaint.context_tokens" => c.inpaint.context_tokens = parse(k, v)?,
                "inpaint.crossfade_ms" => c.inpaint.crossfade_ms = parse(k, v)?,
                "metrics.window" => c.metrics.window = parse(k, v)?,
                "metrics.hop" => c.metrics.hop = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        c.schedule.kind = match kind.as_deref().unwrap_or("log_linear") {
            "log_linear" => {
                if rate.is_some() {
                    return Err(Error::Config("schedule.rate applies only to schedule.kind = constant".into()));
                }
                ScheduleKind::LogLinear {
                    terminal_survival: survival.unwrap_or(1e-3),
                }
            }
            "constant" => {
                if survival.is_some() {
                    return Err(Error::Config(
                        "schedule.terminal_survival applies only to schedule.kind = log_linear".into(),
                    ));
                }
                ScheduleKind::Constant {
                    rate: rate.unwrap_or(10.0),
                }
            }
            other => return Err(Error::Config(format!("schedule.kind: unknown schedule {other:?}"))),
        };
        c.train.seed = c.seed;
        c.inpaint.seed = c.seed;
        c.model.vocab_size = c.codec.codebook_size as u32;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&ConfigEntries::parse(text)?)
    }

    /// Config file (if any) followed by `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut e = match path {
            Some(p) => ConfigEntries::load(p)?,
            None => ConfigEntries::default(),
        };
        for o in overrides {
            e.set(o)?;
        }
        Self::from_entries(&e)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.codec.validate().map_err(wrap)?;
        self.schedule.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.metrics.validate().map_err(wrap)?;
        if self.train.sequence_length > self.model.context_length {
            return Err(Error::Config(format!(
                "train.sequence_length {} exceeds model.context_length {}",
                self.train.sequence_length, self.model.context_length
            )));
        }
        if self.inpaint.steps == 0 || self.inpaint.context_tokens == 0 {
            return Err(Error::Config("inpaint.steps and inpaint.context_tokens must be >= 1".into()));
        }
        if !(self.inpaint.crossfade_ms >= 0.0 && self.inpaint.crossfade_ms.is_finite()) {
            return Err(Error::Config("inpaint.crossfade_ms must be >= 0".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, one per line, sorted.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("codec.sample_rate", self.codec.sample_rate.to_string()),
            ("codec.frame_length", self.codec.frame_length.to_string()),
            ("codec.hop_length", self.codec.hop_length.to_string()),
            ("codec.codebook_size", self.codec.codebook_size.to_string()),
            ("codec.bands", self.codec.bands.to_string()),
            ("codec.max_iterations", self.codec.max_iterations.to_string()),
            ("schedule.epsilon", self.schedule.epsilon.to_string()),
            ("model.dim", self.model.dim.to_string()),
            ("model.depth", self.model.depth.to_string()),
            ("model.heads", self.model.heads.to_string()),
            ("model.context_length", self.model.context_length.to_string()),
            ("model.mlp_ratio", self.model.mlp_ratio.to_string()),
            ("model.time_features", self.model.time_features.to_string()),
            ("train.profile", self.train_profile.clone()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.sequence_length", self.train.sequence_length.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.beta1", self.train.beta1.to_string()),
            ("train.beta2", self.train.beta2.to_string()),
            ("train.adam_epsilon", self.train.adam_epsilon.to_string()),
            ("train.warmup_steps", self.train.warmup_steps.to_string()),
            ("train.grad_clip", self.train.grad_clip.to_string()),
            ("train.total_steps", self.train.total_steps.to_string()),
            ("train.checkpoint_interval", self.train.checkpoint_interval.to_string()),
            ("train.log_interval", self.train.log_interval.to_string()),
            ("train.ema_decay", self.train.ema_decay.to_string()),
            ("train.time_samples", self.train.time_samples.to_string()),
            ("train.loop_padding", self.train.loop_padding.to_string()),
            (
                "train.corruption",
                match self.train.corruption {
                    CorruptionMode::Independent => "independent".into(),
                    CorruptionMode::Span => "span".into(),
                },
            ),
            ("inpaint.steps", self.inpaint.steps.to_string()),
            ("inpaint.context_tokens", self.inpaint.context_tokens.to_string()),
            ("inpaint.crossfade_ms", self.inpaint.crossfade_ms.to_string()),
            ("metrics.window", self.metrics.window.to_string()),
            ("metrics.hop", self.metrics.hop.to_string()),
        ];
        match self.schedule.kind {
            ScheduleKind::LogLinear { terminal_survival } => {
                kv.push(("schedule.kind", "log_linear".into()));
                kv.push(("schedule.terminal_survival", terminal_survival.to_string()));
            }
            ScheduleKind::Constant { rate } => {
                kv.push(("schedule.kind", "constant".into()));
                kv.push(("schedule.rate", rate.to_string()));
            }
        }
        kv.sort();
        let mut s = String::new();
        for (k, v) in kv {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn write_resolved(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn profile_then_overrides_in_any_order() {
        let c = RunConfig::parse("train.batch_size = 3\ntrain.profile = overfit # memorize\n").unwrap();
        assert_eq!(c.train.batch_size, 3);
        assert_eq!(c.train.learning_rate, TrainConfig::overfit().learning_rate);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert!(matches!(RunConfig::parse("model.width = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.dim"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.dim = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.heads = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("schedule.rate = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_and_seed_fans_out() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "seed = 4\nschedule.kind = constant\nschedule.rate = 5\n").unwrap();
        let c = RunConfig::load(Some(&p), &["seed=9".into(), "codec.codebook_size = 32".into()]).unwrap();
        assert_eq!((c.seed, c.train.seed, c.inpaint.seed), (9, 9, 9));
        assert_eq!(c.model.vocab_size, 32);
        assert_eq!(c.schedule.kind, ScheduleKind::Constant { rate: 5.0 });
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
