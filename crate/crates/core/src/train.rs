//! Optimization loop: random crops, forward corruption, the score-entropy
//! loss, and AdamW updates, with checkpoint/resume that reproduces the
//! uninterrupted trajectory bit for bit.
//!
//! All randomness for step `k` is drawn from streams keyed by
//! `(seed, k, row)`, so a resumed run needs only the step counter to
//! regenerate the same crops, times and masks.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;

use crate::diffusion::transition::corrupt_ids;
use crate::diffusion::{dwdse_sample, LossSample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::net::{Cursor, ForwardRecord, ScoreNetwork};
use crate::rng;
use crate::tokens::{TokenId, TokenSequence};

const MAGIC: &[u8; 4] = b"AIDT";
const VERSION: u16 = 1;

/// How training sequences are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    /// Each position masked independently with probability 1 - ᾱ(t).
    Independent,
    /// One contiguous span of round((1 - ᾱ(t))·L) positions at a uniform
    /// offset.
    Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Linear warmup length; the learning rate reaches its target at this step.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    /// Loss EMA is written to the metrics log every this many steps.
    pub log_interval: u64,
    pub ema_decay: f64,
    /// Times drawn per sequence per step.
    pub time_samples: usize,
    /// Accept sequences shorter than the crop by repeating them cyclically.
    pub loop_padding: bool,
    pub corruption: CorruptionMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            sequence_length: 256,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            warmup_steps: 1000,
            grad_clip: 1.0,
            total_steps: 20_000,
            checkpoint_interval: 1000,
            log_interval: 50,
            ema_decay: 0.99,
            time_samples: 1,
            loop_padding: false,
            corruption: CorruptionMode::Independent,
            seed: 0,
        }
    }

    /// Batch 128 of 1024-token crops at learning rate 1e-6.
    pub fn paper() -> Self {
        Self {
            batch_size: 128,
            sequence_length: 1024,
            learning_rate: 1e-6,
            total_steps: 400_000,
            ..Self::desk()
        }
    }

    /// Short crops and a large learning rate for memorizing tiny corpora.
    pub fn overfit() -> Self {
        Self {
            batch_size: 8,
            sequence_length: 32,
            learning_rate: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            total_steps: 2000,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "overfit" => Ok(Self::overfit()),
            other => Err(Error::InvalidConfig(format!(
                "unknown training profile {other:?} (expected desk, paper or overfit)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be > 0");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return bad("log_interval and checkpoint_interval must be >= 1");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.time_samples == 0 {
            return bad("time_samples must be >= 1");
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Seeded source of fixed-length crops. Batch `k` depends only on
/// (corpus, config, k).
#[derive(Debug, Clone)]
pub struct Batches {
    corpus: Vec<Vec<TokenId>>,
    /// Cumulative count of crop positions per sequence.
    cumulative: Vec<u64>,
    vocab_size: u32,
    length: usize,
    batch_size: usize,
    seed: u64,
    next: u64,
}

/// Validates the corpus and returns the crop stream starting at step 0.
pub fn make_batches(corpus: &[TokenSequence], config: &TrainConfig) -> Result<Batches> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let vocab_size = first.vocab_size();
    let length = config.sequence_length;
    let mut cumulative = Vec::with_capacity(corpus.len());
    let mut total = 0u64;
    for seq in corpus {
        if seq.vocab_size() != vocab_size {
            return Err(Error::DimensionMismatch {
                left: seq.vocab_size() as usize,
                right: vocab_size as usize,
            });
        }
        if seq.masked_count() > 0 {
            return Err(Error::InvalidParameter("training corpus contains MASK tokens".into()));
        }
        let crops = if seq.len() >= length {
            seq.len() - length + 1
        } else if config.loop_padding && !seq.is_empty() {
            seq.len()
        } else {
            return Err(Error::SequenceTooShort {
                len: seq.len(),
                needed: length,
            });
        };
        total += crops as u64;
        cumulative.push(total);
    }
    Ok(Batches {
        corpus: corpus.iter().map(|s| s.ids().to_vec()).collect(),
        cumulative,
        vocab_size,
        length,
        batch_size: config.batch_size,
        seed: config.seed,
        next: 0,
    })
}

impl Batches {
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Draws a (sequence, offset) pair uniformly over all crop positions.
    pub fn draw_crop(&self, rng: &mut rng::Rng) -> (usize, usize) {
        let total = *self.cumulative.last().expect("non-empty corpus");
        let k = rng.random_range(0..total);
        let seq = self.cumulative.partition_point(|&c| c <= k);
        let before = if seq == 0 { 0 } else { self.cumulative[seq - 1] };
        (seq, (k - before) as usize)
    }

    fn crop(&self, seq: usize, offset: usize) -> Vec<TokenId> {
        let s = &self.corpus[seq];
        (0..self.length).map(|j| s[(offset + j) % s.len()]).collect()
    }

    pub fn batch(&self, step: u64) -> Vec<Vec<TokenId>> {
        let mut r = rng::stream(self.seed, &[rng::domain::BATCH, step]);
        (0..self.batch_size)
            .map(|_| {
                let (seq, offset) = self.draw_crop(&mut r);
                self.crop(seq, offset)
            })
            .collect()
    }

    pub fn seek(&mut self, step: u64) {
        self.next = step;
    }
}

impl Iterator for Batches {
    type Item = Vec<Vec<TokenId>>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

/// One corrupted training example.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedRow {
    pub row: usize,
    pub t: f64,
    pub x_t: Vec<TokenId>,
}

/// The times and corruptions used at `step`, independent of any model state.
pub fn corrupt_batch(
    batch: &[Vec<TokenId>],
    vocab_size: u32,
    step: u64,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<CorruptedRow>> {
    let (eps, horizon) = (schedule.epsilon, schedule.horizon());
    let mut out = Vec::with_capacity(batch.len() * config.time_samples);
    for (row, x0) in batch.iter().enumerate() {
        let mut r = rng::stream(config.seed, &[rng::domain::CORRUPT, step, row as u64]);
        for _ in 0..config.time_samples {
            let t = r.random_range(eps..=horizon);
            let x_t = match config.corruption {
                CorruptionMode::Independent => corrupt_ids(x0, vocab_size, t, schedule, &mut r)?,
                CorruptionMode::Span => {
                    let p = schedule.mask_probability(t)?;
                    let span = ((p * x0.len() as f64).round() as usize).min(x0.len());
                    let start = r.random_range(0..=x0.len() - span);
                    let mut x = x0.clone();
                    x[start..start + span].iter_mut().for_each(|v| *v = vocab_size);
                    x
                }
            };
            out.push(CorruptedRow { row, t, x_t });
        }
    }
    Ok(out)
}

/// Optimizer state plus the network it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub net: ScoreNetwork,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    /// Exponential moving average of the per-step loss; NaN before step 1.
    pub loss_ema: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub loss_ema: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

impl TrainState {
    pub fn new(net: ScoreNetwork) -> Self {
        let n = net.parameter_count();
        Self {
            step: 0,
            net,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            loss_ema: f64::NAN,
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.loss_ema.to_le_bytes())?;
        w.write_all(&(self.first_moment.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.first_moment.len() * 16);
        for v in self.first_moment.iter().chain(&self.second_moment) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        self.net.write_to(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("write to Vec cannot fail");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::IncompatibleCheckpoint(m);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).map_err(bad)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = cur.u16().map_err(bad)?;
        if version != VERSION {
            return Err(bad(format!("version {version}, expected {VERSION}")));
        }
        let step = cur.u64().map_err(bad)?;
        let loss_ema = cur.f64().map_err(bad)?;
        let n = cur.u64().map_err(bad)? as usize;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| cur.f64().map_err(bad)).collect()
        };
        let first_moment = read(n)?;
        let second_moment = read(n)?;
        let net = ScoreNetwork::from_bytes(&bytes[cur.pos..])?;
        if net.parameter_count() != n {
            return Err(bad(format!(
                "optimizer holds {n} moments, network has {} parameters",
                net.parameter_count()
            )));
        }
        Ok(Self {
            step,
            net,
            first_moment,
            second_moment,
            loss_ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Loss on a batch and the samples needed to backpropagate it. The value is
/// the Monte-Carlo estimate averaged over rows and positions.
pub fn batch_loss(
    net: &ScoreNetwork,
    batch: &[Vec<TokenId>],
    rows: Vec<CorruptedRow>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(f64, Vec<LossSample<ForwardRecord>>)> {
    let tokens: usize = batch.iter().map(Vec::len).sum();
    let weight = (schedule.horizon() - schedule.epsilon) / (config.time_samples * tokens) as f64;
    let mut value = 0.0;
    let mut samples = Vec::with_capacity(rows.len());
    for r in rows {
        let s = dwdse_sample(&batch[r.row], r.x_t, r.t, weight, net, schedule)?;
        value += s.value;
        samples.push(s);
    }
    if !value.is_finite() {
        let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
        return Err(Error::NumericalFailure(format!("non-finite loss {value}; t samples {ts:?}")));
    }
    Ok((value, samples))
}

/// One AdamW update on the batch for `state.step`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Vec<TokenId>],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<StepReport> {
    let vocab = state.net.config().vocab_size;
    if batch.iter().any(|r| r.len() > state.net.config().context_length) {
        return Err(Error::InvalidConfig(format!(
            "sequence length exceeds model context {}",
            state.net.config().context_length
        )));
    }
    let rows = corrupt_batch(batch, vocab, state.step, config, schedule)?;
    let (loss, samples) = batch_loss(&state.net, batch, rows, schedule, config)?;
    let grads = state.net.gradients(&samples)?;
    let mut g = grads.flat().to_vec();
    let grad_norm = grads.norm();
    if config.grad_clip > 0.0 && grad_norm > config.grad_clip {
        let f = config.grad_clip / grad_norm;
        g.iter_mut().for_each(|v| *v *= f);
    }
    let lr = config.learning_rate_at(state.step);
    let t = (state.step + 1) as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let trainable = state.net.trainable_mask();
    let params = state.net.params_mut();
    for k in 0..params.len() {
        if !trainable[k] {
            continue;
        }
        let m = b1 * state.first_moment[k] + (1.0 - b1) * g[k];
        let v = b2 * state.second_moment[k] + (1.0 - b2) * g[k] * g[k];
        state.first_moment[k] = m;
        state.second_moment[k] = v;
        let update = (m / c1) / ((v / c2).sqrt() + config.adam_epsilon) + config.weight_decay * params[k];
        // Parameters stay representable in f32 so checkpoints are lossless.
        params[k] = (params[k] - lr * update) as f32 as f64;
    }
    if !state.net.is_finite() {
        return Err(Error::NumericalFailure(format!("non-finite parameters after step {}", state.step)));
    }
    state.loss_ema = if state.loss_ema.is_nan() {
        loss
    } else {
        config.ema_decay * state.loss_ema + (1.0 - config.ema_decay) * loss
    };
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        loss,
        loss_ema: state.loss_ema,
        grad_norm,
        learning_rate: lr,
    })
}

/// CSV log of `step,loss_ema,wall_time`.
pub struct MetricsLog<W: Write> {
    out: W,
    started: Instant,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W, write_header: bool) -> Result<Self> {
        if write_header {
            writeln!(out, "step,loss_ema,wall_time")?;
        }
        Ok(Self {
            out,
            started: Instant::now(),
        })
    }

    pub fn record(&mut self, report: &StepReport) -> Result<()> {
        writeln!(
            self.out,
            "{},{:.6},{:.3}",
            report.step,
            report.loss_ema,
            self.started.elapsed().as_secs_f64()
        )?;
        self.out.flush()?;
        Ok(())
    }
}

/// Runs steps until `state.step == until`, logging every `log_interval`
/// steps and calling `checkpoint` every `checkpoint_interval` steps.
pub fn train_until<W: Write>(
    state: &mut TrainState,
    batches: &Batches,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    until: u64,
    mut log: Option<&mut MetricsLog<W>>,
    mut checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Option<StepReport>> {
    config.validate()?;
    if config.sequence_length > state.net.config().context_length {
        return Err(Error::InvalidConfig(format!(
            "sequence_length {} exceeds model context {}",
            config.sequence_length,
            state.net.config().context_length
        )));
    }
    if batches.vocab_size() != state.net.config().vocab_size {
        return Err(Error::DimensionMismatch {
            left: batches.vocab_size() as usize,
            right: state.net.config().vocab(),
        });
    }
    let mut last = None;
    while state.step < until {
        let batch = batches.batch(state.step);
        let report = train_step(state, &batch, schedule, config)?;
        if report.step % config.log_interval == 0 {
            log::info!(
                "step {} loss {:.4} ema {:.4} |g| {:.3e} lr {:.2e}",
                report.step,
                report.loss,
                report.loss_ema,
                report.grad_norm,
                report.learning_rate
            );
            if let Some(l) = log.as_deref_mut() {
                l.record(&report)?;
            }
        }
        if report.step % config.checkpoint_interval == 0 {
            checkpoint(state)?;
        }
        last = Some(report);
    }
    Ok(last)
}
