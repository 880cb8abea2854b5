//! Time-conditioned encoder-only transformer approximating the concrete
//! score, with rotary positions, adaLN time conditioning and hand-written
//! reverse-mode gradients.

pub mod config;
mod model;
pub mod ops;

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, ParamEntry, ParamLayout};
use config::Slots;
pub use model::{log_prior, ForwardRecord};

use crate::diffusion::{ConcreteScore, LossSample, ScoreFn};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokens::{TokenId, TokenSequence};

const MAGIC: &[u8; 4] = b"AIDD";
const VERSION: u16 = 1;

#[derive(Clone)]
pub struct ScoreNetwork {
    config: ModelConfig,
    layout: ParamLayout,
    slots: Slots,
    params: Vec<f64>,
    frozen: Vec<bool>,
}

impl std::fmt::Debug for ScoreNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreNetwork")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .finish()
    }
}

impl PartialEq for ScoreNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Parameter gradients, laid out like the parameters. Frozen tensors are
/// excluded from [`Gradients::named`] and hold zeros in the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    flat: Vec<f64>,
    names: Vec<(String, Range<usize>)>,
}

impl Gradients {
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().map(|(n, r)| (n.as_str(), &self.flat[r.clone()]))
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, r)| &self.flat[r.clone()])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.flat.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ScoreNetwork {
    /// Seeded initialization. Conditioning projections and the output head
    /// start at zero (adaLN-Zero), so a fresh network scores every
    /// candidate at exactly exp([`log_prior`]).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let mut params = vec![0.0; layout.total()];
        let mut r = rng::stream(seed, &[rng::domain::INIT]);
        for e in layout.entries() {
            let std = if e.name == "tok_emb" {
                1.0
            } else if e.name.ends_with("ada.w") || e.name.starts_with("head.") || e.shape.len() == 1 {
                0.0
            } else {
                1.0 / (e.shape[0] as f64).sqrt()
            };
            if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("positive std");
                for p in &mut params[e.range()] {
                    *p = round_f32(dist.sample(&mut r));
                }
            }
        }
        let frozen = vec![false; layout.entries().len()];
        let slots = layout.slots(config.depth);
        Ok(Self {
            config,
            layout,
            slots,
            params,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Direct access to the flat parameter buffer. Values written here are
    /// saved as f32 by [`ScoreNetwork::save`].
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|e| &self.params[e.range()])
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let idx = self
            .layout
            .entries()
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::InvalidParameter(format!("no parameter named {name}")))?;
        self.frozen[idx] = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    /// Per-element trainability mask over the flat buffer.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        for (e, &fz) in self.layout.entries().iter().zip(&self.frozen) {
            if fz {
                mask[e.range()].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, ids: &[TokenId], t: f64) -> Result<()> {
        if ids.len() > self.config.context_length {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                context: self.config.context_length,
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidParameter("empty input sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id > self.config.vocab_size) {
            return Err(Error::InvalidParameter(format!("token {bad} outside model vocabulary")));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTime { t, horizon: 1.0 });
        }
        Ok(())
    }

    /// Full forward pass with the record needed for gradients. Keys outside
    /// `valid` are invisible to attention; `offset` shifts absolute positions.
    pub fn forward_with_record(
        &self,
        ids: &[TokenId],
        t: f64,
        offset: usize,
        valid: Range<usize>,
    ) -> Result<(ConcreteScore, ForwardRecord)> {
        self.check_input(ids, t)?;
        if valid.is_empty() || valid.end > ids.len() {
            return Err(Error::InvalidParameter(format!("bad attention range {valid:?}")));
        }
        let rec = self.forward_record(ids, t, offset, valid);
        if let Some(i) = rec.scores.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::NumericalFailure(format!(
                "score {} at flat index {i} is not a positive finite number",
                rec.scores[i]
            )));
        }
        let score = ConcreteScore::new(self.config.vocab(), rec.scores.clone());
        Ok((score, rec))
    }

    pub fn forward(&self, x: &TokenSequence, t: f64) -> Result<ConcreteScore> {
        if x.vocab_size() != self.config.vocab_size {
            return Err(Error::DimensionMismatch {
                left: x.vocab_size() as usize,
                right: self.config.vocab(),
            });
        }
        self.forward_with_record(x.ids(), t, 0, 0..x.len()).map(|(s, _)| s)
    }

    pub fn forward_batch(&self, xs: &[TokenSequence], t: f64) -> Result<Vec<ConcreteScore>> {
        xs.iter().map(|x| self.forward(x, t)).collect()
    }

    /// Gradient of Σ ⟨cotangent, score⟩ over the recorded samples.
    pub fn gradients(&self, samples: &[LossSample<ForwardRecord>]) -> Result<Gradients> {
        let mut flat = vec![0.0; self.params.len()];
        let n = self.config.vocab();
        for s in samples {
            let len = s.record.ids.len();
            if s.record.ids != s.x_t {
                return Err(Error::InvalidParameter("record does not match sample input".into()));
            }
            let mut dscore = vec![0.0; len * n];
            for (i, row) in &s.cotangent.rows {
                dscore[i * n..(i + 1) * n].copy_from_slice(row);
            }
            self.backward_record(&s.record, &dscore, &mut flat);
        }
        if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite gradient at flat index {i}")));
        }
        let mut names = Vec::new();
        for (e, &fz) in self.layout.entries().iter().zip(&self.frozen) {
            if fz {
                flat[e.range()].iter_mut().for_each(|g| *g = 0.0);
            } else {
                names.push((e.name.clone(), e.range()));
            }
        }
        Ok(Gradients { flat, names })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [
            c.vocab_size,
            c.dim as u32,
            c.depth as u32,
            c.heads as u32,
            c.context_length as u32,
            c.mlp_ratio as u32,
            c.time_features as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let entries = self.layout.entries();
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for e in entries {
            w.write_all(&(e.name.len() as u16).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.shape.len() as u8])?;
            for &dim in &e.shape {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
        }
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for &p in &self.params {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("write to Vec cannot fail");
        v
    }

    /// Parses a checkpoint; returns the network and the number of bytes read.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |m: String| Error::IncompatibleCheckpoint(m);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).map_err(bad)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = cur.u16().map_err(bad)?;
        if version != VERSION {
            return Err(bad(format!("version {version}, expected {VERSION}")));
        }
        let mut f = [0u32; 7];
        for v in &mut f {
            *v = cur.u32().map_err(bad)?;
        }
        let config = ModelConfig {
            vocab_size: f[0],
            dim: f[1] as usize,
            depth: f[2] as usize,
            heads: f[3] as usize,
            context_length: f[4] as usize,
            mlp_ratio: f[5] as usize,
            time_features: f[6] as usize,
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let layout = ParamLayout::for_config(&config);
        let count = cur.u32().map_err(bad)? as usize;
        if count != layout.entries().len() {
            return Err(bad(format!("manifest lists {count} tensors, config implies {}", layout.entries().len())));
        }
        for e in layout.entries() {
            let name_len = cur.u16().map_err(bad)? as usize;
            let name = cur.take(name_len).map_err(bad)?;
            let ndim = cur.take(1).map_err(bad)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32().map_err(bad)? as usize);
            }
            if name != e.name.as_bytes() || shape != e.shape {
                return Err(bad(format!("manifest entry mismatch at {}", e.name)));
            }
        }
        let payload = cur.take(layout.total() * 4).map_err(bad)?;
        let params: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        let slots = layout.slots(config.depth);
        let frozen = vec![false; layout.entries().len()];
        Ok((
            Self {
                config,
                layout,
                slots,
                params,
                frozen,
            },
            cur.pos,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - used
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }
    pub fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl ScoreFn for ScoreNetwork {
    type Record = ForwardRecord;

    fn vocab_size(&self) -> u32 {
        self.config.vocab_size
    }

    fn evaluate(&self, x: &[TokenId], t: f64) -> Result<(ConcreteScore, ForwardRecord)> {
        self.forward_with_record(x, t, 0, 0..x.len())
    }
}
