use crate::error::{Error, Result};

/// Shape of the score transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Clean alphabet size N; the input embedding has one extra row for MASK.
    pub vocab_size: u32,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub context_length: usize,
    /// Hidden width of the MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Width of the sinusoidal time features fed to the time MLP.
    pub time_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            dim: 128,
            depth: 4,
            heads: 4,
            context_length: 256,
            mlp_ratio: 4,
            time_features: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.dim / self.heads).is_multiple_of(2) {
            return bad(format!("head width {} must be even for rotary encoding", self.dim / self.heads));
        }
        if self.context_length == 0 {
            return bad("context_length must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if self.time_features < 2 || !self.time_features.is_multiple_of(2) {
            return bad(format!("time_features {} must be even and >= 2", self.time_features));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn vocab(&self) -> usize {
        self.vocab_size as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors laid out back to back in one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockSlots {
    pub ada_w: usize,
    pub ada_b: usize,
    pub wqkv: usize,
    pub wo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub tok_emb: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub blocks: Vec<BlockSlots>,
    pub final_ada_w: usize,
    pub final_ada_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

impl ParamLayout {
    pub fn for_config(c: &ModelConfig) -> Self {
        let (d, n, f, m) = (c.dim, c.vocab(), c.time_features, c.hidden());
        let mut shapes: Vec<(String, Vec<usize>)> = vec![
            ("tok_emb".into(), vec![n + 1, d]),
            ("time.w1".into(), vec![f, d]),
            ("time.b1".into(), vec![d]),
            ("time.w2".into(), vec![d, d]),
            ("time.b2".into(), vec![d]),
        ];
        for b in 0..c.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            shapes.extend([
                (p("ada.w"), vec![d, 6 * d]),
                (p("ada.b"), vec![6 * d]),
                (p("attn.wqkv"), vec![d, 3 * d]),
                (p("attn.wo"), vec![d, d]),
                (p("mlp.w1"), vec![d, m]),
                (p("mlp.b1"), vec![m]),
                (p("mlp.w2"), vec![m, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        shapes.extend([
            ("final.ada.w".into(), vec![d, 2 * d]),
            ("final.ada.b".into(), vec![2 * d]),
            ("head.w".into(), vec![d, n]),
            ("head.b".into(), vec![n]),
        ]);
        let mut offset = 0;
        let entries = shapes
            .into_iter()
            .map(|(name, shape)| {
                let e = ParamEntry { name, shape, offset };
                offset += e.len();
                e
            })
            .collect();
        Self { entries, total: offset }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub(crate) fn slots(&self, depth: usize) -> Slots {
        let off = |name: &str| self.find(name).expect("layout entry").offset;
        Slots {
            tok_emb: off("tok_emb"),
            time_w1: off("time.w1"),
            time_b1: off("time.b1"),
            time_w2: off("time.w2"),
            time_b2: off("time.b2"),
            blocks: (0..depth)
                .map(|b| {
                    let o = |s: &str| off(&format!("blocks.{b}.{s}"));
                    BlockSlots {
                        ada_w: o("ada.w"),
                        ada_b: o("ada.b"),
                        wqkv: o("attn.wqkv"),
                        wo: o("attn.wo"),
                        w1: o("mlp.w1"),
                        b1: o("mlp.b1"),
                        w2: o("mlp.w2"),
                        b2: o("mlp.b2"),
                    }
                })
                .collect(),
            final_ada_w: off("final.ada.w"),
            final_ada_b: off("final.ada.b"),
            head_w: off("head.w"),
            head_b: off("head.b"),
        }
    }
}
