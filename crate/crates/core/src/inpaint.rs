//! Gap filling: project sample gaps onto token frames, regenerate the masked
//! tokens by clamped reverse diffusion, decode, and splice the result back
//! with a linear crossfade so that audio away from the gaps is untouched.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::{decode_ids, encode, frame_count, CodecSpec};
use crate::diffusion::{sample_reverse, NoiseSchedule, ScoreFn};
use crate::error::{Error, Result};
use crate::net::ScoreNetwork;
use crate::rng;
use crate::tokens::{TokenId, TokenSequence};

/// Half-open sample intervals to regenerate, sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapSpec {
    sample_rate: u32,
    gaps: Vec<[usize; 2]>,
}

impl GapSpec {
    pub fn new(sample_rate: u32, gaps: Vec<(usize, usize)>) -> Result<Self> {
        let spec = Self {
            sample_rate,
            gaps: gaps.into_iter().map(|(s, e)| [s, e]).collect(),
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn empty(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            gaps: Vec::new(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidGap("sample_rate must be positive".into()));
        }
        for (k, g) in self.gaps.iter().enumerate() {
            if g[0] >= g[1] {
                return Err(Error::InvalidGap(format!("gap {k} [{}, {}) is empty", g[0], g[1])));
            }
            if k > 0 && self.gaps[k - 1][1] > g[0] {
                return Err(Error::InvalidGap(format!("gap {k} overlaps or precedes gap {}", k - 1)));
            }
        }
        Ok(())
    }

    /// Checks that every gap lies inside a waveform of `len` samples.
    pub fn validate_for(&self, len: usize, sample_rate: u32) -> Result<()> {
        self.check()?;
        if sample_rate != self.sample_rate {
            return Err(Error::InvalidGap(format!(
                "gaps are at {} Hz, audio at {sample_rate} Hz",
                self.sample_rate
            )));
        }
        if let Some(g) = self.gaps.iter().find(|g| g[1] > len) {
            return Err(Error::InvalidGap(format!(
                "gap [{}, {}) extends past the {len}-sample waveform",
                g[0], g[1]
            )));
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn gaps(&self) -> impl ExactSizeIterator<Item = Range<usize>> + '_ {
        self.gaps.iter().map(|g| g[0]..g[1])
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.gaps.iter().map(|g| g[1] - g[0]).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Smallest frame-aligned length ≥ `len`: `frame + k·hop`.
pub fn padded_length(len: usize, frame: usize, hop: usize) -> usize {
    if len <= frame {
        frame
    } else {
        frame + (len - frame).div_ceil(hop) * hop
    }
}

/// Token indices whose frame `[i·hop, i·hop + frame)` intersects a gap. The
/// waveform is taken as zero-padded to [`padded_length`], so every sample
/// is covered by at least one frame.
pub fn project_gaps(gaps: &GapSpec, codec: &CodecSpec, waveform_len: usize) -> Result<Vec<usize>> {
    gaps.validate_for(waveform_len, codec.sample_rate())?;
    let (frame, hop) = (codec.frame_length(), codec.hop_length());
    let count = frame_count(padded_length(waveform_len, frame, hop), frame, hop);
    let mut out: Vec<usize> = Vec::new();
    for g in gaps.gaps() {
        // i·hop < end and i·hop + frame > start
        let first = (g.start + 1).saturating_sub(frame).div_ceil(hop);
        let last = ((g.end - 1) / hop).min(count - 1);
        for i in first..=last {
            if out.last().is_none_or(|&p| p < i) {
                out.push(i);
            }
        }
    }
    Ok(out)
}

/// Crossfade length in samples for `ms` milliseconds, rounded to even.
pub fn crossfade_samples(sample_rate: u32, ms: f64) -> usize {
    let n = (ms * sample_rate as f64 / 1000.0).round() as usize;
    n + n % 2
}

/// Weight of generated audio at sample `n` for one gap. The ramp of length
/// `c` straddles each boundary, half outside the gap: rising `j/c` from
/// `start - c/2` and falling `(c - j)/c` from `end - c/2`.
pub fn gap_weight(n: usize, gap: &Range<usize>, c: usize) -> f64 {
    if c == 0 {
        return if gap.contains(&n) { 1.0 } else { 0.0 };
    }
    let h = (c / 2) as i64;
    let (n, s, e) = (n as i64, gap.start as i64, gap.end as i64);
    let rise = (n - (s - h)) as f64 / c as f64;
    let fall = ((e + h) - n) as f64 / c as f64;
    rise.min(fall).clamp(0.0, 1.0)
}

/// Range of samples a gap may modify.
pub fn gap_support(gap: &Range<usize>, c: usize, len: usize) -> Range<usize> {
    gap.start.saturating_sub(c / 2)..(gap.end + c / 2).min(len)
}

/// Blends `generated` into `original` over every gap. Where all weights are
/// zero the original sample is copied unchanged.
pub fn splice(original: &[f32], generated: &[f32], gaps: &GapSpec, crossfade: usize) -> Result<Vec<f32>> {
    if generated.len() < original.len() {
        return Err(Error::LengthMismatch {
            left: original.len(),
            right: generated.len(),
        });
    }
    let mut out = original.to_vec();
    let ranges: Vec<Range<usize>> = gaps.gaps().collect();
    for g in &ranges {
        for n in gap_support(g, crossfade, original.len()) {
            let w = ranges
                .iter()
                .map(|r| gap_weight(n, r, crossfade))
                .fold(0.0, f64::max);
            if w > 0.0 {
                out[n] = ((1.0 - w) * original[n] as f64 + w * generated[n] as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Samples `[start, end)` of the full overlap-add decode of `ids`, computed
/// from only the tokens whose frames touch that range.
pub fn decode_range(ids: &[TokenId], codec: &CodecSpec, range: Range<usize>) -> Result<Vec<f32>> {
    let (frame, hop) = (codec.frame_length(), codec.hop_length());
    if ids.is_empty() || range.is_empty() {
        return Ok(Vec::new());
    }
    let total = (ids.len() - 1) * hop + frame;
    if range.end > total {
        return Err(Error::InvalidParameter(format!(
            "sample range {range:?} beyond decoded length {total}"
        )));
    }
    let first = (range.start + 1).saturating_sub(frame).div_ceil(hop);
    let last = (range.end - 1) / hop;
    let last = last.min(ids.len() - 1);
    let w = decode_ids(&ids[first..=last], codec)?;
    let off = first * hop;
    Ok(w.samples()[range.start - off..range.end - off].to_vec())
}

/// Maximal runs of MASK.
pub fn masked_runs(ids: &[TokenId], mask: TokenId) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        if ids[i] == mask {
            let start = i;
            while i < ids.len() && ids[i] == mask {
                i += 1;
            }
            runs.push(start..i);
        } else {
            i += 1;
        }
    }
    runs
}

/// Fills every MASK in `tokens` by clamped reverse diffusion, one context
/// window at a time from left to right. A window of `window` tokens is
/// centered on the leftmost remaining masked run together with every
/// following run that fits inside it; all masked positions in the window
/// are sampled jointly.
pub fn inpaint_tokens<S: ScoreFn>(
    tokens: &TokenSequence,
    score_fn: &S,
    schedule: &NoiseSchedule,
    steps: usize,
    window: usize,
    seed: u64,
) -> Result<TokenSequence> {
    if window == 0 {
        return Err(Error::InvalidParameter("context window must be >= 1".into()));
    }
    let mask = tokens.mask_id();
    let mut x = tokens.ids().to_vec();
    let wlen = window.min(x.len());
    if let Some(r) = masked_runs(&x, mask).into_iter().find(|r| r.len() > wlen) {
        return Err(Error::GapTooWide {
            run: r.len(),
            context: wlen,
        });
    }
    let mut index = 0u64;
    loop {
        let runs = masked_runs(&x, mask);
        let Some(first) = runs.first() else { break };
        let end = runs
            .iter()
            .take_while(|r| r.end - first.start <= wlen)
            .last()
            .map_or(first.end, |r| r.end);
        let start = ((first.start + end).saturating_sub(wlen) / 2).min(x.len() - wlen);
        let span = start..start + wlen;
        let local = tokens.with_ids(x[span.clone()].to_vec())?;
        let clamp: Vec<bool> = local.ids().iter().map(|&id| id != mask).collect();
        let mut r = rng::stream(seed, &[rng::domain::SAMPLE, index]);
        let filled = sample_reverse(&local, score_fn, schedule, steps, &mut r, Some(&clamp))?;
        x[span].copy_from_slice(filled.ids());
        index += 1;
    }
    tokens.with_ids(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintConfig {
    pub steps: usize,
    /// Upper bound on the context window; the network's context length also
    /// bounds it.
    pub context_tokens: usize,
    pub crossfade_ms: f64,
    pub seed: u64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            steps: 128,
            context_tokens: 256,
            crossfade_ms: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapReport {
    pub samples: Range<usize>,
    pub tokens: Range<usize>,
    pub crossfade_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintResult {
    pub waveform: Waveform,
    /// Token sequence of the zero-padded input after inpainting.
    pub tokens: TokenSequence,
    pub gaps: Vec<GapReport>,
}

/// The full restoration pipeline for one clip.
pub fn inpaint(
    w: &Waveform,
    gaps: &GapSpec,
    codec: &CodecSpec,
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    config: &InpaintConfig,
) -> Result<InpaintResult> {
    if !net.is_finite() {
        return Err(Error::InvalidModel("network has non-finite parameters".into()));
    }
    if net.config().vocab() != codec.codebook_size() {
        return Err(Error::InvalidModel(format!(
            "network vocabulary {} does not match codebook size {}",
            net.config().vocab(),
            codec.codebook_size()
        )));
    }
    let (frame, hop) = (codec.frame_length(), codec.hop_length());
    let masked = project_gaps(gaps, codec, w.len())?;
    let mut padded = w.samples().to_vec();
    padded.resize(padded_length(w.len(), frame, hop), 0.0);
    let clean = encode(&Waveform::new(padded, w.sample_rate())?, codec)?;
    let crossfade = crossfade_samples(w.sample_rate(), config.crossfade_ms);
    if gaps.is_empty() {
        return Ok(InpaintResult {
            waveform: w.clone(),
            tokens: clean,
            gaps: Vec::new(),
        });
    }
    let mut ids = clean.ids().to_vec();
    for &i in &masked {
        ids[i] = clean.mask_id();
    }
    let corrupted = clean.with_ids(ids)?;
    let window = config.context_tokens.min(net.config().context_length);
    let restored = inpaint_tokens(&corrupted, net, schedule, config.steps, window, config.seed).map_err(|e| match e {
        Error::InvalidScore { .. } | Error::NumericalFailure(_) => Error::InvalidModel(e.to_string()),
        other => other,
    })?;

    let mut generated = vec![0.0f32; w.len()];
    let mut reports = Vec::with_capacity(gaps.len());
    for g in gaps.gaps() {
        let support = gap_support(&g, crossfade, w.len());
        let audio = decode_range(restored.ids(), codec, support.clone())?;
        generated[support.clone()].copy_from_slice(&audio);
        let first = (g.start + 1).saturating_sub(frame).div_ceil(hop);
        let last = (g.end - 1) / hop;
        reports.push(GapReport {
            samples: g,
            tokens: first..last.min(restored.len() - 1) + 1,
            crossfade_samples: crossfade,
        });
    }
    let samples = splice(w.samples(), &generated, gaps, crossfade)?;
    Ok(InpaintResult {
        waveform: Waveform::new(samples, w.sample_rate())?,
        tokens: restored,
        gaps: reports,
    })
}

/// Start sample of gap `k` of `n` in a clip of `len` samples:
/// `(k+1)·len/(n+1) - gap/2`.
pub fn gap_start(k: usize, n: usize, len: usize, gap: usize) -> Option<usize> {
    ((k + 1) * len / (n + 1)).checked_sub(gap / 2)
}

/// Silences `n_gaps` evenly spaced gaps of `gap_ms` milliseconds.
pub fn make_corrupted(w: &Waveform, gap_ms: f64, n_gaps: usize) -> Result<(Waveform, GapSpec)> {
    let sr = w.sample_rate();
    if n_gaps == 0 {
        return Ok((w.clone(), GapSpec::empty(sr)));
    }
    if !(gap_ms > 0.0 && gap_ms.is_finite()) {
        return Err(Error::InvalidGap(format!("gap length {gap_ms} ms must be positive")));
    }
    let len = w.len();
    let gap = (gap_ms * sr as f64 / 1000.0).round() as usize;
    if gap == 0 || gap > len / 4 {
        return Err(Error::InvalidGap(format!(
            "gap of {gap} samples must lie in [1, {}] for a {len}-sample clip",
            len / 4
        )));
    }
    let mut ranges = Vec::with_capacity(n_gaps);
    for k in 0..n_gaps {
        let start = gap_start(k, n_gaps, len, gap)
            .ok_or_else(|| Error::InvalidGap(format!("gap {k} would start before the clip")))?;
        ranges.push((start, start + gap));
    }
    let spec = GapSpec::new(sr, ranges)
        .map_err(|_| Error::InvalidGap(format!("{n_gaps} gaps of {gap} samples do not fit in {len} samples")))?;
    spec.validate_for(len, sr)?;
    let mut samples = w.samples().to_vec();
    for g in spec.gaps() {
        samples[g].iter_mut().for_each(|s| *s = 0.0);
    }
    Ok((Waveform::new(samples, sr)?, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_spec_validation_and_json() {
        assert!(GapSpec::new(16_000, vec![(5, 5)]).is_err());
        assert!(GapSpec::new(16_000, vec![(10, 20), (15, 30)]).is_err());
        assert!(GapSpec::new(16_000, vec![(10, 20), (0, 5)]).is_err());
        let g = GapSpec::new(16_000, vec![(0, 5), (5, 9)]).unwrap();
        assert!(g.validate_for(8, 16_000).is_err());
        assert!(g.validate_for(9, 8_000).is_err());
        g.validate_for(9, 16_000).unwrap();
        let back = GapSpec::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let parsed = GapSpec::from_json(r#"{"sample_rate": 16000, "gaps": [[1, 4]]}"#).unwrap();
        assert_eq!(parsed.gaps().collect::<Vec<_>>(), vec![1..4]);
        assert!(GapSpec::from_json(r#"{"sample_rate": 16000, "gaps": [[4, 1]]}"#).is_err());
    }

    #[test]
    fn crossfade_ramp_convention() {
        assert_eq!(crossfade_samples(16_000, 10.0), 160);
        let g = 1000..3000;
        assert_eq!(gap_weight(920, &g, 160), 0.0);
        assert_eq!(gap_weight(1000, &g, 160), 0.5);
        assert_eq!(gap_weight(1080, &g, 160), 1.0);
        assert_eq!(gap_weight(2920, &g, 160), 1.0);
        assert_eq!(gap_weight(3000, &g, 160), 0.5);
        assert_eq!(gap_weight(3080, &g, 160), 0.0);
        for j in 0..160 {
            assert_eq!(gap_weight(920 + j, &g, 160), j as f64 / 160.0);
        }
    }

    #[test]
    fn padded_length_is_frame_aligned() {
        assert_eq!(padded_length(100, 1024, 256), 1024);
        assert_eq!(padded_length(1024, 1024, 256), 1024);
        assert_eq!(padded_length(1025, 1024, 256), 1280);
        assert_eq!(padded_length(1280, 1024, 256), 1280);
    }

    #[test]
    fn runs() {
        assert_eq!(masked_runs(&[9, 1, 9, 9, 2, 9], 9), vec![0..1, 2..4, 5..6]);
        assert!(masked_runs(&[1, 2], 9).is_empty());
    }

    #[test]
    fn corrupted_gap_grid() {
        let w = Waveform::new(vec![0.5; 66_720], 16_000).unwrap();
        let (c, spec) = make_corrupted(&w, 300.0, 4).unwrap();
        let starts: Vec<usize> = spec.gaps().map(|g| g.start).collect();
        assert_eq!(starts, vec![10_944, 24_288, 37_632, 50_976]);
        assert!(spec.gaps().all(|g| g.len() == 4800));
        assert_eq!(c.samples().iter().filter(|&&s| s == 0.0).count(), 4 * 4800);
        let (same, empty) = make_corrupted(&w, 300.0, 0).unwrap();
        assert_eq!(same, w);
        assert!(empty.is_empty());
        assert!(matches!(make_corrupted(&w, 1100.0, 1), Err(Error::InvalidGap(_))));
    }
}
