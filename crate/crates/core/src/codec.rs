//! Desk-scale frame vector-quantizer codec.
//!
//! Frames are described by log band energies of their windowed magnitude
//! spectrum plus the frame RMS. A k-means codebook over those features
//! quantizes each hop to one token. Decoding overlap-adds, per token, the
//! time-domain medoid frame of its cluster.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::rng;
use crate::tokens::{TokenId, TokenSequence};

const MAGIC: &[u8; 4] = b"TOKC";
const VERSION: u16 = 1;
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop_length: usize,
    pub codebook_size: usize,
    /// Number of equal-width spectral bands in the feature vector.
    pub bands: usize,
    pub max_iterations: usize,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 1024,
            hop_length: 256,
            codebook_size: 256,
            bands: 64,
            max_iterations: 50,
        }
    }
}

impl CodecParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.codebook_size < 2 {
            return bad(format!("codebook size {} < 2", self.codebook_size));
        }
        if self.hop_length == 0 || self.hop_length > self.frame_length {
            return bad(format!(
                "hop {} must be in 1..={}",
                self.hop_length, self.frame_length
            ));
        }
        if self.frame_length < 4 {
            return bad(format!("frame length {} too small", self.frame_length));
        }
        if self.bands == 0 || self.bands > self.frame_length / 2 + 1 {
            return bad(format!("band count {} out of range", self.bands));
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if self.max_iterations == 0 {
            return bad("k-means needs at least one iteration".into());
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.bands + 1
    }
}

/// Per-frame analysis: window, FFT, band pooling.
pub struct FrameAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bands: Vec<Range<usize>>,
    scratch: Vec<Complex<f64>>,
}

impl FrameAnalyzer {
    pub fn new(frame_length: usize, bands: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(frame_length);
        let bins = frame_length / 2 + 1;
        let bands = (0..bands)
            .map(|b| (b * bins / bands)..((b + 1) * bins / bands))
            .collect();
        Self {
            fft,
            window: hann(frame_length),
            bands,
            scratch: vec![Complex::default(); frame_length],
        }
    }

    pub fn features(&mut self, frame: &[f32], out: &mut Vec<f64>) {
        out.clear();
        for ((s, x), w) in self.scratch.iter_mut().zip(frame).zip(&self.window) {
            *s = Complex::new(*x as f64 * w, 0.0);
        }
        self.fft.process(&mut self.scratch);
        for band in &self.bands {
            let e: f64 = self.scratch[band.clone()].iter().map(|c| c.norm_sqr()).sum();
            out.push((e + LOG_FLOOR).ln());
        }
        let rms = (frame.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / frame.len() as f64)
            .sqrt();
        out.push(rms);
    }
}

/// Hann window sampled at half-integer points, so it is strictly positive
/// and overlap-add normalization never divides by zero.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n as f64 + 0.5) / len as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, frame: usize, hop: usize) -> usize {
    if len < frame {
        0
    } else {
        (len - frame) / hop + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecSpec {
    sample_rate: u32,
    frame_length: usize,
    hop_length: usize,
    bands: usize,
    /// Row-major `codebook_size x feature_dim`.
    codebook: Vec<f32>,
    /// Row-major `codebook_size x frame_length`.
    medoids: Vec<f32>,
}

impl CodecSpec {
    pub fn from_parts(
        sample_rate: u32,
        frame_length: usize,
        hop_length: usize,
        bands: usize,
        codebook: Vec<f32>,
        medoids: Vec<f32>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::MalformedCodec(m));
        if hop_length == 0 || hop_length > frame_length {
            return bad(format!("hop {hop_length} vs frame {frame_length}"));
        }
        if sample_rate == 0 || bands == 0 {
            return bad("zero sample rate or band count".into());
        }
        let dim = bands + 1;
        if codebook.is_empty() || !codebook.len().is_multiple_of(dim) {
            return bad(format!("codebook length {} not a multiple of {dim}", codebook.len()));
        }
        let n = codebook.len() / dim;
        if medoids.len() != n * frame_length {
            return bad(format!("expected {} medoid samples, got {}", n * frame_length, medoids.len()));
        }
        if codebook.iter().chain(&medoids).any(|v| !v.is_finite()) {
            return bad("non-finite codebook entry".into());
        }
        if medoids.iter().any(|v| v.abs() > 1.0) {
            return bad("medoid sample out of range".into());
        }
        Ok(Self {
            sample_rate,
            frame_length,
            hop_length,
            bands,
            codebook,
            medoids,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
    pub fn frame_length(&self) -> usize {
        self.frame_length
    }
    pub fn hop_length(&self) -> usize {
        self.hop_length
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn feature_dim(&self) -> usize {
        self.bands + 1
    }
    pub fn codebook_size(&self) -> usize {
        self.codebook.len() / self.feature_dim()
    }
    pub fn token_rate_hz(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }
    pub fn centroid(&self, k: usize) -> &[f32] {
        let d = self.feature_dim();
        &self.codebook[k * d..(k + 1) * d]
    }
    pub fn medoid(&self, k: usize) -> &[f32] {
        &self.medoids[k * self.frame_length..(k + 1) * self.frame_length]
    }

    pub fn analyzer(&self) -> FrameAnalyzer {
        FrameAnalyzer::new(self.frame_length, self.bands)
    }

    /// Nearest centroid by Euclidean distance, lowest index on ties.
    pub fn quantize(&self, features: &[f64]) -> TokenId {
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..self.codebook_size() {
            let d = sq_dist_f32(features, self.centroid(k));
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1 as TokenId
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [
            self.sample_rate,
            self.frame_length as u32,
            self.hop_length as u32,
            self.codebook_size() as u32,
            self.bands as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * (self.codebook.len() + self.medoids.len()));
        for v in self.codebook.iter().chain(&self.medoids) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedCodec(m.to_string());
        const HEADER: usize = 4 + 2 + 5 * 4;
        if bytes.len() < HEADER {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
            return Err(bad("unsupported version"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        let (sr, frame, hop, n, bands) = (field(0), field(1) as usize, field(2) as usize, field(3) as usize, field(4) as usize);
        let expected = n
            .checked_mul(bands + 1)
            .and_then(|c| n.checked_mul(frame).and_then(|m| c.checked_add(m)))
            .ok_or_else(|| bad("size overflow"))?;
        let payload = &bytes[HEADER..];
        if payload.len() != expected * 4 {
            return Err(bad("payload size does not match header"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (cb, med) = floats.split_at(n * (bands + 1));
        Self::from_parts(sr, frame, hop, bands, cb.to_vec(), med.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_dist_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| (x - y as f64).powi(2)).sum()
}

/// Cuts `w` into hop-spaced frames and returns their features.
pub fn frame_features(w: &Waveform, analyzer: &mut FrameAnalyzer, frame: usize, hop: usize) -> Vec<Vec<f64>> {
    let s = w.samples();
    let mut buf = Vec::new();
    (0..frame_count(s.len(), frame, hop))
        .map(|m| {
            analyzer.features(&s[m * hop..m * hop + frame], &mut buf);
            buf.clone()
        })
        .collect()
}

/// Result of a k-means run over row vectors.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Seeded k-means++ initialization followed by Lloyd iterations.
///
/// Empty clusters are reseeded to the point farthest from its assigned
/// centroid. Stops when assignments are stable or after `max_iterations`.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iterations: usize, rng: &mut rng::Rng) -> Clustering {
    assert!(!points.is_empty() && k >= 1);
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if assignment[i] != c {
                changed = true;
                assignment[i] = c;
            }
            dist[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        // reseed empties, farthest first, each point used at most once
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i] && counts[assignment[i]] > 1)
                .fold(None::<(usize, f64)>, |best, i| match best {
                    Some((_, bd)) if bd >= dist[i] => best,
                    _ => Some((i, dist[i])),
                });
            if let Some((i, _)) = far {
                taken[i] = true;
                counts[assignment[i]] -= 1;
                assignment[i] = c;
                counts[c] = 1;
                dist[i] = 0.0;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignment) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    // final assignment against the final centroids
    for (i, p) in points.iter().enumerate() {
        assignment[i] = nearest(p, &centroids).0;
    }
    Clustering {
        centroids,
        assignment,
        iterations,
    }
}

/// Trains the codebook on hop-spaced frames of `corpus`. Deterministic for a
/// given seed.
pub fn train_codebook(corpus: &[Waveform], params: &CodecParams, seed: u64) -> Result<CodecSpec> {
    params.validate()?;
    let (frame, hop) = (params.frame_length, params.hop_length);
    let mut analyzer = FrameAnalyzer::new(frame, params.bands);
    let mut feats = Vec::new();
    let mut frames: Vec<&[f32]> = Vec::new();
    for w in corpus {
        if w.sample_rate() != params.sample_rate {
            return Err(Error::InvalidAudio(format!(
                "corpus sample rate {} differs from codec rate {}",
                w.sample_rate(),
                params.sample_rate
            )));
        }
        if w.samples().iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio("non-finite sample in corpus".into()));
        }
        let s = w.samples();
        for m in 0..frame_count(s.len(), frame, hop) {
            frames.push(&s[m * hop..m * hop + frame]);
        }
        feats.extend(frame_features(w, &mut analyzer, frame, hop));
    }
    if frames.len() < params.codebook_size {
        return Err(Error::CorpusTooSmall {
            frames: frames.len(),
            needed: params.codebook_size,
        });
    }
    let mut r = rng::stream(seed, &[rng::domain::CODEBOOK]);
    let clustering = kmeans(&feats, params.codebook_size, params.max_iterations, &mut r);
    log::debug!("k-means finished after {} iterations", clustering.iterations);

    let mut codebook = Vec::with_capacity(params.codebook_size * params.feature_dim());
    let mut medoids = Vec::with_capacity(params.codebook_size * frame);
    for (k, c) in clustering.centroids.iter().enumerate() {
        codebook.extend(c.iter().map(|&v| v as f32));
        let members = (0..feats.len()).filter(|&i| clustering.assignment[i] == k);
        let pool: Vec<usize> = {
            let m: Vec<usize> = members.collect();
            if m.is_empty() {
                (0..feats.len()).collect()
            } else {
                m
            }
        };
        let medoid = pool
            .iter()
            .copied()
            .fold((usize::MAX, f64::INFINITY), |best, i| {
                let d = sq_dist(&feats[i], c);
                if d < best.1 {
                    (i, d)
                } else {
                    best
                }
            })
            .0;
        medoids.extend_from_slice(frames[medoid]);
    }
    CodecSpec::from_parts(params.sample_rate, frame, hop, params.bands, codebook, medoids)
}

/// One token per hop, nearest centroid wins.
pub fn encode(w: &Waveform, codec: &CodecSpec) -> Result<TokenSequence> {
    if w.len() < codec.frame_length {
        return Err(Error::AudioTooShort {
            len: w.len(),
            needed: codec.frame_length,
        });
    }
    let mut analyzer = codec.analyzer();
    let ids = frame_features(w, &mut analyzer, codec.frame_length, codec.hop_length)
        .iter()
        .map(|f| codec.quantize(f))
        .collect();
    TokenSequence::new(ids, codec.codebook_size() as u32, codec.token_rate_hz())
}

/// Overlap-adds the medoid frame of each token under a Hann window.
pub fn decode(t: &TokenSequence, codec: &CodecSpec) -> Result<Waveform> {
    decode_ids(t.ids(), codec)
}

pub(crate) fn decode_ids(ids: &[TokenId], codec: &CodecSpec) -> Result<Waveform> {
    let n = codec.codebook_size() as TokenId;
    if let Some(position) = ids.iter().position(|&id| id >= n) {
        return Err(if ids[position] == n {
            Error::MaskedTokenInDecode { position }
        } else {
            Error::InvalidParameter(format!("token {} outside codebook", ids[position]))
        });
    }
    if ids.is_empty() {
        return Ok(Waveform::silence(0, codec.sample_rate));
    }
    let (frame, hop) = (codec.frame_length, codec.hop_length);
    let len = (ids.len() - 1) * hop + frame;
    let window = hann(frame);
    let mut acc = vec![0.0f64; len];
    let mut norm = vec![0.0f64; len];
    for (m, &id) in ids.iter().enumerate() {
        let src = codec.medoid(id as usize);
        let off = m * hop;
        for j in 0..frame {
            acc[off + j] += window[j] * src[j] as f64;
            norm[off + j] += window[j];
        }
    }
    let samples = acc
        .iter()
        .zip(&norm)
        .map(|(a, n)| ((a / n) as f32).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, codec.sample_rate)
}
