//! Objective restoration metrics: log-spectral distance, Fréchet distance
//! between Gaussian fits of audio embeddings, a deterministic spectral
//! embedder, and the per-gap-length evaluation table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::error::{Error, Result};

/// Magnitudes below this are raised to it before taking logarithms.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;
/// Negative covariance eigenvalues down to this are treated as zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectrogramParams {
    pub window: usize,
    pub hop: usize,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        Self { window: 2048, hop: 512 }
    }
}

impl SpectrogramParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.hop > self.window {
            return Err(Error::InvalidParameter(format!(
                "spectrogram needs 0 < hop ({}) <= window ({})",
                self.hop, self.window
            )));
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn periodic_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    params: SpectrogramParams,
}

impl Stft {
    fn new(params: SpectrogramParams) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(params.window),
            window: periodic_hann(params.window),
            params,
        }
    }

    /// Centered framing: the signal is zero-padded by window/2 on both sides
    /// and frame `m` starts at `m·hop` of the padded signal.
    fn magnitudes(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let (win, hop) = (self.params.window, self.params.hop);
        let pad = win / 2;
        let frames = 1 + x.len() / hop;
        let bins = win / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        (0..frames)
            .map(|m| {
                for (j, b) in buf.iter_mut().enumerate() {
                    let n = (m * hop + j) as i64 - pad as i64;
                    let s = if n >= 0 && (n as usize) < x.len() { x[n as usize] as f64 } else { 0.0 };
                    *b = Complex::new(s * self.window[j], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..bins].iter().map(|c| c.norm()).collect()
            })
            .collect()
    }
}

/// Magnitude STFT, `frames × (window/2 + 1)`.
pub fn stft_magnitudes(x: &[f32], params: SpectrogramParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    Ok(Stft::new(params).magnitudes(x))
}

fn log_power(m: f64) -> f64 {
    let m = m.max(MAGNITUDE_FLOOR);
    2.0 * m.log10()
}

/// Frame-averaged RMS difference of base-10 log power spectra.
pub fn lsd(x: &Waveform, y: &Waveform, params: SpectrogramParams) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.sample_rate() != y.sample_rate() {
        return Err(Error::InvalidParameter(format!(
            "sample rates differ: {} vs {}",
            x.sample_rate(),
            y.sample_rate()
        )));
    }
    params.validate()?;
    let stft = Stft::new(params);
    let (a, b) = (stft.magnitudes(x.samples()), stft.magnitudes(y.samples()));
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(fa, fb)| {
            let mean = fa
                .iter()
                .zip(fb)
                .map(|(&p, &q)| (log_power(p) - log_power(q)).powi(2))
                .sum::<f64>()
                / fa.len() as f64;
            mean.sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    mean: Vec<f64>,
    /// Row-major `dim × dim`.
    covariance: Vec<f64>,
    count: usize,
}

impl EmbeddingStats {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                left: covariance.len(),
                right: d * d,
            });
        }
        if count < 2 {
            return Err(Error::InvalidStats(format!("need at least 2 samples, got {count}")));
        }
        if mean.iter().chain(&covariance).any(|v| !v.is_finite()) {
            return Err(Error::InvalidStats("non-finite statistics".into()));
        }
        let scale = covariance.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > PSD_TOLERANCE * scale {
                    return Err(Error::InvalidStats(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &covariance));
        if let Some(&l) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE * scale) {
            return Err(Error::InvalidStats(format!("covariance has eigenvalue {l}")));
        }
        Ok(Self {
            mean,
            covariance,
            count,
        })
    }

    /// Sample mean and unbiased covariance.
    pub fn from_embeddings(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidStats(format!("need at least 2 embeddings, got {n}")));
        }
        let d = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { left: r.len(), right: d });
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Square root of a symmetric PSD matrix by eigendecomposition, clipping
/// slightly negative eigenvalues to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|μa − μb|² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace term uses `Tr((Σa Σb)^{1/2}) = Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`,
/// whose inner matrix is symmetric PSD.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (ma, mb) = (a.matrix(), b.matrix());
    let ra = sqrt_psd(&ma);
    let inner = &ra * &mb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    if let Some(&l) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE * scale) {
        return Err(Error::InvalidStats(format!("product of covariances has eigenvalue {l}")));
    }
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + ma.trace() + mb.trace() - 2.0 * cross).max(0.0))
}

/// Maps audio to one embedding per analysis window.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, w: &Waveform) -> Result<Vec<Vec<f64>>>;
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over `bins` one-sided FFT bins, `bands × bins`.
pub fn mel_filterbank(bands: usize, fft_len: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = fft_len / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / fft_len as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Per 1 s window: 64 log mel-band energies, then mean and standard
/// deviation across frames of spectral centroid, 85% rolloff (both as
/// fractions of Nyquist) and spectral flux. 70 values.
///
/// Silent frames have centroid and rolloff 0.
#[derive(Debug, Clone)]
pub struct SpectralEmbedder {
    pub sample_rate: u32,
    pub fft_len: usize,
    pub hop: usize,
    pub mel_bands: usize,
}

impl SpectralEmbedder {
    pub const LOG_FLOOR: f64 = 1e-10;
    pub const ROLLOFF: f64 = 0.85;

    pub fn new(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            fft_len: 1024,
            hop: 512,
            mel_bands: 64,
        }
    }

    pub fn window_len(&self) -> usize {
        self.sample_rate as usize
    }
}

impl Embedder for SpectralEmbedder {
    fn dim(&self) -> usize {
        self.mel_bands + 6
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        if w.sample_rate() != self.sample_rate {
            return Err(Error::InvalidParameter(format!(
                "embedder runs at {} Hz, audio is {} Hz",
                self.sample_rate,
                w.sample_rate()
            )));
        }
        let win = self.window_len();
        if w.len() < win {
            return Err(Error::AudioTooShort {
                len: w.len(),
                needed: win,
            });
        }
        let fft = FftPlanner::new().plan_fft_forward(self.fft_len);
        let hann = periodic_hann(self.fft_len);
        let bank = mel_filterbank(self.mel_bands, self.fft_len, self.sample_rate);
        let bins = self.fft_len / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let frames = (win - self.fft_len) / self.hop + 1;
        let mut out = Vec::with_capacity(w.len() / win);
        for chunk in w.samples().chunks_exact(win) {
            let mut mel = vec![0.0; self.mel_bands];
            let (mut centroid, mut rolloff, mut flux) = (Vec::new(), Vec::new(), Vec::new());
            let mut prev: Option<Vec<f64>> = None;
            for f in 0..frames {
                let off = f * self.hop;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(chunk[off + j] as f64 * hann[j], 0.0);
                }
                fft.process(&mut buf);
                let mag: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
                let power: Vec<f64> = mag.iter().map(|m| m * m).collect();
                for (acc, filt) in mel.iter_mut().zip(&bank) {
                    *acc += filt.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>();
                }
                let total: f64 = power.iter().sum();
                if total > 0.0 {
                    let c = power.iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>() / total;
                    centroid.push(c / (bins - 1) as f64);
                    let mut cum = 0.0;
                    let k = power
                        .iter()
                        .position(|p| {
                            cum += p;
                            cum >= Self::ROLLOFF * total
                        })
                        .unwrap_or(bins - 1);
                    rolloff.push(k as f64 / (bins - 1) as f64);
                } else {
                    centroid.push(0.0);
                    rolloff.push(0.0);
                }
                if let Some(p) = &prev {
                    flux.push(mag.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
                }
                prev = Some(mag);
            }
            let mut e: Vec<f64> = mel
                .iter()
                .map(|m| (m / frames as f64 + Self::LOG_FLOOR).ln())
                .collect();
            for series in [&centroid, &rolloff, &flux] {
                let (mean, std) = mean_std(series);
                e.push(mean);
                e.push(std);
            }
            out.push(e);
        }
        Ok(out)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub dim: usize,
    pub count: usize,
    pub source: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes rows as a flat little-endian f32 matrix plus `<path>.json`.
pub fn write_embeddings(path: impl AsRef<Path>, rows: &[Vec<f64>], source: &str) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { left: r.len(), right: dim });
    }
    let mut bytes = Vec::with_capacity(rows.len() * dim * 4);
    for v in rows.iter().flatten() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let meta = EmbeddingSidecar {
        dim,
        count: rows.len(),
        source: source.to_string(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(Vec<Vec<f64>>, EmbeddingSidecar)> {
    let path = path.as_ref();
    let meta: EmbeddingSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != meta.dim * meta.count * 4 {
        return Err(Error::InvalidStats(format!(
            "{} holds {} bytes, sidecar implies {}",
            path.display(),
            bytes.len(),
            meta.dim * meta.count * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let rows = if meta.dim == 0 {
        vec![Vec::new(); meta.count]
    } else {
        values.chunks(meta.dim).map(<[f64]>::to_vec).collect()
    };
    Ok((rows, meta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRow {
    pub gap_ms: f64,
    pub fad: f64,
    pub lsd: f64,
    pub clips: usize,
}

/// Directory holding restorations for one gap length.
pub fn gap_dir(root: &Path, gap_ms: f64) -> PathBuf {
    root.join(format!("gap_{gap_ms}"))
}

fn wav_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    for entry in entries {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, p);
        }
    }
    Ok(out)
}

/// Mean LSD and pooled Fréchet distance per gap length, with restorations
/// read from `restored_dir/gap_<ms>/<name>.wav` and paired by file name
/// with `clean_dir/<name>.wav`. Rows are sorted by gap length.
pub fn evaluate_protocol(
    clean_dir: &Path,
    restored_dir: &Path,
    gap_ms_list: &[f64],
    embedder: &dyn Embedder,
    params: SpectrogramParams,
) -> Result<Vec<ProtocolRow>> {
    let clean_files = wav_files(clean_dir)?;
    if clean_files.is_empty() {
        return Err(Error::PairingError(clean_dir.to_path_buf()));
    }
    let mut clean = Vec::with_capacity(clean_files.len());
    let mut clean_emb = Vec::new();
    for path in clean_files.values() {
        let w = read_wav(path)?;
        clean_emb.extend(embedder.embed(&w)?);
        clean.push(w);
    }
    let clean_stats = EmbeddingStats::from_embeddings(&clean_emb)?;
    let mut gaps = gap_ms_list.to_vec();
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    let mut rows = Vec::with_capacity(gaps.len());
    for gap in gaps {
        let dir = gap_dir(restored_dir, gap);
        let restored = wav_files(&dir)?;
        if let Some(extra) = restored.keys().find(|k| !clean_files.contains_key(*k)) {
            return Err(Error::PairingError(dir.join(extra)));
        }
        let mut lsd_sum = 0.0;
        let mut emb = Vec::new();
        for ((name, cpath), c) in clean_files.iter().zip(&clean) {
            let rpath = restored.get(name).ok_or_else(|| Error::PairingError(cpath.clone()))?;
            let r = read_wav(rpath)?;
            lsd_sum += lsd(c, &r, params)?;
            emb.extend(embedder.embed(&r)?);
        }
        let stats = EmbeddingStats::from_embeddings(&emb)?;
        rows.push(ProtocolRow {
            gap_ms: gap,
            fad: frechet_distance(&clean_stats, &stats)?,
            lsd: lsd_sum / clean.len() as f64,
            clips: clean.len(),
        });
    }
    Ok(rows)
}

pub fn results_csv(rows: &[ProtocolRow]) -> String {
    let mut s = String::from("gap_ms,fad,lsd\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.gap_ms, r.fad, r.lsd));
    }
    s
}
