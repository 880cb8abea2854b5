use aidd_core::audio::{write_wav, Waveform};
use aidd_core::metrics::{
    evaluate_protocol, frechet_distance, gap_dir, hz_to_mel, lsd, mel_to_hz, read_embeddings, results_csv, write_embeddings,
    Embedder, EmbeddingStats, SpectralEmbedder, SpectrogramParams,
};
use aidd_core::rng;
use aidd_core::Error;
use proptest::prelude::*;
use rand::Rng;
use tempfile::TempDir;

fn noise(seed: u64, n: usize, amp: f32) -> Waveform {
    let mut r = rng::stream(seed, &[]);
    Waveform::new((0..n).map(|_| amp * r.random_range(-1.0f32..1.0)).collect(), 16_000).unwrap()
}

/// LSD by direct DFT: periodic Hann window, window/2 zeros on both sides,
/// frame m starting at m·hop of the padded signal, 1 + len/hop frames.
fn naive_lsd(x: &[f32], y: &[f32], win: usize, hop: usize) -> f64 {
    let pad = win / 2;
    let frames = 1 + x.len() / hop;
    let hann: Vec<f64> = (0..win).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos()).collect();
    let (cos, sin): (Vec<f64>, Vec<f64>) =
        (0..win).map(|k| { let a = 2.0 * std::f64::consts::PI * k as f64 / win as f64; (a.cos(), a.sin()) }).unzip();
    let spectrum = |s: &[f32], m: usize| -> Vec<f64> {
        let frame: Vec<f64> = (0..win)
            .map(|j| {
                let n = (m * hop + j) as i64 - pad as i64;
                if n >= 0 && (n as usize) < s.len() { s[n as usize] as f64 * hann[j] } else { 0.0 }
            })
            .collect();
        (0..=win / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in frame.iter().enumerate() {
                    let idx = (k * j) % win;
                    re += v * cos[idx];
                    im -= v * sin[idx];
                }
                2.0 * (re * re + im * im).sqrt().max(1e-8).log10()
            })
            .collect()
    };
    let mut total = 0.0;
    for m in 0..frames {
        let (a, b) = (spectrum(x, m), spectrum(y, m));
        total += (a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    }
    total / frames as f64
}

#[test]
fn lsd_matches_a_direct_dft() {
    let (x, y) = (noise(1, 3000, 0.5), noise(2, 3000, 0.3));
    let params = SpectrogramParams { window: 256, hop: 64 };
    let fast = lsd(&x, &y, params).unwrap();
    let slow = naive_lsd(x.samples(), y.samples(), 256, 64);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");

    let (x, y) = (noise(3, 6000, 0.5), noise(4, 6000, 0.5));
    let fast = lsd(&x, &y, SpectrogramParams::default()).unwrap();
    let slow = naive_lsd(x.samples(), y.samples(), 2048, 512);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
}

#[test]
fn lsd_is_symmetric_and_floors_silence() {
    let (x, y) = (noise(5, 5000, 0.5), noise(6, 5000, 0.2));
    let p = SpectrogramParams::default();
    assert_eq!(lsd(&x, &y, p).unwrap(), lsd(&y, &x, p).unwrap());
    let silence = Waveform::silence(5000, 16_000);
    // 2·log10(1e-8) = -16 for every bin of silence.
    let d = lsd(&silence, &silence, p).unwrap();
    assert_eq!(d, 0.0);
    assert!(lsd(&x, &silence, p).unwrap().is_finite());
}

fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.iter().enumerate().map(|(i, r)| {
        let mut row = r.clone();
        row.extend((0..n).map(|j| (i == j) as u8 as f64));
        row
    }).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let d = a[c][c];
        a[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                let pivot = a[c].clone();
                a[r].iter_mut().zip(&pivot).for_each(|(v, q)| *v -= f * q);
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn matmul(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| x[i][k] * y[k][j]).sum()).collect()).collect()
}

/// Principal square root by the Denman–Beavers iteration.
fn sqrtm(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut y = m.to_vec();
    let mut z: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let (yi, zi) = (invert(&y), invert(&z));
        let ny: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        let delta: f64 = ny.iter().flatten().zip(y.iter().flatten()).map(|(a, b)| (a - b).abs()).sum();
        y = ny;
        z = nz;
        if delta < 1e-15 {
            break;
        }
    }
    y
}

#[test]
fn frechet_matches_a_sqrtm_oracle() {
    for trial in 0..10u64 {
        let mut r = rng::stream(10, &[trial]);
        let mut cov = || -> Vec<Vec<f64>> {
            let f: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            (0..5).map(|i| (0..5).map(|j| (0..7).map(|k| f[i][k] * f[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 }).collect()).collect()
        };
        let (c1, c2) = (cov(), cov());
        let m1: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let m2: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let root = sqrtm(&matmul(&c1, &c2));
        let tr = |m: &[Vec<f64>]| (0..5).map(|i| m[i][i]).sum::<f64>();
        let oracle = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + tr(&c1) + tr(&c2) - 2.0 * tr(&root);
        let flat = |c: &[Vec<f64>]| c.iter().flatten().copied().collect::<Vec<_>>();
        let a = EmbeddingStats::new(m1, flat(&c1), 50).unwrap();
        let b = EmbeddingStats::new(m2, flat(&c2), 50).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - oracle).abs() < 1e-6, "{d} vs {oracle}");
        assert!((d - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }
}

#[test]
fn frechet_rejects_mismatched_or_indefinite_stats() {
    let a = EmbeddingStats::new(vec![0.0], vec![1.0], 3).unwrap();
    let b = EmbeddingStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 3).unwrap();
    assert!(matches!(frechet_distance(&a, &b), Err(Error::DimensionMismatch { .. })));
    assert!(matches!(EmbeddingStats::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0], 3), Err(Error::InvalidStats(_))));
    assert!(matches!(EmbeddingStats::new(vec![0.0], vec![1.0], 1), Err(Error::InvalidStats(_))));
}

fn tone(f: f64, secs: f64) -> Waveform {
    let n = (secs * 16_000.0) as usize;
    Waveform::new((0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin()) as f32).collect(), 16_000).unwrap()
}

#[test]
fn tone_peaks_in_the_band_centred_nearest_it() {
    let e = SpectralEmbedder::new(16_000);
    let v = &e.embed(&tone(1000.0, 1.0)).unwrap()[0];
    assert_eq!(v.len(), e.dim());
    let mel = &v[..64];
    let argmax = (0..64).max_by(|&a, &b| mel[a].total_cmp(&mel[b])).unwrap();
    let top = hz_to_mel(8000.0);
    let centre = |b: usize| mel_to_hz(top * (b + 1) as f64 / 65.0);
    let nearest = (0..64).min_by(|&a, &b| (centre(a) - 1000.0).abs().total_cmp(&(centre(b) - 1000.0).abs())).unwrap();
    assert_eq!(argmax, nearest);
    // Centroid as a fraction of Nyquist sits near 1 kHz / 8 kHz.
    assert!((v[64] - 0.125).abs() < 0.01, "{}", v[64]);
}

#[test]
fn silence_embeds_to_the_floor() {
    let e = SpectralEmbedder::new(16_000);
    let v = e.embed(&Waveform::silence(32_000, 16_000)).unwrap();
    assert_eq!(v.len(), 2);
    for row in &v {
        assert!(row[..64].iter().all(|&m| m == SpectralEmbedder::LOG_FLOOR.ln()));
        assert!(row[64..].iter().all(|&s| s == 0.0));
    }
    assert!(matches!(e.embed(&Waveform::silence(15_999, 16_000)), Err(Error::AudioTooShort { .. })));
}

#[test]
fn whole_window_shift_permutes_embeddings() {
    let e = SpectralEmbedder::new(16_000);
    let x = noise(12, 48_000, 0.4);
    let mut rotated = x.samples()[16_000..].to_vec();
    rotated.extend_from_slice(&x.samples()[..16_000]);
    let a = e.embed(&x).unwrap();
    let b = e.embed(&Waveform::new(rotated, 16_000).unwrap()).unwrap();
    assert_eq!(a[1..], b[..2]);
    assert_eq!(a[0], b[2]);
}

#[test]
fn embeddings_round_trip_through_files() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("emb.f32");
    let e = SpectralEmbedder::new(16_000);
    let rows = e.embed(&noise(13, 32_000, 0.3)).unwrap();
    write_embeddings(&path, &rows, "spectral").unwrap();
    let (back, meta) = read_embeddings(&path).unwrap();
    assert_eq!((meta.dim, meta.count, meta.source.as_str()), (70, 2, "spectral"));
    for (a, b) in rows.iter().flatten().zip(back.iter().flatten()) {
        assert_eq!(*a as f32 as f64, *b);
    }
    std::fs::write(&path, [0u8; 12]).unwrap();
    assert!(read_embeddings(&path).is_err());
}

fn write_corpus(dir: &std::path::Path, names: &[&str]) {
    std::fs::create_dir_all(dir).unwrap();
    for (k, n) in names.iter().enumerate() {
        write_wav(dir.join(n), &noise(20 + k as u64, 20_000, 0.4)).unwrap();
    }
}

#[test]
fn protocol_on_identical_audio_is_zero_and_sorted() {
    let dir = TempDir::new().unwrap();
    let names = ["a.wav", "b.wav", "c.wav"];
    let clean = dir.path().join("clean");
    write_corpus(&clean, &names);
    for ms in [300.0, 50.0] {
        write_corpus(&gap_dir(&dir.path().join("restored"), ms), &names);
    }
    let e = SpectralEmbedder::new(16_000);
    let rows = evaluate_protocol(&clean, &dir.path().join("restored"), &[300.0, 50.0], &e, SpectrogramParams::default()).unwrap();
    assert_eq!(rows.iter().map(|r| r.gap_ms).collect::<Vec<_>>(), vec![50.0, 300.0]);
    for r in &rows {
        assert_eq!(r.lsd, 0.0);
        assert!(r.fad.abs() < 1e-6, "{}", r.fad);
        assert_eq!(r.clips, 3);
    }
    let csv = results_csv(&rows);
    assert!(csv.starts_with("gap_ms,fad,lsd\n50,"));
}

#[test]
fn unpaired_files_are_reported() {
    let dir = TempDir::new().unwrap();
    let clean = dir.path().join("clean");
    write_corpus(&clean, &["a.wav", "b.wav"]);
    let restored = dir.path().join("restored");
    write_corpus(&gap_dir(&restored, 50.0), &["a.wav"]);
    let e = SpectralEmbedder::new(16_000);
    let err = evaluate_protocol(&clean, &restored, &[50.0], &e, SpectrogramParams::default()).unwrap_err();
    assert!(matches!(&err, Error::PairingError(p) if p.ends_with("b.wav")), "{err}");

    write_corpus(&gap_dir(&restored, 50.0), &["a.wav", "b.wav", "z.wav"]);
    let err = evaluate_protocol(&clean, &restored, &[50.0], &e, SpectrogramParams::default()).unwrap_err();
    assert!(matches!(&err, Error::PairingError(p) if p.ends_with("z.wav")), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frechet_is_nonnegative_and_symmetric(seed in 0u64..10_000, d in 1usize..6) {
        let mut r = rng::stream(seed, &[]);
        let rows_a: Vec<Vec<f64>> = (0..d + 3).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let rows_b: Vec<Vec<f64>> = (0..d + 5).map(|_| (0..d).map(|_| r.random_range(-2.0..1.0)).collect()).collect();
        let a = EmbeddingStats::from_embeddings(&rows_a).unwrap();
        let b = EmbeddingStats::from_embeddings(&rows_b).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-8 * ab.max(1.0));
    }

    #[test]
    fn lsd_is_nonnegative_and_zero_on_equal_spectra(seed in 0u64..10_000, n in 600usize..4000) {
        let x = noise(seed, n, 0.5);
        let y = noise(seed + 1, n, 0.5);
        let p = SpectrogramParams { window: 512, hop: 128 };
        prop_assert!(lsd(&x, &y, p).unwrap() > 0.0);
        prop_assert_eq!(lsd(&x, &x, p).unwrap(), 0.0);
        let neg = Waveform::new(x.samples().iter().map(|v| -v).collect(), 16_000).unwrap();
        prop_assert!(lsd(&x, &neg, p).unwrap() < 1e-9);
    }
}
