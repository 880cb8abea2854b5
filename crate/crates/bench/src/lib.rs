//! Fixtures shared by the benchmarks.

use aidd_core::audio::Waveform;
use aidd_core::tokens::TokenSequence;

/// A mix of two tones with a slow amplitude wobble, `secs` long.
pub fn test_tone(secs: f64, sample_rate: u32) -> Waveform {
    let n = (secs * sample_rate as f64) as usize;
    let sr = sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.6 + 0.3 * (2.0 * std::f64::consts::PI * 1.5 * t).sin();
            let s = (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.4 * (2.0 * std::f64::consts::PI * 1230.0 * t).sin();
            (0.5 * env * s) as f32
        })
        .collect();
    Waveform::new(samples, sample_rate).expect("finite samples")
}

/// Deterministic pseudo-random tokens; every fourth position masked.
pub fn token_fixture(len: usize, vocab: u32) -> TokenSequence {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let ids = (0..len)
        .map(|i| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            if i % 4 == 3 {
                vocab
            } else {
                ((state >> 33) % vocab as u64) as u32
            }
        })
        .collect();
    TokenSequence::new(ids, vocab, 40.0).expect("ids within vocab")
}
