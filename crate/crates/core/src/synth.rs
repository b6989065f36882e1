//! Deterministic synthetic speech-like corpus.
//!
//! Each "word" is a fixed chord of partials with a raised-cosine envelope;
//! an utterance strings words together under one slow pitch glide. The
//! teacher track is a smoothed one-hot of the active word, sampled at four
//! times the codec frame rate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::distill::TeacherEmbeddings;
use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count: usize,
    pub words_per_utterance: usize,
    /// Samples per word; a multiple of `hop`.
    pub word_len: usize,
    pub vocab: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub teacher_dim: usize,
    /// Teacher frames per codec frame.
    pub teacher_ratio: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 4,
            words_per_utterance: 4,
            word_len: 256,
            vocab: 8,
            sample_rate: 16000,
            hop: 8,
            teacher_dim: 16,
            teacher_ratio: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub wave: Vec<f32>,
    pub words: Vec<usize>,
    pub transcript: String,
    pub teacher: TeacherEmbeddings<f32>,
}

/// Partials (Hz) of word `w`.
fn chord(w: usize) -> [f64; 3] {
    let base = 180.0 + 95.0 * w as f64;
    [base, base * 2.03, base * 3.1 + 40.0 * (w % 3) as f64]
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SynthUtterance>> {
    if spec.hop == 0 || spec.word_len % spec.hop != 0 || spec.word_len == 0 {
        return Err(Error::Config(format!("word length {} must be a positive multiple of hop {}", spec.word_len, spec.hop)));
    }
    if spec.vocab == 0 || spec.teacher_dim < spec.vocab || spec.teacher_ratio == 0 {
        return Err(Error::Config("teacher dim must cover the vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = spec.sample_rate as f64;
    let tau = core::f64::consts::TAU;
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let words: Vec<usize> = (0..spec.words_per_utterance).map(|_| rng.random_range(0..spec.vocab)).collect();
        let glide: (f64, f64) = (rng.random_range(0.9..1.1), rng.random_range(0.9..1.1));
        let gain: f64 = rng.random_range(0.35..0.55);
        let n = spec.words_per_utterance * spec.word_len;
        let mut wave = Vec::with_capacity(n);
        let mut phase = [0.0f64; 3];
        for i in 0..n {
            let w = words[i / spec.word_len];
            let pos = (i % spec.word_len) as f64 / spec.word_len as f64;
            let pitch = glide.0 + (glide.1 - glide.0) * i as f64 / n as f64;
            let env = 0.5 - 0.5 * Float::cos(tau * pos);
            let mut s = 0.0;
            for (k, f) in chord(w).iter().enumerate() {
                phase[k] = (phase[k] + tau * f * pitch / sr) % tau;
                s += Float::sin(phase[k]) / (k + 1) as f64;
            }
            wave.push((gain * env * s / 1.8) as f32);
        }
        let frames = n / spec.hop * spec.teacher_ratio;
        let per_word = frames / spec.words_per_utterance;
        let mut onehot = alloc::vec![0.0f64; frames * spec.teacher_dim];
        for f in 0..frames {
            onehot[f * spec.teacher_dim + words[(f / per_word).min(words.len() - 1)]] = 1.0;
        }
        // 5-tap moving average along time
        let mut smooth = alloc::vec![0.0f32; onehot.len()];
        for f in 0..frames {
            for d in 0..spec.teacher_dim {
                let (lo, hi) = (f.saturating_sub(2), (f + 2).min(frames - 1));
                let s: f64 = (lo..=hi).map(|g| onehot[g * spec.teacher_dim + d]).sum();
                smooth[f * spec.teacher_dim + d] = (s / (hi - lo + 1) as f64) as f32;
            }
        }
        let rate = sr / spec.hop as f64 * spec.teacher_ratio as f64;
        let teacher = TeacherEmbeddings::new(Tensor::new(alloc::vec![frames, spec.teacher_dim], smooth)?, rate)?;
        let transcript = words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
        out.push(SynthUtterance { wave, words, transcript, teacher });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_aligned() {
        let spec = SynthSpec::default();
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a, synth_dataset(&spec).unwrap());
        for u in &a {
            assert_eq!(u.wave.len() % 8, 0);
            assert!(u.wave.iter().all(|v| v.abs() <= 1.0));
            assert_eq!(u.teacher.len(), u.wave.len() / 8 * 4);
        }
    }
}
