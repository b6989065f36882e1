//! Reconstruction metrics.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::codec::losses::LOG_FLOOR;
use crate::codec::CodecModel;
use crate::error::{Error, Result};
use crate::numerics::{MelSpectrogram, StftPadding, Tape};
use crate::{Real, Tensor};

/// Single-scale spectral settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { window: 256, hop: 64, n_mels: 40, sample_rate: 16000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub stft_distance: f64,
    pub mel_distance: f64,
    pub snr_db: f64,
    pub count: usize,
}

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("signal lengths differ: {} vs {}", x.len(), y.len())));
    }
    Ok(())
}

/// `10 log10(Σx² / Σ(x − y)²)`; infinite for a perfect match.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    same_len(reference, estimate)?;
    let sig: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(if err == 0.0 { f64::INFINITY } else { 10.0 * Float::log10(sig / err) })
}

fn spectra(x: &[f64], y: &[f64], cfg: &EvalConfig, mel: bool) -> Result<(Tensor<f64>, Tensor<f64>)> {
    same_len(x, y)?;
    if x.len() < cfg.window {
        return Err(Error::InputTooShort { needed: cfg.window, got: x.len() });
    }
    let spec = MelSpectrogram::new(x.len(), cfg.window, cfg.hop, cfg.n_mels, cfg.sample_rate, StftPadding::Reflect)?;
    let mut t = Tape::new();
    let mut run = |s: &[f64]| {
        let v = t.constant(Tensor::vector(s.to_vec()));
        let o = if mel { spec.forward(&mut t, v) } else { spec.magnitude(&mut t, v) };
        t.value(o).clone()
    };
    Ok((run(x), run(y)))
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Mean absolute difference of STFT magnitudes.
pub fn stft_distance(x: &[f64], y: &[f64], cfg: &EvalConfig) -> Result<f64> {
    let (a, b) = spectra(x, y, cfg, false)?;
    Ok(mean_abs(a.data(), b.data()))
}

/// Mean absolute difference of log-mel spectra (floored at 1e-5).
pub fn mel_distance(x: &[f64], y: &[f64], cfg: &EvalConfig) -> Result<f64> {
    let (a, b) = spectra(x, y, cfg, true)?;
    let lg = |t: &Tensor<f64>| t.data().iter().map(|&v| Float::ln(v.max(LOG_FLOOR))).collect::<Vec<_>>();
    Ok(mean_abs(&lg(&a), &lg(&b)))
}

/// Corpus means over `(reference, reconstruction)` pairs.
pub fn eval_pairs(pairs: &[(Vec<f64>, Vec<f64>)], cfg: &EvalConfig) -> Result<ReconMetrics> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("no utterances to evaluate".into()));
    }
    let mut m = ReconMetrics { stft_distance: 0.0, mel_distance: 0.0, snr_db: 0.0, count: pairs.len() };
    for (x, y) in pairs {
        m.stft_distance += stft_distance(x, y, cfg)?;
        m.mel_distance += mel_distance(x, y, cfg)?;
        m.snr_db += snr_db(x, y)?;
    }
    let n = pairs.len() as f64;
    m.stft_distance /= n;
    m.mel_distance /= n;
    m.snr_db /= n;
    Ok(m)
}

/// Encodes and decodes every waveform and scores the result.
pub fn eval_reconstruction<T: Real>(model: &CodecModel<T>, waves: &[Vec<T>], cfg: &EvalConfig) -> Result<ReconMetrics> {
    let pairs = waves
        .iter()
        .map(|w| {
            let r = model.reconstruct(w)?;
            let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
            Ok((f(w), f(&r)))
        })
        .collect::<Result<Vec<_>>>()?;
    eval_pairs(&pairs, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tone(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| 0.5 * Float::sin(f * i as f64)).collect()
    }

    #[test]
    fn identity_scores_zero() {
        let x = tone(512, 0.3);
        let m = eval_pairs(&[(x.clone(), x)], &EvalConfig::default()).unwrap();
        assert_eq!(m.stft_distance, 0.0);
        assert_eq!(m.mel_distance, 0.0);
        assert!(m.snr_db.is_infinite());
    }

    #[test]
    fn metrics_are_non_negative() {
        let m = eval_pairs(&[(tone(512, 0.3), tone(512, 0.5))], &EvalConfig::default()).unwrap();
        assert!(m.stft_distance > 0.0 && m.mel_distance > 0.0);
    }

    #[test]
    fn snr_of_half_error() {
        let x = vec![1.0, -1.0];
        let y = vec![0.5, -0.5];
        assert!((snr_db(&x, &y).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn short_signal_is_rejected() {
        let x = tone(100, 0.1);
        assert!(matches!(stft_distance(&x, &x, &EvalConfig::default()), Err(Error::InputTooShort { .. })));
    }
}
