//! Short-time Fourier transform plans and mel filter banks.
//!
//! The DFT is evaluated as a dense matrix product against precomputed
//! window-weighted cosine/sine bases; at the window sizes used here this is
//! cheap and gives the tape a trivially linear reverse rule.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Real;

/// Frame layout policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StftPadding {
    /// Frames start at 0 and never read past the end: `⌊(T − N)/hop⌋ + 1` frames.
    None,
    /// Reflect-pad so there are exactly `⌈T/hop⌉` frames.
    Reflect,
}

/// Precomputed framing and windowed DFT bases for one `(n_fft, hop, T)` triple.
#[derive(Debug, Clone)]
pub struct StftPlan<T> {
    pub n_fft: usize,
    pub hop: usize,
    pub signal_len: usize,
    pub frames: usize,
    pub bins: usize,
    /// Source sample for every `(frame, tap)`; row-major `[frames, n_fft]`.
    idx: Vec<usize>,
    /// `w[n]·cos(2πkn/N)/‖w‖`, `[n_fft, bins]`.
    pub(crate) cos: Vec<T>,
    /// `−w[n]·sin(2πkn/N)/‖w‖`, `[n_fft, bins]`.
    pub(crate) sin: Vec<T>,
}

/// Periodic Hann window.
pub fn hann_window<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let s = num_traits::Float::sin(core::f64::consts::PI * i as f64 / n as f64);
            T::of(s * s)
        })
        .collect()
}

impl<T: Real> StftPlan<T> {
    pub fn new(n_fft: usize, hop: usize, signal_len: usize, padding: StftPadding) -> Result<Self> {
        if n_fft < 2 || !n_fft.is_power_of_two() {
            return Err(Error::Config(alloc::format!("window length {n_fft} must be a power of two")));
        }
        if hop == 0 {
            return Err(Error::Config("hop length must be positive".into()));
        }
        let (frames, left) = match padding {
            StftPadding::None => {
                if signal_len < n_fft {
                    return Err(Error::InputTooShort { needed: n_fft, got: signal_len });
                }
                ((signal_len - n_fft) / hop + 1, 0usize)
            }
            StftPadding::Reflect => {
                if signal_len < 2 {
                    return Err(Error::InputTooShort { needed: 2, got: signal_len });
                }
                (signal_len.div_ceil(hop), (n_fft - hop.min(n_fft)) / 2)
            }
        };
        let t = signal_len as isize;
        let reflect = |p: isize| -> usize {
            let mut q = p - left as isize;
            // bounce until inside; only more than one bounce for very short inputs
            loop {
                if q < 0 {
                    q = -q;
                } else if q >= t {
                    q = 2 * (t - 1) - q;
                } else {
                    return q as usize;
                }
            }
        };
        let mut idx = Vec::with_capacity(frames * n_fft);
        for f in 0..frames {
            for n in 0..n_fft {
                idx.push(reflect((f * hop + n) as isize));
            }
        }
        let bins = n_fft / 2 + 1;
        let win: Vec<f64> = hann_window::<f64>(n_fft);
        let norm = num_traits::Float::sqrt(win.iter().map(|w| w * w).sum::<f64>());
        let mut cos = vec![T::zero(); n_fft * bins];
        let mut sin = vec![T::zero(); n_fft * bins];
        for n in 0..n_fft {
            for k in 0..bins {
                let m = (k * n) % n_fft;
                // exact values at quarter turns keep DC/Nyquist imaginary parts exactly zero
                let (s, c) = match (4 * m % n_fft == 0).then_some(4 * m / n_fft) {
                    Some(0) => (0.0, 1.0),
                    Some(1) => (1.0, 0.0),
                    Some(2) => (0.0, -1.0),
                    Some(3) => (-1.0, 0.0),
                    _ => libm_sincos(2.0 * core::f64::consts::PI * m as f64 / n_fft as f64),
                };
                cos[n * bins + k] = T::of(win[n] * c / norm);
                sin[n * bins + k] = T::of(-win[n] * s / norm);
            }
        }
        Ok(Self { n_fft, hop, signal_len, frames, bins, idx, cos, sin })
    }

    /// `[frames, n_fft]` matrix of (unwindowed) frame samples.
    pub(crate) fn gather(&self, x: &[T]) -> Vec<T> {
        self.idx.iter().map(|&i| x[i]).collect()
    }

    /// Adjoint of [`gather`](Self::gather).
    pub(crate) fn scatter(&self, g: &[T], gx: &mut [T]) {
        for (&i, &v) in self.idx.iter().zip(g) {
            gx[i] += v;
        }
    }
}

fn libm_sincos(x: f64) -> (f64, f64) {
    use num_traits::Float;
    Float::sin_cos(x)
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    use num_traits::Float;
    2595.0 * Float::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    use num_traits::Float;
    700.0 * (Float::powf(10.0, m / 2595.0) - 1.0)
}

/// Triangular HTK filters from 0 Hz to Nyquist, unit peak; returns `[bins, n_mels]`.
pub fn mel_filterbank<T: Real>(n_fft: usize, n_mels: usize, sample_rate: f64) -> Result<Tensor<T>> {
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be positive".into()));
    }
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let pts: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let mut fb = vec![T::zero(); bins * n_mels];
    for k in 0..bins {
        let f = k as f64 * sample_rate / n_fft as f64;
        for m in 0..n_mels {
            let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb[k * n_mels + m] = T::of(w);
        }
    }
    Tensor::new(vec![bins, n_mels], fb)
}

/// Centre frequency (Hz) of mel band `m`.
pub fn mel_band_center(m: usize, n_mels: usize, sample_rate: f64) -> f64 {
    let top = hz_to_mel(sample_rate / 2.0);
    mel_to_hz(top * (m + 1) as f64 / (n_mels + 1) as f64)
}

/// A magnitude STFT followed by a mel projection, for a fixed signal length.
#[derive(Debug, Clone)]
pub struct MelSpectrogram<T> {
    pub plan: Arc<StftPlan<T>>,
    pub filterbank: Tensor<T>,
}

impl<T: Real> MelSpectrogram<T> {
    pub fn new(
        signal_len: usize,
        window_len: usize,
        hop_len: usize,
        n_mels: usize,
        sample_rate: f64,
        padding: StftPadding,
    ) -> Result<Self> {
        let plan = Arc::new(StftPlan::new(window_len, hop_len, signal_len, padding)?);
        let filterbank = mel_filterbank(window_len, n_mels, sample_rate)?;
        Ok(Self { plan, filterbank })
    }

    /// Magnitude spectrogram `[frames, bins]` of a 1-D node.
    pub fn magnitude(&self, tape: &mut Tape<T>, x: Var) -> Var {
        stft_magnitude(tape, x, self.plan.clone())
    }

    /// Mel spectrogram `[frames, n_mels]` of a 1-D node.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let mag = self.magnitude(tape, x);
        let fb = tape.constant(self.filterbank.clone());
        tape.matmul(mag, fb)
    }
}

/// `|STFT(x)|`, shape `[frames, bins]`.
pub fn stft_magnitude<T: Real>(tape: &mut Tape<T>, x: Var, plan: Arc<StftPlan<T>>) -> Var {
    let spec = tape.stft(x, plan);
    let re = tape.slice_rows(spec, 0, 1);
    let im = tape.slice_rows(spec, 1, 1);
    let m = tape.hypot(re, im);
    let s = tape.shape(m)[1..].to_vec();
    tape.reshape(m, &s)
}

/// Mel spectrogram of a waveform, computed without recording gradients.
pub fn mel_spectrogram<T: Real>(
    wave: &Tensor<T>,
    window_len: usize,
    hop_len: usize,
    n_mels: usize,
    sample_rate: f64,
    padding: StftPadding,
) -> Result<Tensor<T>> {
    let mel = MelSpectrogram::new(wave.numel(), window_len, hop_len, n_mels, sample_rate, padding)?;
    let mut tape = Tape::new();
    let x = tape.constant(wave.clone().reshape(vec![wave.numel()])?);
    let y = mel.forward(&mut tape, x);
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn frame_counts() {
        let p = StftPlan::<f64>::new(64, 16, 128, StftPadding::None).unwrap();
        assert_eq!(p.frames, 5);
        let p = StftPlan::<f64>::new(64, 16, 128, StftPadding::Reflect).unwrap();
        assert_eq!(p.frames, 8);
        let p = StftPlan::<f64>::new(64, 16, 130, StftPadding::Reflect).unwrap();
        assert_eq!(p.frames, 9);
        assert_eq!(
            StftPlan::<f64>::new(64, 16, 63, StftPadding::None).unwrap_err(),
            Error::InputTooShort { needed: 64, got: 63 }
        );
        assert!(StftPlan::<f64>::new(48, 12, 128, StftPadding::None).is_err());
    }

    #[test]
    fn zero_wave_gives_zero_mel() {
        let w = Tensor::<f64>::zeros(vec![512]);
        let m = mel_spectrogram(&w, 128, 32, 20, 16000.0, StftPadding::Reflect).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    /// Direct O(N²) DFT of the first frame as an independent reference.
    #[test]
    fn dft_matches_direct_oracle() {
        let n = 64;
        let x: Vec<f64> = (0..200).map(|i| ((i * 37 % 23) as f64 / 11.0 - 1.0) * 0.7).collect();
        let plan = StftPlan::<f64>::new(n, 16, x.len(), StftPadding::None).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.clone()));
        let mag = stft_magnitude(&mut tape, xv, Arc::new(plan));
        let got = tape.value(mag).row(0).to_vec();
        let w = hann_window::<f64>(n);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in 0..=n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..n {
                let ph = -2.0 * core::f64::consts::PI * (k * t) as f64 / n as f64;
                re += x[t] * w[t] * ph.cos();
                im += x[t] * w[t] * ph.sin();
            }
            let want = (re * re + im * im).sqrt() / norm;
            assert!((got[k] - want).abs() < 1e-12, "bin {k}: {} vs {want}", got[k]);
        }
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        let (sr, n_fft, n_mels) = (16000.0, 512, 40);
        for band in [5usize, 12, 20, 31] {
            let f0 = mel_band_center(band, n_mels, sr);
            let x: Vec<f64> = (0..2048).map(|i| (2.0 * core::f64::consts::PI * f0 * i as f64 / sr).sin()).collect();
            let m = mel_spectrogram(&Tensor::vector(x), n_fft, 128, n_mels, sr, StftPadding::None).unwrap();
            let row = m.row(2);
            let arg = (0..n_mels).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, band);
        }
    }
}
