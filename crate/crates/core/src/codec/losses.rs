//! Reconstruction, adversarial and feature-matching objectives.

use alloc::vec::Vec;

use super::config::{LossWeights, MelLossConfig};
use super::disc::DiscOutput;
use super::quant::sum_vars;
use crate::error::{Error, Result};
use crate::numerics::{MelSpectrogram, StftPadding, Tape, Var};
use crate::{Real, Tensor};

pub const LOG_FLOOR: f64 = 1e-5;
const FEAT_EPS: f64 = 1e-8;

fn same_len<T: Real>(t: &Tape<T>, x: Var, y: Var) -> Result<()> {
    let (a, b) = (t.value(x).numel(), t.value(y).numel());
    if a != b {
        return Err(Error::Shape(alloc::format!("signal lengths differ: {a} vs {b}")));
    }
    Ok(())
}

/// Mean absolute sample difference.
pub fn time_loss<T: Real>(t: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    same_len(t, x, y)?;
    Ok(t.l1(x, y))
}

/// Log-mel L1 summed over resolutions, for one signal length.
#[derive(Debug, Clone)]
pub struct MultiScaleMel<T> {
    pub scales: Vec<MelSpectrogram<T>>,
}

impl<T: Real> MultiScaleMel<T> {
    pub fn new(cfg: &MelLossConfig, signal_len: usize, sample_rate: f64) -> Result<Self> {
        cfg.validate()?;
        let largest = *cfg.windows.last().unwrap();
        if signal_len < largest {
            return Err(Error::InputTooShort { needed: largest, got: signal_len });
        }
        let scales = cfg
            .windows
            .iter()
            .zip(&cfg.n_mels)
            .map(|(&w, &m)| MelSpectrogram::new(signal_len, w, w / 4, m, sample_rate, StftPadding::Reflect))
            .collect::<Result<_>>()?;
        Ok(Self { scales })
    }

    /// Log-mel of `x` at scale `i`.
    pub fn log_mel(&self, t: &mut Tape<T>, i: usize, x: Var) -> Var {
        let m = self.scales[i].forward(t, x);
        t.log_clamp(m, T::of(LOG_FLOOR))
    }

    /// `Σ_scales mean |log mel(x) − log mel(y)|`.
    pub fn loss(&self, t: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
        same_len(t, x, y)?;
        if t.value(x).numel() != self.scales[0].plan.signal_len {
            return Err(Error::Shape("mel loss built for another signal length".into()));
        }
        let terms: Vec<Var> = (0..self.scales.len())
            .map(|i| {
                let a = self.log_mel(t, i, x);
                let b = self.log_mel(t, i, y);
                t.l1(a, b)
            })
            .collect();
        Ok(sum_vars(t, &terms))
    }
}

/// `(1/K) Σ_k [mean max(1 + D_k(x̂), 0) + mean max(1 − D_k(x), 0)]`.
pub fn disc_hinge<T: Real>(t: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Var {
    assert_eq!(real.len(), fake.len());
    let terms: Vec<Var> = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let hf = t.hinge(f, T::one());
            let hf = t.mean(hf);
            let hr = t.hinge(r, -T::one());
            let hr = t.mean(hr);
            t.add(hf, hr)
        })
        .collect();
    let s = sum_vars(t, &terms);
    t.scale(s, T::of(1.0 / real.len() as f64))
}

/// `(1/K) Σ_k mean max(1 − D_k(x̂), 0)`.
pub fn gen_hinge<T: Real>(t: &mut Tape<T>, fake: &[Var]) -> Var {
    let terms: Vec<Var> = fake
        .iter()
        .map(|&f| {
            let h = t.hinge(f, -T::one());
            t.mean(h)
        })
        .collect();
    let s = sum_vars(t, &terms);
    t.scale(s, T::of(1.0 / fake.len() as f64))
}

pub fn disc_loss<T: Real>(t: &mut Tape<T>, real: &[DiscOutput], fake: &[DiscOutput]) -> Var {
    let r: Vec<Var> = real.iter().map(|o| o.logits).collect();
    let f: Vec<Var> = fake.iter().map(|o| o.logits).collect();
    disc_hinge(t, &r, &f)
}

pub fn gen_adv_loss<T: Real>(t: &mut Tape<T>, fake: &[DiscOutput]) -> Var {
    let f: Vec<Var> = fake.iter().map(|o| o.logits).collect();
    gen_hinge(t, &f)
}

/// Relative L1 between real and generated features, averaged over
/// discriminators and layers. Real features are treated as constants.
pub fn feat_match<T: Real>(t: &mut Tape<T>, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Var {
    let mut per_disc = Vec::with_capacity(real.len());
    for (rl, fl) in real.iter().zip(fake) {
        let terms: Vec<Var> = rl
            .iter()
            .zip(fl)
            .map(|(&r, &f)| {
                let rv = t.value(r).clone();
                let denom = rv.data().iter().map(|v| v.abs()).sum::<T>() / T::of(rv.numel() as f64) + T::of(FEAT_EPS);
                let rc = t.constant(rv);
                let d = t.l1(rc, f);
                t.scale(d, T::one() / denom)
            })
            .collect();
        let s = sum_vars(t, &terms);
        per_disc.push(t.scale(s, T::of(1.0 / rl.len() as f64)));
    }
    let s = sum_vars(t, &per_disc);
    t.scale(s, T::of(1.0 / real.len() as f64))
}

pub fn feat_match_loss<T: Real>(t: &mut Tape<T>, real: &[DiscOutput], fake: &[DiscOutput]) -> Var {
    let r: Vec<Vec<Var>> = real.iter().map(|o| o.features.clone()).collect();
    let f: Vec<Vec<Var>> = fake.iter().map(|o| o.features.clone()).collect();
    feat_match(t, &r, &f)
}

/// Component losses of the generator objective, in [`LossWeights`] order.
#[derive(Debug, Clone, Copy)]
pub struct GenLosses {
    pub time: Var,
    pub mel: Var,
    pub adv: Var,
    pub feat: Var,
    pub commit: Var,
    pub distill: Var,
}

impl GenLosses {
    pub fn as_array(&self) -> [Var; 6] {
        [self.time, self.mel, self.adv, self.feat, self.commit, self.distill]
    }
}

/// `Σ λ_i L_i`.
pub fn generator_total<T: Real>(t: &mut Tape<T>, l: &GenLosses, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let terms: Vec<Var> = l.as_array().iter().zip(w.as_array()).map(|(&v, wi)| t.scale(v, T::of(wi))).collect();
    Ok(sum_vars(t, &terms))
}

/// Hinge discriminator loss evaluated directly on logit tensors.
pub fn disc_loss_value<T: Real>(real: &[Tensor<T>], fake: &[Tensor<T>]) -> T {
    let mut t = Tape::new();
    let r: Vec<Var> = real.iter().map(|x| t.constant(x.clone())).collect();
    let f: Vec<Var> = fake.iter().map(|x| t.constant(x.clone())).collect();
    let l = disc_hinge(&mut t, &r, &f);
    t.scalar(l)
}

/// Hinge generator loss evaluated directly on logit tensors.
pub fn gen_adv_loss_value<T: Real>(fake: &[Tensor<T>]) -> T {
    let mut t = Tape::new();
    let f: Vec<Var> = fake.iter().map(|x| t.constant(x.clone())).collect();
    let l = gen_hinge(&mut t, &f);
    t.scalar(l)
}

/// Feature matching evaluated directly on feature tensors `[disc][layer]`.
pub fn feat_match_value<T: Real>(real: &[Vec<Tensor<T>>], fake: &[Vec<Tensor<T>>]) -> T {
    let mut t = Tape::new();
    let r: Vec<Vec<Var>> = real.iter().map(|l| l.iter().map(|x| t.constant(x.clone())).collect()).collect();
    let f: Vec<Vec<Var>> = fake.iter().map(|l| l.iter().map(|x| t.constant(x.clone())).collect()).collect();
    let l = feat_match(&mut t, &r, &f);
    t.scalar(l)
}

/// Multi-scale mel distance between two waveforms.
pub fn mel_loss_value<T: Real>(x: &[T], y: &[T], cfg: &MelLossConfig, sample_rate: f64) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Shape(alloc::format!("signal lengths differ: {} vs {}", x.len(), y.len())));
    }
    let mel = MultiScaleMel::new(cfg, x.len(), sample_rate)?;
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(x.to_vec()));
    let b = t.constant(Tensor::vector(y.to_vec()));
    let l = mel.loss(&mut t, a, b)?;
    Ok(t.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn hinge_tables() {
        assert_eq!(disc_loss_value(&[s(2.0), s(2.0)], &[s(-2.0), s(-2.0)]), 0.0);
        assert_eq!(disc_loss_value(&[s(0.0)], &[s(0.0)]), 2.0);
        assert_eq!(disc_loss_value(&[s(1.0), s(0.0)], &[s(-1.0), s(0.0)]), 1.0);
        assert_eq!(gen_adv_loss_value(&[s(1.0), s(1.0)]), 0.0);
        assert_eq!(gen_adv_loss_value(&[s(0.0)]), 1.0);
        assert_eq!(gen_adv_loss_value(&[s(-1.0)]), 2.0);
    }

    #[test]
    fn feature_matching_hand_value() {
        let r = vec![vec![
            Tensor::new(vec![2], vec![1.0, -3.0]).unwrap(),
            Tensor::new(vec![1], vec![2.0]).unwrap(),
        ]];
        let f = vec![vec![
            Tensor::new(vec![2], vec![2.0, -1.0]).unwrap(),
            Tensor::new(vec![1], vec![2.0]).unwrap(),
        ]];
        // layer 0: mean|d| = 1.5, mean|r| = 2 → 0.75; layer 1: 0
        let v: f64 = feat_match_value(&r, &f);
        assert!((v - 0.375).abs() < 1e-6);
        let scale = |l: &Vec<Vec<Tensor<f64>>>| -> Vec<Vec<Tensor<f64>>> {
            l.iter().map(|x| x.iter().map(|t| t.map(|v| 7.0 * v)).collect()).collect()
        };
        assert!((feat_match_value(&scale(&r), &scale(&f)) - v).abs() < 1e-6);
        assert_eq!(feat_match_value(&r, &r), 0.0);
    }

    #[test]
    fn mel_loss_zero_on_identical_and_needs_length() {
        let x: Vec<f64> = (0..512).map(|i| (i as f64 * 0.1).sin()).collect();
        let cfg = MelLossConfig::tiny();
        assert_eq!(mel_loss_value(&x, &x, &cfg, 16000.0).unwrap(), 0.0);
        assert!(matches!(mel_loss_value(&x[..100], &x[..100], &cfg, 16000.0), Err(Error::InputTooShort { .. })));
    }
}
