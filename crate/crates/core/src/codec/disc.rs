//! Multi-period and multi-band STFT discriminators.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DiscConfig;
use crate::error::Result;
use crate::layers::Conv;
use crate::numerics::{Bound, ParamStore, StftPadding, StftPlan, Tape, Var};
use crate::{Real, Tensor};

const SLOPE: f64 = 0.1;

/// Intermediate activations and final logits of one discriminator.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub features: Vec<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone)]
struct PeriodDisc {
    period: usize,
    convs: Vec<Conv>,
    post: Conv,
}

impl PeriodDisc {
    fn forward<T: Real>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> DiscOutput {
        let n = t.value(x).numel();
        let per = self.period;
        let padded = n.div_ceil(per) * per;
        let x = if padded > n {
            let z = t.constant(Tensor::zeros(alloc::vec![padded - n]));
            t.concat_rows(&[x, z])
        } else {
            x
        };
        let cols = padded / per;
        let h = t.reshape(x, &[cols, per]);
        let h = t.transpose(h);
        let mut h = t.reshape(h, &[per, 1, cols]);
        let mut features = Vec::new();
        for c in &self.convs {
            h = c.forward(t, p, h);
            h = t.leaky_relu(h, T::of(SLOPE));
            features.push(h);
        }
        let logits = self.post.forward(t, p, h);
        DiscOutput { features, logits }
    }
}

#[derive(Debug, Clone)]
struct Band {
    lo: usize,
    width: usize,
    convs: Vec<Conv>,
}

/// Magnitude and phase of each STFT band stacked as channels over frames.
#[derive(Debug, Clone)]
struct StftDisc {
    window: usize,
    bands: Vec<Band>,
    post: Conv,
}

impl StftDisc {
    fn forward<T: Real>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<DiscOutput> {
        let n = t.value(x).numel();
        let plan = Arc::new(StftPlan::new(self.window, self.window / 4, n, StftPadding::Reflect)?);
        let (f, b) = (plan.frames, plan.bins);
        let spec = t.stft(x, plan);
        let re = t.slice_rows(spec, 0, 1);
        let re = t.reshape(re, &[f, b]);
        let im = t.slice_rows(spec, 1, 1);
        let im = t.reshape(im, &[f, b]);
        let mag = t.hypot(re, im);
        let phase = t.atan2(im, re);
        let mut features = Vec::new();
        let mut outs = Vec::new();
        for band in &self.bands {
            let m = t.slice_cols(mag, band.lo, band.width);
            let ph = t.slice_cols(phase, band.lo, band.width);
            let h = t.concat_cols(&[m, ph]);
            let mut h = t.transpose(h);
            for c in &band.convs {
                h = c.forward(t, p, h);
                h = t.leaky_relu(h, T::of(SLOPE));
                features.push(h);
            }
            outs.push(h);
        }
        let h = t.concat_cols(&outs);
        let logits = self.post.forward(t, p, h);
        Ok(DiscOutput { features, logits })
    }
}

#[derive(Debug, Clone)]
enum Disc {
    Period(PeriodDisc),
    Stft(StftDisc),
}

/// All discriminators with their own parameter store.
#[derive(Debug, Clone)]
pub struct DiscriminatorSet<T> {
    pub cfg: DiscConfig,
    pub params: ParamStore<T>,
    discs: Vec<Disc>,
}

impl<T: Real> DiscriminatorSet<T> {
    pub fn new(cfg: DiscConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ch = cfg.channels;
        let mut discs = Vec::new();
        for &per in &cfg.periods {
            let name = format!("mpd{per}");
            let convs = alloc::vec![
                Conv::new(&mut s, &mut rng, &format!("{name}.c0"), 1, ch, 5, 3, 1, 2, 2),
                Conv::same(&mut s, &mut rng, &format!("{name}.c1"), ch, ch, 5, 1),
            ];
            let post = Conv::same(&mut s, &mut rng, &format!("{name}.post"), ch, 1, 3, 1);
            discs.push(Disc::Period(PeriodDisc { period: per, convs, post }));
        }
        for &w in &cfg.stft_windows {
            let bins = w / 2 + 1;
            let edges: Vec<usize> = cfg.bands.iter().map(|&fr| libm_round(fr * bins as f64)).collect();
            let mut bands = Vec::new();
            for (i, e) in edges.windows(2).enumerate() {
                if e[1] <= e[0] {
                    continue;
                }
                let name = format!("stft{w}.band{i}");
                let width = e[1] - e[0];
                let convs = alloc::vec![
                    Conv::same(&mut s, &mut rng, &format!("{name}.c0"), 2 * width, ch, 3, 1),
                    Conv::same(&mut s, &mut rng, &format!("{name}.c1"), ch, ch, 3, 1),
                ];
                bands.push(Band { lo: e[0], width, convs });
            }
            let post = Conv::same(&mut s, &mut rng, &format!("stft{w}.post"), ch, 1, 3, 1);
            discs.push(Disc::Stft(StftDisc { window: w, bands, post }));
        }
        Ok(Self { cfg, params: s, discs })
    }

    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    /// Runs every discriminator on the 1-D signal node `x`.
    pub fn forward(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<DiscOutput>> {
        self.discs
            .iter()
            .map(|d| match d {
                Disc::Period(d) => Ok(d.forward(t, p, x)),
                Disc::Stft(d) => d.forward(t, p, x),
            })
            .collect()
    }
}

fn libm_round(x: f64) -> usize {
    num_traits::Float::round(x) as usize
}
