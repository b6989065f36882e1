//! Convolutional encoder/decoder and the assembled codec.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::CodecConfig;
use super::distill::ProjectionHead;
use super::quant::{self, CodeGrid, CodebookUsage, QuantizationResult, QuantizerStack};
use crate::error::{Error, Result};
use crate::layers::{snake_alpha, Conv, ConvT};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Var};
use crate::{Real, Tensor};

/// Dilated residual unit: `x + conv1(snake(conv7(snake(x))))`.
#[derive(Debug, Clone)]
struct ResUnit {
    a1: ParamId,
    c1: Conv,
    a2: ParamId,
    c2: Conv,
}

impl ResUnit {
    fn new<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ch: usize, dilation: usize) -> Self {
        Self {
            a1: snake_alpha(s, &format!("{name}.a1"), ch),
            c1: Conv::same(s, rng, &format!("{name}.c1"), ch, ch, 7, dilation),
            a2: snake_alpha(s, &format!("{name}.a2"), ch),
            c2: Conv::same(s, rng, &format!("{name}.c2"), ch, ch, 1, 1),
        }
    }

    fn forward<T: Real>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let y = t.snake(x, p.var(self.a1));
        let y = self.c1.forward(t, p, y);
        let y = t.snake(y, p.var(self.a2));
        let y = self.c2.forward(t, p, y);
        t.add(x, y)
    }
}

const DILATIONS: [usize; 3] = [1, 3, 9];

#[derive(Debug, Clone)]
struct DownBlock {
    units: Vec<ResUnit>,
    alpha: ParamId,
    down: Conv,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    input: Conv,
    blocks: Vec<DownBlock>,
    alpha: ParamId,
    output: Conv,
}

impl Encoder {
    fn new<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &CodecConfig) -> Self {
        let mut ch = cfg.encoder_channels;
        let input = Conv::same(s, rng, "enc.in", 1, ch, 7, 1);
        let mut blocks = Vec::new();
        for (i, &st) in cfg.encoder_strides.iter().enumerate() {
            let name = format!("enc.b{i}");
            let units = DILATIONS.iter().map(|&d| ResUnit::new(s, rng, &format!("{name}.r{d}"), ch, d)).collect();
            let alpha = snake_alpha(s, &format!("{name}.a"), ch);
            let pad = st.div_ceil(2);
            let down = Conv::new(s, rng, &format!("{name}.down"), ch, 2 * ch, 2 * st, st, 1, pad, pad);
            blocks.push(DownBlock { units, alpha, down });
            ch *= 2;
        }
        let alpha = snake_alpha(s, "enc.a", ch);
        let output = Conv::same(s, rng, "enc.out", ch, cfg.latent_dim, 3, 1);
        Self { input, blocks, alpha, output }
    }

    /// `[B, 1, T] → [B, D, T/hop]`.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let mut h = self.input.forward(t, p, x);
        for b in &self.blocks {
            for u in &b.units {
                h = u.forward(t, p, h);
            }
            h = t.snake(h, p.var(b.alpha));
            h = b.down.forward(t, p, h);
        }
        h = t.snake(h, p.var(self.alpha));
        self.output.forward(t, p, h)
    }

    fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.input];
        for b in &self.blocks {
            for u in &b.units {
                v.push(&u.c1);
                v.push(&u.c2);
            }
            v.push(&b.down);
        }
        v.push(&self.output);
        v
    }

    /// Inclusive range of input samples that can influence latent frame `frame`
    /// (before clamping to the signal).
    pub fn receptive_field(&self, frame: usize) -> (isize, isize) {
        let (mut lo, mut hi) = (frame as isize, frame as isize);
        for c in self.convs().into_iter().rev() {
            let (s, pl, span) = (c.stride as isize, c.pad_left as isize, (c.dilation * (c.kernel - 1)) as isize);
            lo = lo * s - pl;
            hi = hi * s - pl + span;
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    alpha: ParamId,
    up: ConvT,
    units: Vec<ResUnit>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    input: Conv,
    blocks: Vec<UpBlock>,
    alpha: ParamId,
    output: Conv,
}

impl Decoder {
    fn new<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &CodecConfig) -> Self {
        let mut ch = cfg.decoder_channels;
        let input = Conv::same(s, rng, "dec.in", cfg.latent_dim, ch, 7, 1);
        let mut blocks = Vec::new();
        for (i, &st) in cfg.decoder_strides.iter().enumerate() {
            let name = format!("dec.b{i}");
            let alpha = snake_alpha(s, &format!("{name}.a"), ch);
            let up = ConvT::upsample(s, rng, &format!("{name}.up"), ch, ch / 2, st);
            ch /= 2;
            let units = DILATIONS.iter().map(|&d| ResUnit::new(s, rng, &format!("{name}.r{d}"), ch, d)).collect();
            blocks.push(UpBlock { alpha, up, units });
        }
        let alpha = snake_alpha(s, "dec.a", ch);
        let output = Conv::same(s, rng, "dec.out", ch, 1, 7, 1);
        Self { input, blocks, alpha, output }
    }

    /// `[B, D, L] → [B, 1, L·hop]`, bounded by `tanh`.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        let mut h = self.input.forward(t, p, z);
        for b in &self.blocks {
            h = t.snake(h, p.var(b.alpha));
            h = b.up.forward(t, p, h);
            for u in &b.units {
                h = u.forward(t, p, h);
            }
        }
        h = t.snake(h, p.var(self.alpha));
        let y = self.output.forward(t, p, h);
        t.tanh(y)
    }
}

/// `[B, D, L]` → `[B·L, D]` rows for the quantizer.
pub fn latents_to_rows<T: Real>(t: &mut Tape<T>, z: Var) -> Var {
    let s = t.shape(z).to_vec();
    let (b, d, l) = (s[0], s[1], s[2]);
    let parts: Vec<Var> = (0..b)
        .map(|i| {
            let zi = t.slice_rows(z, i, 1);
            let zi = t.reshape(zi, &[d, l]);
            t.transpose(zi)
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        t.concat_rows(&parts)
    }
}

/// Inverse of [`latents_to_rows`].
pub fn rows_to_latents<T: Real>(t: &mut Tape<T>, rows: Var, batch: usize) -> Var {
    let s = t.shape(rows).to_vec();
    let (n, d) = (s[0], s[1]);
    let l = n / batch;
    let parts: Vec<Var> = (0..batch)
        .map(|i| {
            let r = t.slice_rows(rows, i * l, l);
            let r = t.transpose(r);
            t.reshape(r, &[1, d, l])
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        t.concat_rows(&parts)
    }
}

/// Parameter handles of the split quantizer.
#[derive(Debug, Clone)]
pub struct QuantizerParams {
    pub semantic: ParamId,
    pub acoustic: Vec<ParamId>,
}

impl QuantizerParams {
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        core::iter::once(self.semantic).chain(self.acoustic.iter().copied())
    }
}

/// Latents of one clip plus the padding appended to reach a stride multiple.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded<T> {
    /// `[L, D]`.
    pub latents: Tensor<T>,
    pub pad: usize,
}

/// Encoder, split quantizer, decoder and distillation head sharing one
/// generator parameter store.
#[derive(Debug, Clone)]
pub struct CodecModel<T> {
    pub cfg: CodecConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub quant: QuantizerParams,
    pub proj: ProjectionHead,
    pub usage: Vec<CodebookUsage>,
}

impl<T: Real> CodecModel<T> {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &cfg);
        let decoder = Decoder::new(&mut params, &mut rng, &cfg);
        let mut table = |name: &str, s: &mut ParamStore<T>| {
            s.add(name, crate::numerics::params::init::normal(&mut rng, &[cfg.codebook_size, cfg.latent_dim], 1.0))
        };
        let semantic = table("vq.semantic", &mut params);
        let acoustic = (1..cfg.n_codebooks).map(|i| table(&format!("vq.acoustic{i}"), &mut params)).collect();
        let proj = ProjectionHead::new(&mut params, &mut rng, cfg.teacher_dim, cfg.latent_dim);
        let usage = (0..cfg.n_codebooks).map(|_| CodebookUsage::new(cfg.codebook_size)).collect();
        Ok(Self { cfg, params, encoder, decoder, quant: QuantizerParams { semantic, acoustic }, proj, usage })
    }

    pub fn hop(&self) -> usize {
        self.cfg.hop()
    }

    /// Owned copy of the codebook tables.
    pub fn stack(&self) -> QuantizerStack<T> {
        QuantizerStack {
            semantic: self.params.get(self.quant.semantic).clone(),
            acoustic: self.quant.acoustic.iter().map(|&id| self.params.get(id).clone()).collect(),
            input: self.cfg.acoustic_input,
        }
    }

    /// Writes codebook tables back into the parameter store.
    pub fn set_stack(&mut self, stack: &QuantizerStack<T>) {
        *self.params.get_mut(self.quant.semantic) = stack.semantic.clone();
        for (&id, t) in self.quant.acoustic.iter().zip(&stack.acoustic) {
            *self.params.get_mut(id) = t.clone();
        }
    }

    /// Right-pads `wave` with zeros to a hop multiple (or errors if `pad` is off).
    pub fn align(&self, wave: &[T], pad: bool) -> Result<(Vec<T>, usize)> {
        if wave.is_empty() {
            return Err(Error::InputTooShort { needed: 1, got: 0 });
        }
        let hop = self.hop();
        let extra = (hop - wave.len() % hop) % hop;
        if extra > 0 && !pad {
            return Err(Error::Alignment { len: wave.len(), multiple: hop });
        }
        let mut v = wave.to_vec();
        v.resize(wave.len() + extra, T::zero());
        Ok((v, extra))
    }

    /// Latents of one clip.
    pub fn encode_with(&self, wave: &[T], pad: bool) -> Result<Encoded<T>> {
        let (x, extra) = self.align(wave, pad)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let n = x.len();
        let xv = t.constant(Tensor::from_parts(vec![1, 1, n], x));
        let z = self.encoder.forward(&mut t, &p, xv);
        let rows = latents_to_rows(&mut t, z);
        t.check()?;
        Ok(Encoded { latents: t.value(rows).clone(), pad: extra })
    }

    pub fn encode(&self, wave: &[T]) -> Result<Encoded<T>> {
        self.encode_with(wave, true)
    }

    /// Waveform of length `L·hop` from latents `[L, D]`.
    pub fn decode(&self, latents: &Tensor<T>) -> Result<Vec<T>> {
        if latents.rank() != 2 || latents.rows() == 0 || latents.last_dim() != self.cfg.latent_dim {
            return Err(Error::Config(format!(
                "latents {:?} do not match latent dim {}",
                latents.shape(),
                self.cfg.latent_dim
            )));
        }
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let z = t.constant(latents.clone());
        let z = rows_to_latents(&mut t, z, 1);
        let y = self.decoder.forward(&mut t, &p, z);
        t.check()?;
        Ok(t.value(y).data().to_vec())
    }

    pub fn quantize(&self, latents: &Tensor<T>) -> Result<QuantizationResult<T>> {
        quant::split_quantize(&self.stack(), latents)
    }

    /// Waveform → code grid (plus padding length).
    pub fn encode_codes(&self, wave: &[T]) -> Result<(CodeGrid, usize)> {
        let e = self.encode(wave)?;
        Ok((self.quantize(&e.latents)?.codes, e.pad))
    }

    /// Code grid → waveform of length `L·hop`.
    pub fn decode_codes(&self, codes: &CodeGrid) -> Result<Vec<T>> {
        let z = quant::decode_codes(&self.stack(), codes)?;
        self.decode(&z)
    }

    /// Full reconstruction, trimmed back to the input length.
    pub fn reconstruct(&self, wave: &[T]) -> Result<Vec<T>> {
        let e = self.encode(wave)?;
        let q = self.quantize(&e.latents)?;
        let mut y = self.decode(&q.quantized)?;
        y.truncate(wave.len());
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecModel<f64> {
        CodecModel::new(CodecConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn length_arithmetic() {
        let m = tiny();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin() * 0.5).collect();
        let e = m.encode_with(&x, false).unwrap();
        assert_eq!(e.latents.shape(), &[8, 32]);
        let y = m.decode(&e.latents).unwrap();
        assert_eq!(y.len(), 64);
        assert!(y.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        assert_eq!(m.encode_with(&x[..60], false).unwrap_err(), Error::Alignment { len: 60, multiple: 8 });
        assert_eq!(m.encode(&x[..60]).unwrap().pad, 4);
        assert!(m.encode(&[]).is_err());
    }

    #[test]
    fn decode_rejects_wrong_dim() {
        let m = tiny();
        assert!(matches!(m.decode(&Tensor::zeros(vec![2, 5])), Err(Error::Config(_))));
    }

    #[test]
    fn frame_zero_ignores_samples_outside_receptive_field() {
        let m = tiny();
        let (_, hi) = m.encoder.receptive_field(0);
        let n = 8 * (hi as usize / 8 + 16);
        let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let base = m.encode(&x).unwrap().latents;
        let mut far = x.clone();
        for v in &mut far[hi as usize + 1..] {
            *v = 0.9;
        }
        let z = m.encode(&far).unwrap().latents;
        assert_eq!(base.row(0), z.row(0));
        let mut near = x.clone();
        near[hi as usize] += 0.5;
        let z = m.encode(&near).unwrap().latents;
        assert_ne!(base.row(0), z.row(0));
    }
}
