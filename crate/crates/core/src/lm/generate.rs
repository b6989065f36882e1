//! Interleaved semantic/acoustic decoding.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::SamplingConfig;
use super::model::{argmax, AcousticRow, DualLm};
use super::transformer::{causal_mask, KvCache, Masks, Positions};
use crate::codec::CodeGrid;
use crate::error::{Error, Result};
use crate::numerics::{Bound, Tape};
use crate::{Real, Tensor};

/// Drives the semantic transformer during decoding. Each call returns the
/// prediction made after the last fed row, shape `[1, d]`.
pub trait SemanticStepper<T: Real> {
    /// First call: the whole `[text ; SEP ; prompt frames]` input. `audio` is
    /// the row range holding prompt frames.
    fn prefill(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, x: &Tensor<T>, audio: Range<usize>) -> Result<Tensor<T>>;
    /// One re-embedded frame `[1, d]`.
    fn step(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Single unmasked stream with a KV cache.
#[derive(Debug, Clone)]
pub struct PlainStepper<T> {
    cache: Option<KvCache<T>>,
}

impl<T> Default for PlainStepper<T> {
    fn default() -> Self {
        Self { cache: None }
    }
}

impl<T: Real> PlainStepper<T> {
    fn run(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, x: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.get_or_insert_with(|| KvCache::new(lm.semantic_layers()));
        let n = x.rows();
        let past = cache.len;
        let mask = causal_mask(n, past);
        let xv = t.constant(x.clone());
        let out = lm.semantic_hidden(t, p, xv, Positions::From(past), Some(cache), Masks::Shared(&mask));
        let last = t.slice_rows(out, n - 1, 1);
        t.value(last).clone()
    }
}

impl<T: Real> SemanticStepper<T> for PlainStepper<T> {
    fn prefill(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, x: &Tensor<T>, _audio: Range<usize>) -> Result<Tensor<T>> {
        self.cache = None;
        Ok(self.run(lm, t, p, x))
    }

    fn step(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(lm, t, p, x))
    }
}

/// Decoded continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// `K` codes per generated frame.
    pub frames: Vec<Vec<usize>>,
    /// Hit the frame or sequence limit before EOS.
    pub truncated: bool,
    /// Acoustic-transformer row evaluations.
    pub acoustic_calls: usize,
}

impl Generation {
    pub fn to_grid(&self, codebook_size: usize) -> Result<CodeGrid> {
        let k = self.frames.first().map_or(0, Vec::len);
        let rows: Vec<Vec<usize>> = (0..k).map(|l| self.frames.iter().map(|f| f[l]).collect()).collect();
        CodeGrid::from_rows(&rows, codebook_size)
    }
}

/// Picks a code from `[1, n]` logits.
pub fn sample_code<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplingConfig, rng: &mut R) -> usize {
    if cfg.greedy {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(cfg.top_k.min(logits.len()));
    let m = logits[order[0]];
    let w: Vec<f64> = order.iter().map(|&i| Float::exp((logits[i] - m) / cfg.temperature)).collect();
    let z: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * z;
    for (&i, &wi) in order.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    order[0]
}

/// Prompt layout: `[prompt_text ⊕ text ; SEP ; prompt frames]`.
pub fn prompt_input<T: Real>(
    lm: &DualLm<T>,
    t: &mut Tape<T>,
    p: &Bound,
    prompt_text: &[usize],
    text: &[usize],
    prompt: Option<&CodeGrid>,
) -> Result<(Tensor<T>, Range<usize>)> {
    let mut ids = prompt_text.to_vec();
    ids.extend_from_slice(text);
    let head = lm.embed_text(t, p, &ids)?;
    let m = t.shape(head)[0];
    let x = match prompt {
        Some(g) => {
            let levels: Vec<Vec<usize>> = (0..g.levels()).map(|k| g.row(k)).collect();
            if g.codebook_size() != lm.cfg.codebook_size {
                return Err(Error::Config("prompt codebook size differs from the model".into()));
            }
            let s = lm.embed_frames(t, p, &levels)?;
            t.concat_rows(&[head, s])
        }
        None => head,
    };
    let n = t.shape(x)[0];
    Ok((t.value(x).clone(), m..n))
}

/// Continues `prompt` for `text`, stopping at EOS in codebook 0.
pub fn generate<T: Real>(
    lm: &DualLm<T>,
    stepper: &mut dyn SemanticStepper<T>,
    prompt_text: &[usize],
    text: &[usize],
    prompt: Option<&CodeGrid>,
    sampling: &SamplingConfig,
) -> Result<Generation> {
    sampling.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let k = lm.cfg.n_codebooks;
    let eos = lm.cfg.eos();

    let mut t = Tape::new();
    let p = lm.params.bind(&mut t, false);
    let (x, audio) = prompt_input(lm, &mut t, &p, prompt_text, text, prompt)?;
    let mut len = x.rows();
    if len > lm.cfg.max_seq_len {
        return Err(Error::Sequence { len, max: lm.cfg.max_seq_len });
    }
    let mut h = stepper.prefill(lm, &mut t, &p, &x, audio)?;

    let mut gen = Generation { frames: Vec::new(), truncated: false, acoustic_calls: 0 };
    loop {
        let mut t = Tape::new();
        let p = lm.params.bind(&mut t, false);
        let hv = t.constant(h);
        let mut cache = KvCache::new(lm.cfg.acoustic_layers);
        let mut frame = Vec::with_capacity(k);
        let mut out = lm.acoustic_step(&mut t, &p, &mut cache, AcousticRow::Cond(hv))?;
        gen.acoustic_calls += 1;
        for level in 0..k {
            if level > 0 {
                out = lm.acoustic_step(&mut t, &p, &mut cache, AcousticRow::Code(level - 1, frame[level - 1]))?;
                gen.acoustic_calls += 1;
            }
            let lg = lm.acoustic_head(&mut t, &p, out, level);
            let row: Vec<f64> = t.value(lg).data().iter().map(|v| v.as_f64()).collect();
            frame.push(sample_code(&row, sampling, &mut rng));
            if level == 0 && frame[0] == eos {
                return Ok(gen);
            }
        }
        gen.frames.push(frame);
        if gen.frames.len() >= sampling.max_frames || len >= lm.cfg.max_seq_len {
            gen.truncated = true;
            return Ok(gen);
        }
        let last = gen.frames.last().expect("just pushed");
        let levels: Vec<Vec<usize>> = last.iter().map(|&c| vec![c]).collect();
        let s = lm.embed_frames(&mut t, &p, &levels)?;
        let s = t.value(s).clone();
        h = stepper.step(lm, &mut t, &p, &s)?;
        len += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn lm() -> DualLm<f64> {
        let cfg = LmConfig {
            text_vocab: 16,
            n_codebooks: 2,
            codebook_size: 6,
            semantic_layers: 1,
            semantic_dim: 8,
            semantic_heads: 2,
            acoustic_layers: 1,
            acoustic_dim: 8,
            acoustic_heads: 2,
            mlp_ratio: 2,
            max_seq_len: 64,
            rope_base: 10000.0,
        };
        DualLm::new(cfg, 11).unwrap()
    }

    fn prompt() -> CodeGrid {
        CodeGrid::new(2, 3, 6, vec![1, 2, 3, 4, 5, 0]).unwrap()
    }

    #[test]
    fn greedy_is_deterministic_and_counts_calls() {
        let m = lm();
        let s = SamplingConfig::greedy(10);
        let a = generate(&m, &mut PlainStepper::default(), &[1], &[2, 3], Some(&prompt()), &s).unwrap();
        let b = generate(&m, &mut PlainStepper::default(), &[1], &[2, 3], Some(&prompt()), &s).unwrap();
        assert_eq!(a, b);
        let eos_check = usize::from(!a.truncated);
        assert_eq!(a.acoustic_calls, 2 * a.frames.len() + eos_check);
        assert!(a.frames.len() <= 10);
    }

    #[test]
    fn cold_temperature_equals_greedy() {
        let m = lm();
        let g = generate(&m, &mut PlainStepper::default(), &[], &[4], None, &SamplingConfig::greedy(8)).unwrap();
        let cold = SamplingConfig { greedy: false, temperature: 1e-9, top_k: 50, max_frames: 8, seed: 3 };
        let c = generate(&m, &mut PlainStepper::default(), &[], &[4], None, &cold).unwrap();
        assert_eq!(g, c);
    }

    #[test]
    fn top_k_limits_choices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplingConfig { top_k: 2, temperature: 5.0, ..Default::default() };
        let logits = [0.0, 3.0, 1.0, 2.9];
        for _ in 0..200 {
            let c = sample_code(&logits, &cfg, &mut rng);
            assert!(c == 1 || c == 3);
        }
    }

    #[test]
    fn zero_temperature_is_rejected() {
        let m = lm();
        let s = SamplingConfig { temperature: 0.0, ..Default::default() };
        assert!(generate(&m, &mut PlainStepper::default(), &[], &[1], None, &s).is_err());
    }

    #[test]
    fn frame_limit_sets_truncated() {
        let m = lm();
        let g = generate(&m, &mut PlainStepper::default(), &[], &[1], None, &SamplingConfig::greedy(1)).unwrap();
        assert!(g.truncated || g.frames.is_empty());
    }
}
