//! Masked parallel-stream inference: `P` copies of the semantic input with
//! different key masks, combined with learned softmax weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::{ctx_loss, DualLm, LmExample};
use crate::lm::transformer::{causal_mask, KvCache, Masks, Positions, BLOCKED};
use crate::lm::SemanticStepper;
use crate::numerics::params::{clip_grad_norm, init};
use crate::numerics::{AdamW, AdamWConfig, Bound, ParamId, ParamStore, Tape, Var};
use crate::{Real, Tensor};

/// Where stream masks apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSite {
    /// Dropped prompt-audio keys in every attention layer.
    Attention,
    /// Zeroed prompt-audio input embeddings.
    Embedding,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMaskPlan {
    pub p_mask: f64,
    /// One seed per stream; stream 0 is never masked.
    pub seeds: Vec<u64>,
    pub site: MaskSite,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamMaskPlan {
    /// `streams` streams with seeds derived from `seed`.
    pub fn new(streams: usize, p_mask: f64, seed: u64) -> Result<Self> {
        let seeds = (0..streams as u64).map(|i| mix(seed ^ mix(i))).collect();
        let plan = Self { p_mask, seeds, site: MaskSite::Attention };
        plan.validate()?;
        Ok(plan)
    }

    pub fn streams(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one parallel stream is required".into()));
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err(Error::Config(format!("mask probability {} outside [0, 1]", self.p_mask)));
        }
        Ok(())
    }

    /// Drop flags over `n` prompt-audio positions for `stream` at `layer`
    /// (`layer == usize::MAX` is the embedding-site draw).
    pub fn drops(&self, stream: usize, layer: usize, n: usize) -> Vec<bool> {
        if stream == 0 || self.p_mask == 0.0 {
            return vec![false; n];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seeds[stream] ^ mix((layer as u64).wrapping_add(1))));
        (0..n).map(|_| rng.random::<f64>() < self.p_mask).collect()
    }

    fn masks_attention(&self) -> bool {
        matches!(self.site, MaskSite::Attention | MaskSite::Both)
    }

    fn masks_embedding(&self) -> bool {
        matches!(self.site, MaskSite::Embedding | MaskSite::Both)
    }
}

/// `P` input copies plus per-stream, per-layer key drops over the audio rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams<T> {
    pub inputs: Vec<Tensor<T>>,
    /// `[stream][layer][audio position]`.
    pub drops: Vec<Vec<Vec<bool>>>,
    pub audio: Range<usize>,
}

pub fn make_streams<T: Real>(x: &Tensor<T>, plan: &StreamMaskPlan, audio: Range<usize>, layers: usize) -> Result<Streams<T>> {
    plan.validate()?;
    if audio.end > x.rows() || audio.start > audio.end {
        return Err(Error::Shape(format!("audio rows {audio:?} outside {} input rows", x.rows())));
    }
    let n = audio.len();
    let mut inputs = Vec::with_capacity(plan.streams());
    let mut drops = Vec::with_capacity(plan.streams());
    for i in 0..plan.streams() {
        let mut xi = x.clone();
        if plan.masks_embedding() {
            for (j, d) in plan.drops(i, usize::MAX, n).into_iter().enumerate() {
                if d {
                    xi.row_mut(audio.start + j).fill(T::zero());
                }
            }
        }
        inputs.push(xi);
        drops.push(
            (0..layers)
                .map(|l| if plan.masks_attention() { plan.drops(i, l, n) } else { vec![false; n] })
                .collect(),
        );
    }
    Ok(Streams { inputs, drops, audio })
}

/// Causal mask for `n` rows after `past` with dropped audio keys blocked for
/// later queries (a row always sees itself).
pub fn stream_mask<T: Real>(n: usize, past: usize, audio: &Range<usize>, drops: &[bool]) -> Tensor<T> {
    let mut m = causal_mask::<T>(n, past);
    let w = past + n;
    for (j, &d) in drops.iter().enumerate() {
        let key = audio.start + j;
        if !d || key >= w {
            continue;
        }
        for i in 0..n {
            if past + i > key {
                m.data_mut()[i * w + key] = T::of(BLOCKED);
            }
        }
    }
    m
}

/// Permutation-equivariant scorer: stream `i` gets logit
/// `u · tanh(W_s o_i + W_c mean(o) + b)`, then softmax over streams.
#[derive(Debug, Clone)]
pub struct AggregationHead<T> {
    pub params: ParamStore<T>,
    ws: ParamId,
    wc: ParamId,
    b: ParamId,
    u: ParamId,
}

impl<T: Real> AggregationHead<T> {
    /// `u` starts at zero, so an untrained head averages the streams.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ws = s.add("agg.self", init::fan_in(&mut rng, &[dim, dim], dim));
        let wc = s.add("agg.ctx", init::fan_in(&mut rng, &[dim, dim], dim));
        let b = s.add("agg.b", Tensor::zeros(vec![dim]));
        let u = s.add("agg.u", Tensor::zeros(vec![dim, 1]));
        Self { params: s, ws, wc, b, u }
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.ws).rows()
    }

    /// Stream logits `[N, P]` for `P` outputs of shape `[N, d]`.
    pub fn logits(&self, t: &mut Tape<T>, p: &Bound, outs: &[Var]) -> Var {
        let sum = crate::codec::quant::sum_vars(t, outs);
        let mean = t.scale(sum, T::of(1.0 / outs.len() as f64));
        let c = t.matmul(mean, p.var(self.wc));
        let c = t.add_bias(c, p.var(self.b));
        let cols: Vec<Var> = outs
            .iter()
            .map(|&o| {
                let h = t.matmul(o, p.var(self.ws));
                let h = t.add(h, c);
                let h = t.tanh(h);
                t.matmul(h, p.var(self.u))
            })
            .collect();
        if cols.len() == 1 {
            cols[0]
        } else {
            t.concat_cols(&cols)
        }
    }

    /// `(y [N, d], w [N, P])`; a single stream passes through with weight 1.
    pub fn aggregate_on_tape(&self, t: &mut Tape<T>, p: &Bound, outs: &[Var]) -> (Var, Var) {
        let n = t.shape(outs[0])[0];
        if outs.len() == 1 {
            return (outs[0], t.constant(Tensor::full(vec![n, 1], T::one())));
        }
        let l = self.logits(t, p, outs);
        weighted_sum(t, outs, l)
    }
}

/// `w = softmax(logits)` row-wise and `y = Σ_i w_i o_i`.
pub fn weighted_sum<T: Real>(t: &mut Tape<T>, outs: &[Var], logits: Var) -> (Var, Var) {
    let w = t.softmax(logits);
    let d = t.shape(outs[0])[1];
    let ones = t.constant(Tensor::full(vec![1, d], T::one()));
    let terms: Vec<Var> = outs
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let wi = t.slice_cols(w, i, 1);
            let wb = t.matmul(wi, ones);
            t.mul(o, wb)
        })
        .collect();
    (crate::codec::quant::sum_vars(t, &terms), w)
}

/// Aggregates `outputs[P, d]` into `(y[d], w[P])`.
pub fn aggregate<T: Real>(outputs: &Tensor<T>, head: &AggregationHead<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if outputs.rank() != 2 || outputs.rows() == 0 || outputs.last_dim() != head.dim() {
        return Err(Error::Shape(format!("aggregate expects [P, {}], got {:?}", head.dim(), outputs.shape())));
    }
    let mut t = Tape::new();
    let p = head.params.bind(&mut t, false);
    let outs: Vec<Var> = (0..outputs.rows())
        .map(|i| t.constant(Tensor::from_parts(vec![1, outputs.last_dim()], outputs.row(i).to_vec())))
        .collect();
    let (y, w) = head.aggregate_on_tape(&mut t, &p, &outs);
    let y = t.value(y).clone().reshape(vec![outputs.last_dim()])?;
    let w = t.value(w).clone().reshape(vec![outputs.rows()])?;
    Ok((y, w))
}

/// [`SemanticStepper`] running `P` masked streams with their own caches.
#[derive(Debug, Clone)]
pub struct MapiStepper<'h, T> {
    pub plan: StreamMaskPlan,
    head: &'h AggregationHead<T>,
    caches: Vec<KvCache<T>>,
    drops: Vec<Vec<Vec<bool>>>,
    audio: Range<usize>,
    /// Aggregation weights per decode step.
    pub weights: Vec<Vec<f64>>,
}

impl<'h, T: Real> MapiStepper<'h, T> {
    pub fn new(plan: StreamMaskPlan, head: &'h AggregationHead<T>) -> Result<Self> {
        plan.validate()?;
        Ok(Self { plan, head, caches: Vec::new(), drops: Vec::new(), audio: 0..0, weights: Vec::new() })
    }

    fn run(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut outs = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            let n = x.rows();
            let cache = &mut self.caches[i];
            let past = cache.len;
            let masks: Vec<Tensor<T>> =
                self.drops[i].iter().map(|d| stream_mask(n, past, &self.audio, d)).collect();
            let xv = t.constant(x.clone());
            let o = lm.semantic_hidden(t, p, xv, Positions::From(past), Some(cache), Masks::PerLayer(&masks));
            outs.push(t.slice_rows(o, n - 1, 1));
        }
        let hp = self.head.params.bind(t, false);
        let (y, w) = self.head.aggregate_on_tape(t, &hp, &outs);
        self.weights.push(t.value(w).to_f64_vec());
        Ok(t.value(y).clone())
    }
}

impl<T: Real> SemanticStepper<T> for MapiStepper<'_, T> {
    fn prefill(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, x: &Tensor<T>, audio: Range<usize>) -> Result<Tensor<T>> {
        let s = make_streams(x, &self.plan, audio, lm.semantic_layers())?;
        self.caches = vec![KvCache::new(lm.semantic_layers()); s.inputs.len()];
        self.drops = s.drops;
        self.audio = s.audio;
        self.weights.clear();
        self.run(lm, t, p, &s.inputs)
    }

    fn step(&mut self, lm: &DualLm<T>, t: &mut Tape<T>, p: &Bound, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inputs = vec![x.clone(); self.caches.len()];
        self.run(lm, t, p, &inputs)
    }
}

/// Teacher-forced aggregated `ctx_loss` on one utterance; the speech frames
/// are the maskable rows. `hp` binds the head, the model is frozen.
pub fn head_loss<T: Real>(
    lm: &DualLm<T>,
    head: &AggregationHead<T>,
    plan: &StreamMaskPlan,
    t: &mut Tape<T>,
    hp: &Bound,
    ex: &LmExample,
) -> Result<Var> {
    let p = lm.params.bind(t, false);
    let levels = lm.with_eos(&ex.codes);
    let f = levels[0].len();
    let target = lm.embed_frames(t, &p, &levels)?;
    let head_rows = lm.embed_text(t, &p, &ex.text)?;
    let m = t.shape(head_rows)[0] - 1;
    let inputs = t.slice_rows(target, 0, f - 1);
    let x = t.concat_rows(&[head_rows, inputs]);
    let n = t.shape(x)[0];
    if n > lm.cfg.max_seq_len {
        return Err(Error::Sequence { len: n, max: lm.cfg.max_seq_len });
    }
    let xv = t.value(x).clone();
    let s = make_streams(&xv, plan, m + 1..n, lm.semantic_layers())?;
    let mut outs = Vec::with_capacity(s.inputs.len());
    for (xi, drops) in s.inputs.iter().zip(&s.drops) {
        let masks: Vec<Tensor<T>> = drops.iter().map(|d| stream_mask(n, 0, &s.audio, d)).collect();
        let xc = t.constant(xi.clone());
        let o = lm.semantic_hidden(t, &p, xc, Positions::From(0), None, Masks::PerLayer(&masks));
        outs.push(t.slice_rows(o, m, f));
    }
    let (y, _) = head.aggregate_on_tape(t, hp, &outs);
    Ok(ctx_loss(t, y, target))
}

/// Fits the head with the base model frozen; returns the loss per step.
pub fn train_head<T: Real>(
    lm: &DualLm<T>,
    head: &mut AggregationHead<T>,
    plan: &StreamMaskPlan,
    data: &[LmExample],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("no head-training data".into()));
    }
    let mut opt = AdamW::new(&head.params, AdamWConfig { lr, ..Default::default() });
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let ex = &data[step % data.len()];
        let mut t = Tape::new();
        let hp = head.params.bind(&mut t, true);
        let l = head_loss(lm, head, plan, &mut t, &hp, ex)?;
        t.check()?;
        let g = t.backward(l);
        let mut grads = hp.grads(&g);
        clip_grad_norm(&mut grads, T::one());
        opt.step_with_lr(&mut head.params, &grads, lr);
        losses.push(t.scalar(l).as_f64());
    }
    Ok(losses)
}
