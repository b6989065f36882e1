//! Alternating discriminator / generator updates.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DiscConfig, DistillTarget, LossWeights, MelLossConfig};
use super::disc::DiscriminatorSet;
use super::distill::{distill_loss, TeacherEmbeddings};
use super::losses::{self, GenLosses, MultiScaleMel};
use super::model::{latents_to_rows, rows_to_latents, CodecModel};
use super::quant::{self, TapeQuant};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Bound, Tape, Var};
use crate::{Real, Tensor};

/// One training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip<T> {
    pub wave: Vec<T>,
    pub teacher: Option<TeacherEmbeddings<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub lr: f64,
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, disc_lr: 1e-3, beta1: 0.8, beta2: 0.99, weight_decay: 0.0, grad_clip: 100.0 }
    }
}

impl CodecTrainConfig {
    fn adam(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CodecMetrics {
    pub step: u64,
    pub disc: f64,
    pub total: f64,
    pub time: f64,
    pub mel: f64,
    pub adv: f64,
    pub feat: f64,
    pub commit: f64,
    pub codebook: f64,
    pub distill: f64,
    pub reseeded: usize,
}

/// Codec, discriminators, both optimisers and the step counter.
#[derive(Debug, Clone)]
pub struct CodecTrainer<T> {
    pub model: CodecModel<T>,
    pub disc: DiscriminatorSet<T>,
    pub weights: LossWeights,
    pub mel: MelLossConfig,
    pub train: CodecTrainConfig,
    pub gen_opt: AdamW<T>,
    pub disc_opt: AdamW<T>,
    pub step: u64,
    pub codebooks_initialized: bool,
    rng: ChaCha8Rng,
}

struct GenForward<T> {
    batch: usize,
    len: usize,
    gen: Bound,
    x: Var,
    y: Var,
    quant: TapeQuant<T>,
    distill: Var,
}

fn check_batch<T: Real>(batch: &[Clip<T>], hop: usize) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::InputTooShort { needed: 1, got: 0 });
    };
    let n = first.wave.len();
    if batch.iter().any(|c| c.wave.len() != n) {
        return Err(Error::Shape("clips in a batch must share one length".into()));
    }
    if n == 0 || n % hop != 0 {
        return Err(Error::Alignment { len: n, multiple: hop });
    }
    Ok(n)
}

impl<T: Real> CodecTrainer<T> {
    pub fn new(
        model: CodecModel<T>,
        disc_cfg: DiscConfig,
        weights: LossWeights,
        mel: MelLossConfig,
        train: CodecTrainConfig,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        mel.validate()?;
        let disc = DiscriminatorSet::new(disc_cfg, seed ^ 0x5eed_d15c)?;
        let gen_opt = AdamW::new(&model.params, train.adam(train.lr));
        let disc_opt = AdamW::new(&disc.params, train.adam(train.disc_lr));
        Ok(Self {
            model,
            disc,
            weights,
            mel,
            train,
            gen_opt,
            disc_opt,
            step: 0,
            codebooks_initialized: false,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0c0d_eb00),
        })
    }

    fn stacked(batch: &[Clip<T>], n: usize) -> Tensor<T> {
        let data: Vec<T> = batch.iter().flat_map(|c| c.wave.iter().copied()).collect();
        Tensor::from_parts(vec![batch.len(), 1, n], data)
    }

    /// k-means initialisation of every codebook from this batch's latents.
    pub fn init_codebooks(&mut self, batch: &[Clip<T>]) -> Result<()> {
        let n = check_batch(batch, self.model.hop())?;
        let mut t = Tape::new();
        let p = self.model.params.bind(&mut t, false);
        let x = t.constant(Self::stacked(batch, n));
        let z = self.model.encoder.forward(&mut t, &p, x);
        let rows = latents_to_rows(&mut t, z);
        t.check()?;
        let mut stack = self.model.stack();
        quant::kmeans_init(&mut stack, t.value(rows), self.model.cfg.kmeans_iters, &mut self.rng);
        self.model.set_stack(&stack);
        self.codebooks_initialized = true;
        Ok(())
    }

    fn gen_forward(&self, t: &mut Tape<T>, batch: &[Clip<T>]) -> Result<GenForward<T>> {
        let n = check_batch(batch, self.model.hop())?;
        let m = &self.model;
        let gen = m.params.bind(t, true);
        let x = t.constant(Self::stacked(batch, n));
        let z = m.encoder.forward(t, &gen, x);
        let rows = latents_to_rows(t, z);
        let tables: Vec<Var> = m.quant.ids().map(|id| gen.var(id)).collect();
        let quant = quant::quantize_on_tape(t, &m.stack(), &tables, rows)?;
        let zq = rows_to_latents(t, quant.quantized, batch.len());
        let y = m.decoder.forward(t, &gen, zq);
        let l = n / m.hop();
        let c0 = match m.cfg.distill_target {
            DistillTarget::Quantized => quant.semantic,
            DistillTarget::PreQuantized => rows,
        };
        let mut terms = Vec::new();
        for (b, clip) in batch.iter().enumerate() {
            if let Some(te) = &clip.teacher {
                let cb = t.slice_rows(c0, b * l, l);
                terms.push(distill_loss(t, &gen, &m.proj, cb, te)?);
            }
        }
        let distill = if terms.is_empty() {
            t.constant(Tensor::scalar(T::zero()))
        } else {
            let s = quant::sum_vars(t, &terms);
            t.scale(s, T::of(1.0 / terms.len() as f64))
        };
        t.check()?;
        Ok(GenForward { batch: batch.len(), len: n, gen, x, y, quant, distill })
    }

    /// Reconstructions of the batch under the current generator.
    pub fn reconstruct_batch(&self, batch: &[Clip<T>]) -> Result<Vec<Vec<T>>> {
        let mut t = Tape::new();
        let f = self.gen_forward(&mut t, batch)?;
        Ok(t.value(f.y).data().chunks(f.len).map(<[T]>::to_vec).collect())
    }

    /// One discriminator update on `(real, fake)` pairs; returns `L_D`.
    pub fn disc_step(&mut self, batch: &[Clip<T>], fake: &[Vec<T>]) -> Result<f64> {
        let mut t = Tape::new();
        let p = self.disc.params.bind(&mut t, true);
        let mut terms = Vec::new();
        for (clip, f) in batch.iter().zip(fake) {
            let r = t.constant(Tensor::vector(clip.wave.clone()));
            let fv = t.constant(Tensor::vector(f.clone()));
            let ro = self.disc.forward(&mut t, &p, r)?;
            let fo = self.disc.forward(&mut t, &p, fv)?;
            terms.push(losses::disc_loss(&mut t, &ro, &fo));
        }
        let s = quant::sum_vars(&mut t, &terms);
        let loss = t.scale(s, T::of(1.0 / terms.len() as f64));
        t.check()?;
        let g = t.backward(loss);
        let mut grads = p.grads(&g);
        crate::numerics::params::clip_grad_norm(&mut grads, T::of(self.train.grad_clip));
        let lr = self.train.disc_lr;
        self.disc_opt.step_with_lr(&mut self.disc.params, &grads, lr);
        Ok(t.scalar(loss).as_f64())
    }

    /// Generator objective on the tape plus its scalar components.
    fn gen_objective(&self, t: &mut Tape<T>, f: &GenForward<T>) -> Result<(Var, CodecMetrics)> {
        let dp = self.disc.params.bind(t, false);
        let mel = MultiScaleMel::new(&self.mel, f.len, self.model.cfg.sample_rate as f64)?;
        let (mut time, mut melv, mut adv, mut feat) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for b in 0..f.batch {
            let xb = t.slice_rows(f.x, b, 1);
            let xb = t.reshape(xb, &[f.len]);
            let yb = t.slice_rows(f.y, b, 1);
            let yb = t.reshape(yb, &[f.len]);
            time.push(losses::time_loss(t, xb, yb)?);
            melv.push(mel.loss(t, xb, yb)?);
            let ro = self.disc.forward(t, &dp, xb)?;
            let fo = self.disc.forward(t, &dp, yb)?;
            adv.push(losses::gen_adv_loss(t, &fo));
            feat.push(losses::feat_match_loss(t, &ro, &fo));
        }
        let inv = T::of(1.0 / f.batch as f64);
        let mut avg = |v: &[Var]| {
            let s = quant::sum_vars(t, v);
            t.scale(s, inv)
        };
        let parts = GenLosses {
            time: avg(&time),
            mel: avg(&melv),
            adv: avg(&adv),
            feat: avg(&feat),
            commit: f.quant.commitment,
            distill: f.distill,
        };
        let gtotal = losses::generator_total(t, &parts, &self.weights)?;
        let total = t.add(gtotal, f.quant.codebook);
        t.check()?;
        let v = |x: Var| t.scalar(x).as_f64();
        let metrics = CodecMetrics {
            step: self.step,
            total: v(total),
            time: v(parts.time),
            mel: v(parts.mel),
            adv: v(parts.adv),
            feat: v(parts.feat),
            commit: v(parts.commit),
            codebook: v(f.quant.codebook),
            distill: v(parts.distill),
            ..Default::default()
        };
        Ok((total, metrics))
    }

    /// Generator losses on `batch` without updating anything.
    pub fn evaluate(&self, batch: &[Clip<T>]) -> Result<CodecMetrics> {
        let mut t = Tape::new();
        let f = self.gen_forward(&mut t, batch)?;
        Ok(self.gen_objective(&mut t, &f)?.1)
    }

    fn gen_finish(&mut self, mut t: Tape<T>, f: GenForward<T>) -> Result<CodecMetrics> {
        let (total, mut metrics) = self.gen_objective(&mut t, &f)?;
        let g = t.backward(total);
        let mut grads = f.gen.grads(&g);
        crate::numerics::params::clip_grad_norm(&mut grads, T::of(self.train.grad_clip));
        let lr = self.train.lr;
        self.gen_opt.step_with_lr(&mut self.model.params, &grads, lr);

        let res = &f.quant.result;
        let mut stack = self.model.stack();
        let mut reseeded = 0;
        let tables = core::iter::once(&mut stack.semantic).chain(stack.acoustic.iter_mut());
        for (level, table) in tables.enumerate() {
            self.model.usage[level].record(&res.codes.row(level));
            reseeded += quant::reseed_dead(
                table,
                &mut self.model.usage[level],
                &res.inputs[level],
                self.model.cfg.dead_after,
                &mut self.rng,
            );
        }
        if reseeded > 0 {
            self.model.set_stack(&stack);
        }
        metrics.reseeded = reseeded;
        Ok(metrics)
    }

    /// One generator update without touching the discriminators.
    pub fn gen_step(&mut self, batch: &[Clip<T>]) -> Result<CodecMetrics> {
        if !self.codebooks_initialized {
            self.init_codebooks(batch)?;
        }
        let mut t = Tape::new();
        let f = self.gen_forward(&mut t, batch)?;
        let m = self.gen_finish(t, f)?;
        self.step += 1;
        Ok(m)
    }

    /// One discriminator update followed by one generator update on `batch`.
    pub fn train_step(&mut self, batch: &[Clip<T>]) -> Result<CodecMetrics> {
        if !self.codebooks_initialized {
            self.init_codebooks(batch)?;
        }
        let mut t = Tape::new();
        let f = self.gen_forward(&mut t, batch)?;
        let fake: Vec<Vec<T>> = t.value(f.y).data().chunks(f.len).map(<[T]>::to_vec).collect();
        let d = self.disc_step(batch, &fake)?;
        let mut m = self.gen_finish(t, f)?;
        m.disc = d;
        self.step += 1;
        Ok(m)
    }
}
