use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::model::{DualLm, LmExample};
use crate::error::{Error, Result};
use crate::numerics::optim::warmup_lr;
use crate::numerics::params::clip_grad_norm;
use crate::numerics::{AdamW, AdamWConfig, Tape};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl LmTrainConfig {
    pub fn tiny() -> Self {
        Self { lr: 1e-3, warmup: 100, weight_decay: 0.0, grad_clip: 1.0 }
    }

    pub fn paper() -> Self {
        Self { lr: 1e-5, warmup: 20_000, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmMetrics {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub ctx: f64,
    pub acoustic: f64,
}

#[derive(Debug, Clone)]
pub struct LmTrainer<T> {
    pub model: DualLm<T>,
    pub cfg: LmTrainConfig,
    pub opt: AdamW<T>,
}

impl<T: Real> LmTrainer<T> {
    pub fn new(model: DualLm<T>, cfg: LmTrainConfig) -> Self {
        let opt = AdamW::new(
            &model.params,
            AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
        );
        Self { model, cfg, opt }
    }

    /// Mean loss over `batch` without updating.
    pub fn evaluate(&self, batch: &[LmExample]) -> Result<LmMetrics> {
        let mut t = Tape::new();
        let p = self.model.params.bind(&mut t, false);
        let (total, ctx, ac) = self.batch_loss(&mut t, &p, batch)?;
        Ok(LmMetrics {
            step: self.opt.step,
            lr: 0.0,
            total: t.scalar(total).as_f64(),
            ctx: t.scalar(ctx).as_f64(),
            acoustic: t.scalar(ac).as_f64(),
        })
    }

    fn batch_loss(
        &self,
        t: &mut Tape<T>,
        p: &crate::numerics::Bound,
        batch: &[LmExample],
    ) -> Result<(crate::Var, crate::Var, crate::Var)> {
        if batch.is_empty() {
            return Err(Error::Config("empty LM batch".into()));
        }
        let mut parts = (Vec::new(), Vec::new(), Vec::new());
        for ex in batch {
            let l = self.model.loss(t, p, ex)?;
            parts.0.push(l.total);
            parts.1.push(l.ctx);
            parts.2.push(l.acoustic);
        }
        let s = T::of(1.0 / batch.len() as f64);
        let mut mean = |xs: &[crate::Var]| {
            let v = crate::codec::quant::sum_vars(t, xs);
            t.scale(v, s)
        };
        Ok((mean(&parts.0), mean(&parts.1), mean(&parts.2)))
    }

    pub fn train_step(&mut self, batch: &[LmExample]) -> Result<LmMetrics> {
        let mut t = Tape::new();
        let p = self.model.params.bind(&mut t, true);
        let (total, ctx, ac) = self.batch_loss(&mut t, &p, batch)?;
        t.check()?;
        let g = t.backward(total);
        let mut grads = p.grads(&g);
        clip_grad_norm(&mut grads, T::of(self.cfg.grad_clip));
        let lr = warmup_lr(self.cfg.lr, self.cfg.warmup, self.opt.step);
        self.opt.step_with_lr(&mut self.model.params, &grads, lr);
        Ok(LmMetrics {
            step: self.opt.step,
            lr,
            total: t.scalar(total).as_f64(),
            ctx: t.scalar(ctx).as_f64(),
            acoustic: t.scalar(ac).as_f64(),
        })
    }
}
