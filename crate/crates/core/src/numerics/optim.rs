//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimiser state for one [`ParamStore`]; moment tensors are in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let m: Vec<_> = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { cfg, step: 0, v: m.clone(), m }
    }

    /// One update with learning rate `lr` (callers own the schedule).
    /// Parameters without a gradient are left untouched.
    pub fn step_with_lr(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - num_traits::Float::powi(c.beta1, self.step as i32);
        let bc2 = 1.0 - num_traits::Float::powi(c.beta2, self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr_t, eps, wd) = (T::of(lr), T::of(c.eps), T::of(lr * c.weight_decay));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for ((id, g), (m, v)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let Some(g) = g else { continue };
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                if lr == 0.0 {
                    // p - 0 would turn -0.0 into +0.0
                    continue;
                }
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= wd * *p;
                *p -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        let lr = self.cfg.lr;
        self.step_with_lr(store, grads, lr);
    }
}

/// Linear warm-up to `peak` over `warmup` steps, then constant.
pub fn warmup_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::new(vec![3], vec![0.5, -0.0, 3.25]).unwrap());
        let before = s.clone();
        let mut opt = AdamW::new(&s, AdamWConfig { lr: 0.0, weight_decay: 0.1, ..Default::default() });
        let g = vec![Some(Tensor::new(vec![3], vec![1.0, -2.0, 0.3]).unwrap())];
        opt.step(&mut s, &g);
        let bits = |s: &ParamStore<f32>| s.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&s));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut opt = AdamW::new(&s, AdamWConfig { lr: 0.1, eps: 0.0, ..Default::default() });
        opt.step(&mut s, &[Some(Tensor::new(vec![2], vec![4.0, -0.5]).unwrap())]);
        let w = s.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] - 1.1).abs() < 1e-12);
    }
}
