//! Pre-norm causal transformer with rotary positions, a key/value cache and
//! additive attention masks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::layers::{LayerNorm, Linear};
use crate::numerics::{Bound, ParamStore, Tape, Var};
use crate::{Real, Tensor};

/// Additive mask value for blocked attention entries.
pub const BLOCKED: f64 = -1e9;

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Row positions fed to the rotary embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positions {
    /// Row `r` sits at `offset + r`.
    From(usize),
    /// Positions restart every `n` rows.
    Periodic(usize),
}

/// Cached keys (after rotation) and values of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    pub k: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(layers: usize) -> Self {
        Self { layers: vec![LayerCache { k: None, v: None }; layers], len: 0 }
    }
}

fn append<T: Real>(slot: &mut Option<Tensor<T>>, rows: &Tensor<T>) {
    *slot = Some(match slot.take() {
        None => rows.clone(),
        Some(old) => {
            let d = old.last_dim();
            let mut data = old.into_data();
            data.extend_from_slice(rows.data());
            let n = data.len() / d;
            Tensor::new(vec![n, d], data).expect("consistent widths")
        }
    });
}

/// Additive masks: one shared by all layers or one per layer, each `[N, past + N]`.
#[derive(Debug, Clone, Copy)]
pub enum Masks<'a, T> {
    Shared(&'a Tensor<T>),
    PerLayer(&'a [Tensor<T>]),
}

impl<'a, T> Masks<'a, T> {
    fn get(&self, layer: usize) -> &'a Tensor<T> {
        match *self {
            Masks::Shared(m) => m,
            Masks::PerLayer(ms) => &ms[layer],
        }
    }
}

/// Causal mask for `n` new rows after `past` cached ones.
pub fn causal_mask<T: Real>(n: usize, past: usize) -> Tensor<T> {
    let m = past + n;
    let mut data = vec![T::zero(); n * m];
    for i in 0..n {
        for j in past + i + 1..m {
            data[i * m + j] = T::of(BLOCKED);
        }
    }
    Tensor::from_parts(vec![n, m], data)
}

/// Causal mask within consecutive blocks of `block` rows, blocked across blocks.
pub fn block_causal_mask<T: Real>(blocks: usize, block: usize) -> Tensor<T> {
    let n = blocks * block;
    let mut data = vec![T::of(BLOCKED); n * n];
    for b in 0..blocks {
        for i in 0..block {
            for j in 0..=i {
                data[(b * block + i) * n + b * block + j] = T::zero();
            }
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub dim: usize,
    pub heads: usize,
    pub rope_base: f64,
}

impl Transformer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        s: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rope_base: f64,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| {
                let n = format!("{name}.l{i}");
                Block {
                    ln1: LayerNorm::new(s, &format!("{n}.ln1"), dim),
                    wq: Linear::new(s, rng, &format!("{n}.q"), dim, dim, false),
                    wk: Linear::new(s, rng, &format!("{n}.k"), dim, dim, false),
                    wv: Linear::new(s, rng, &format!("{n}.v"), dim, dim, false),
                    wo: Linear::new(s, rng, &format!("{n}.o"), dim, dim, false),
                    ln2: LayerNorm::new(s, &format!("{n}.ln2"), dim),
                    fc1: Linear::new(s, rng, &format!("{n}.fc1"), dim, dim * mlp_ratio, true),
                    fc2: Linear::new(s, rng, &format!("{n}.fc2"), dim * mlp_ratio, dim, true),
                }
            })
            .collect();
        Self { blocks, ln_f: LayerNorm::new(s, &format!("{name}.lnf"), dim), dim, heads, rope_base }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    fn rope<T: Real>(&self, t: &mut Tape<T>, x: Var, pos: Positions) -> Var {
        let base = T::of(self.rope_base);
        match pos {
            Positions::From(o) => t.rope(x, self.heads, o, base),
            Positions::Periodic(n) => t.rope_periodic(x, self.heads, n, base),
        }
    }

    /// Runs `x[N, dim]`. With a cache, the rows continue the cached sequence
    /// and their keys/values are appended to it.
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        x: Var,
        pos: Positions,
        mut cache: Option<&mut KvCache<T>>,
        masks: Masks<'_, T>,
    ) -> Var {
        let n = t.shape(x)[0];
        let hd = self.dim / self.heads;
        let scale = T::of(1.0 / num_traits::Float::sqrt(hd as f64));
        let mut h = x;
        for (l, b) in self.blocks.iter().enumerate() {
            let a = b.ln1.forward(t, p, h);
            let q = b.wq.forward(t, p, a);
            let q = self.rope(t, q, pos);
            let k = b.wk.forward(t, p, a);
            let k = self.rope(t, k, pos);
            let v = b.wv.forward(t, p, a);
            let (k, v) = match cache.as_deref_mut() {
                Some(c) => {
                    let slot = &mut c.layers[l];
                    let (kp, vp) = (slot.k.clone(), slot.v.clone());
                    append(&mut slot.k, t.value(k));
                    append(&mut slot.v, t.value(v));
                    match (kp, vp) {
                        (Some(kp), Some(vp)) => {
                            let kc = t.constant(kp);
                            let vc = t.constant(vp);
                            (t.concat_rows(&[kc, k]), t.concat_rows(&[vc, v]))
                        }
                        _ => (k, v),
                    }
                }
                None => (k, v),
            };
            let mask = t.constant(masks.get(l).clone());
            let mut outs = Vec::with_capacity(self.heads);
            for hh in 0..self.heads {
                let qh = t.slice_cols(q, hh * hd, hd);
                let kh = t.slice_cols(k, hh * hd, hd);
                let vh = t.slice_cols(v, hh * hd, hd);
                let s = t.matmul_nt(qh, kh);
                let s = t.scale(s, scale);
                let s = t.add(s, mask);
                let w = t.softmax(s);
                outs.push(t.matmul(w, vh));
            }
            let o = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
            let o = b.wo.forward(t, p, o);
            h = t.add(h, o);
            let m = b.ln2.forward(t, p, h);
            let m = b.fc1.forward(t, p, m);
            let m = t.gelu(m);
            let m = b.fc2.forward(t, p, m);
            h = t.add(h, m);
        }
        if let Some(c) = cache {
            c.len += n;
        }
        self.ln_f.forward(t, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks_block_the_future() {
        let m: Tensor<f64> = causal_mask(2, 1);
        assert_eq!(m.data(), &[0.0, 0.0, BLOCKED, 0.0, 0.0, 0.0]);
        let b: Tensor<f64> = block_causal_mask(2, 2);
        assert_eq!(b.row(2), &[BLOCKED, BLOCKED, 0.0, BLOCKED]);
        assert_eq!(b.row(3), &[BLOCKED, BLOCKED, 0.0, 0.0]);
    }

    #[test]
    fn cached_steps_match_full_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f64>::new();
        let tr = Transformer::new(&mut s, &mut rng, "t", 2, 8, 2, 2, 10000.0);
        let x: Tensor<f64> = init::normal(&mut rng, &[5, 8], 1.0);

        let mut t = Tape::new();
        let p = s.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let mask = causal_mask(5, 0);
        let full = tr.forward(&mut t, &p, xv, Positions::From(0), None, Masks::Shared(&mask));
        let full = t.value(full).clone();

        let mut cache = KvCache::new(2);
        let head = Tensor::from_parts(vec![3, 8], x.data()[..24].to_vec());
        let m = causal_mask(3, 0);
        let xv = t.constant(head);
        let a = tr.forward(&mut t, &p, xv, Positions::From(0), Some(&mut cache), Masks::Shared(&m));
        let mut rows = t.value(a).data().to_vec();
        for r in 3..5 {
            let xr = t.constant(Tensor::from_parts(vec![1, 8], x.row(r).to_vec()));
            let m = causal_mask(1, cache.len);
            let o = tr.forward(&mut t, &p, xr, Positions::From(r), Some(&mut cache), Masks::Shared(&m));
            rows.extend_from_slice(t.value(o).data());
        }
        assert_eq!(cache.len, 5);
        let inc = Tensor::from_parts(vec![5, 8], rows);
        assert!(full.max_abs_diff(&inc).unwrap() < 1e-12);
    }

    use crate::numerics::params::init;
}
