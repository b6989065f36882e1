//! Parameterised building blocks shared by the codec and the language model.

use alloc::format;
use alloc::vec;

use rand::Rng;

use crate::numerics::params::init;
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Var};
use crate::{Real, Tensor};

/// Weight-normalised 1-D convolution; `w = g · v / ‖v‖` per output channel.
#[derive(Debug, Clone)]
pub struct Conv {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

fn row_norms<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    let rows = v.shape()[0];
    let rs = v.numel() / rows;
    Tensor::vector(v.data().chunks(rs).map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt()).collect())
}

impl Conv {
    /// Conv with symmetric "same" padding for odd kernels.
    pub fn same<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let p = dilation * (kernel - 1) / 2;
        Self::new(store, rng, name, c_in, c_out, kernel, 1, dilation, p, p)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Self {
        let v: Tensor<T> = init::fan_in(rng, &[c_out, c_in, kernel], c_in * kernel);
        let g = row_norms(&v);
        Self {
            v: store.add(format!("{name}.v"), v),
            g: store.add(format!("{name}.g"), g),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![c_out])),
            c_in,
            c_out,
            kernel,
            stride,
            dilation,
            pad_left,
            pad_right,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let w = tape.weight_norm(p.var(self.v), p.var(self.g));
        tape.conv1d(x, w, Some(p.var(self.b)), self.stride, self.dilation, self.pad_left, self.pad_right)
    }

    pub fn out_len(&self, len_in: usize) -> usize {
        (len_in + self.pad_left + self.pad_right - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
}

/// Weight-normalised transposed convolution upsampling by exactly `stride`.
#[derive(Debug, Clone)]
pub struct ConvT {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub trim: usize,
}

impl ConvT {
    /// Kernel `2·stride`, trimming `⌈stride/2⌉` samples so `L → L·stride`.
    pub fn upsample<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let v: Tensor<T> = init::fan_in(rng, &[c_in, c_out, 2 * stride], c_in * 2);
        let g = row_norms(&v);
        Self {
            v: store.add(format!("{name}.v"), v),
            g: store.add(format!("{name}.g"), g),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![c_out])),
            stride,
            trim: stride.div_ceil(2),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let len = *tape.shape(x).last().unwrap() * self.stride;
        let w = tape.weight_norm(p.var(self.v), p.var(self.g));
        tape.conv_transpose1d(x, w, Some(p.var(self.b)), self.stride, self.trim, len)
    }
}

/// `y = x·W + b` on `[N, d_in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init::fan_in(rng, &[d_in, d_out], d_in));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), T::of(1e-5))
    }
}

/// Per-channel Snake slopes, initialised to 1.
pub fn snake_alpha<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> ParamId {
    store.add(format!("{name}.alpha"), Tensor::full(vec![channels], T::one()))
}
