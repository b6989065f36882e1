//! Cosine alignment of the semantic quantizer with teacher embeddings.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Bound, ParamStore, Tape, Var};
use crate::{Real, Tensor};

pub const COSINE_EPS: f64 = 1e-8;

/// Precomputed teacher frames `[L_S, D_S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbeddings<T> {
    pub frames: Tensor<T>,
    pub frame_rate: f64,
}

impl<T: Real> TeacherEmbeddings<T> {
    pub fn new(frames: Tensor<T>, frame_rate: f64) -> Result<Self> {
        if frames.rank() != 2 || frames.rows() == 0 {
            return Err(Error::Shape(alloc::format!("teacher frames must be [L_S >= 1, D_S], got {:?}", frames.shape())));
        }
        if !frames.is_finite() {
            return Err(Error::Evaluation("teacher embeddings contain NaN or Inf".into()));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.last_dim()
    }
}

/// Mean-pools teacher frames onto `target_len` frames over windows of
/// `r = ⌈L_S / L⌉`, edge-replicating the last frame when `L_S` is not `r·L`.
pub fn resample_teacher<T: Real>(emb: &TeacherEmbeddings<T>, target_len: usize) -> Result<Tensor<T>> {
    let (ls, d) = (emb.len(), emb.dim());
    if target_len == 0 || ls < target_len {
        return Err(Error::Sequence { len: target_len, max: ls });
    }
    let r = ls.div_ceil(target_len);
    let inv = T::of(1.0 / r as f64);
    let mut out = Vec::with_capacity(target_len * d);
    for t in 0..target_len {
        let mut acc = alloc::vec![T::zero(); d];
        for j in 0..r {
            let src = emb.frames.row((t * r + j).min(ls - 1));
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a * inv));
    }
    Tensor::new(alloc::vec![target_len, d], out)
}

/// Trainable linear map from teacher width to latent width.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, teacher_dim: usize, latent_dim: usize) -> Self {
        Self { linear: Linear::new(store, rng, "proj", teacher_dim, latent_dim, true) }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, teacher: Var) -> Var {
        self.linear.forward(tape, p, teacher)
    }
}

/// `1 − mean_t cos(c0_t, target_t)` on tape nodes of equal shape.
pub fn cosine_distance<T: Real>(tape: &mut Tape<T>, c0: Var, target: Var) -> Var {
    let cos = tape.cosine_rows(c0, target, T::of(COSINE_EPS));
    let m = tape.mean(cos);
    let one = tape.constant(Tensor::scalar(T::one()));
    tape.sub(one, m)
}

/// Distillation loss of `c0[L, D]`; the teacher enters as a constant so only
/// `c0` and the projection head receive gradients.
pub fn distill_loss<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    head: &ProjectionHead,
    c0: Var,
    emb: &TeacherEmbeddings<T>,
) -> Result<Var> {
    let l = tape.shape(c0)[0];
    let teacher = tape.constant(resample_teacher(emb, l)?);
    let target = head.forward(tape, p, teacher);
    if tape.shape(target) != tape.shape(c0) {
        return Err(Error::Shape(alloc::format!(
            "projected teacher {:?} vs semantic {:?}",
            tape.shape(target),
            tape.shape(c0)
        )));
    }
    Ok(cosine_distance(tape, c0, target))
}

/// Value of the cosine distance between two `[L, D]` tensors.
pub fn cosine_distance_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = cosine_distance(&mut tape, a, b);
    tape.scalar(l)
}
