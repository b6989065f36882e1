//! Algorithmic core of a split-quantizer speech codec and a two-stage token
//! language model.
//!
//! * [`numerics`]: tensors, reverse-mode tape, gradient checker, AdamW.
//! * [`codec`]: convolutional encoder/decoder, split VQ ‖ RVQ bottleneck,
//!   semantic distillation, discriminators and the codec training step.
//! * [`lm`]: semantic (next-embedding) and acoustic (coarse-to-fine) transformers.
//! * [`mapi`]: masked parallel-stream inference with learned aggregation.
//!
//! The crate is `no_std` and needs only `alloc`; file formats, I/O and the
//! command line live in the companion `tokvox` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod layers;
pub mod lm;
pub mod mapi;
pub mod numerics;
mod real;
pub mod synth;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use real::{DType, Real};
