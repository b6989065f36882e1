//! Dense arrays, a reverse-mode tape over them, and the gradient checker.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use spectral::{mel_spectrogram, MelSpectrogram, StftPadding, StftPlan};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::Real;

/// Snake activation `x + sin²(αx)/α` with a single scalar α.
pub fn snake<T: Real>(x: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    if alpha.is_nan() || alpha <= T::zero() {
        return Err(Error::Parameter(alloc::format!("snake alpha must be positive, got {alpha}")));
    }
    Ok(x.map(|v| {
        let s = (alpha * v).sin();
        v + s * s / alpha
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::f64::consts::FRAC_PI_2;

    #[test]
    fn snake_values() {
        let x = Tensor::<f64>::new(vec![2], vec![0.0, FRAC_PI_2]).unwrap();
        let y = snake(&x, 1.0).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - (FRAC_PI_2 + 1.0)).abs() < 1e-15);
        assert!(matches!(snake(&x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(snake(&x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn snake_gradient_at_zero_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::new(vec![1, 1], vec![0.0]).unwrap());
        let a = t.constant(Tensor::vector(vec![1.0]));
        let y = t.snake(x, a);
        let s = t.sum(y);
        let g = t.backward(s).wrt(x).unwrap();
        assert_eq!(g.data()[0], 1.0);
        let h = 1e-6;
        let fd: f64 = (snake(&Tensor::scalar(h), 1.0).unwrap().item() - snake(&Tensor::scalar(-h), 1.0).unwrap().item()) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tape_snake_latches_parameter_fault() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::zeros(vec![1, 4]));
        let a = t.constant(Tensor::vector(vec![-1.0]));
        t.snake(x, a);
        assert!(matches!(t.check(), Err(Error::Parameter(_))));
    }
}
