//! Central finite-difference verification of reverse-pass gradients.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probe settings.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference half step.
    pub step: f64,
    /// Probe at most this many coordinates per input (sampled without replacement).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-6, max_coords: None, seed: 0 }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink of
    /// ReLU/hinge/abs type lies inside the probe interval).
    pub kinks_skipped: usize,
}

/// Relative error of one coordinate.
///
/// The denominator is floored at 1e-3 of the largest numeric gradient over
/// all inputs so that coordinates whose true gradient is ~0 are judged
/// against the scale of the function instead of against roundoff.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Checks `f` (which must return a scalar node) at `inputs` with step `step`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let cfg = GradCheckConfig { step, ..Default::default() };
    grad_check_with(f, inputs, &cfg).map(|r| r.max_rel_error)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Evaluation(format!("function returned {} values, expected 1", v.numel())));
    }
    tape.check().map_err(|e| Error::Evaluation(format!("{e}")))?;
    Ok(v.item())
}

/// Relative disagreement of the one-sided slopes above which a coordinate
/// counts as a kink.
const KINK_TOL: f64 = 1e-2;

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.check().map_err(|e| Error::Evaluation(format!("{e}")))?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Evaluation("function must return a scalar".into()));
    }
    let f0 = tape.value(out).item();
    let grads = tape.backward(out);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt_or_zero(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = inputs.to_vec();
    // (input, coordinate, central, forward, backward)
    let mut probes = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + cfg.step;
            let fp = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - cfg.step;
            let fm = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            probes.push((k, i, (fp - fm) / (2.0 * cfg.step), (fp - f0) / cfg.step, (f0 - fm) / cfg.step));
        }
    }
    let scale = probes.iter().fold(0.0f64, |m, p| m.max(p.2.abs()));
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0, kinks_skipped: 0 };
    for (k, i, num, fwd, bwd) in probes {
        let slope = fwd.abs().max(bwd.abs()).max(1e-3 * scale);
        if (fwd - bwd).abs() > KINK_TOL * slope && slope > 0.0 {
            report.kinks_skipped += 1;
            continue;
        }
        let ana = analytic[k].data()[i];
        let e = relative_error(ana, num, scale);
        report.coords_checked += 1;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((k, i, ana, num));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn square_at_three() {
        let e = grad_check(
            |t, v| {
                let s = t.square(v[0]);
                t.sum(s)
            },
            &[Tensor::scalar(3.0)],
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-8, "{e}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // straight-through pretends d/dx = 1 while the value is x², so the
        // check must flag it
        let e = grad_check(
            |t, v| {
                let sq = t.value(v[0]).map(|x| x * x);
                let s = t.straight_through(v[0], sq);
                t.sum(s)
            },
            &[Tensor::scalar(3.0)],
            1e-6,
        )
        .unwrap();
        assert!(e > 0.5);
    }

    #[test]
    fn kinks_are_skipped_not_hidden() {
        let r = grad_check_with(
            |t, v| {
                let a = t.abs(v[0]);
                t.sum(a)
            },
            &[Tensor::new(vec![2], vec![0.0, 2.0]).unwrap()],
            &GradCheckConfig { step: 1e-6, ..Default::default() },
        )
        .unwrap();
        assert_eq!(r.kinks_skipped, 1);
        assert_eq!(r.coords_checked, 1);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_probe_is_an_evaluation_error() {
        let r = grad_check(
            |t, v| {
                let l = t.ln(v[0]);
                t.sum(l)
            },
            &[Tensor::new(vec![1], vec![0.0]).unwrap()],
            1e-6,
        );
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
