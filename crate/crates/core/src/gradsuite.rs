//! Finite-difference checks of every differentiable block, in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::config::{AcousticInput, CodecConfig, DiscConfig, MelLossConfig};
use crate::codec::disc::DiscriminatorSet;
use crate::codec::distill::{distill_loss, ProjectionHead, TeacherEmbeddings};
use crate::codec::losses::{self, MultiScaleMel};
use crate::codec::quant::{quantize_on_tape, QuantizerStack};
use crate::codec::{CodeGrid, CodecModel};
use crate::error::{Error, Result};
use crate::layers::{snake_alpha, Conv, ConvT, LayerNorm};
use crate::lm::{ctx_loss, cross_entropy, DualLm, LmConfig, LmExample};
use crate::mapi::AggregationHead;
use crate::numerics::params::init;
use crate::numerics::{grad_check_with, Bound, GradCheckConfig, ParamStore, Tape, Var};
use crate::Tensor;

/// Tolerance for scalar losses.
pub const LOSS_TOL: f64 = 1e-5;
/// Tolerance for vector-valued blocks probed through a random projection.
pub const BLOCK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub kinks: usize,
}

impl SuiteResult {
    /// Below tolerance with at most a quarter of the probes lost to kinks.
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.kinks * 3 <= self.coords
    }
}

pub const SUITES: [&str; 17] = [
    "snake",
    "conv-stack",
    "transformer-block",
    "codec",
    "quantizer",
    "time-loss",
    "mel-loss",
    "adv-loss",
    "feat-loss",
    "disc-loss",
    "commit-loss",
    "distill-loss",
    "ctx-loss",
    "cross-entropy",
    "lm-total",
    "aggregation-head",
    "aggregation-loss",
];

fn rnd(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    init::normal(rng, shape, 1.0)
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn project(t: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rnd(&mut rng, t.shape(out));
    let r = t.constant(r);
    let m = t.mul(out, r);
    t.sum(m)
}

fn with_store(mut head: Vec<Tensor<f64>>, s: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    head.extend(s.iter().map(|(_, v)| v.clone()));
    head
}

fn tiny_codec() -> CodecConfig {
    CodecConfig {
        encoder_strides: vec![2, 2],
        decoder_strides: vec![2, 2],
        latent_dim: 8,
        encoder_channels: 8,
        decoder_channels: 8,
        n_codebooks: 3,
        codebook_size: 4,
        teacher_dim: 4,
        ..CodecConfig::tiny()
    }
}

fn tiny_lm() -> LmConfig {
    LmConfig {
        text_vocab: 8,
        n_codebooks: 3,
        codebook_size: 5,
        semantic_layers: 1,
        semantic_dim: 8,
        semantic_heads: 2,
        acoustic_layers: 1,
        acoustic_dim: 8,
        acoustic_heads: 2,
        mlp_ratio: 2,
        max_seq_len: 32,
        rope_base: 10000.0,
    }
}

/// Runs one suite by name.
pub fn run_suite(name: &str, cfg: &GradCheckConfig) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (tol, report) = match name {
        "snake" => {
            let x = rnd(&mut rng, &[2, 3, 5]);
            let a = Tensor::from_f64(vec![3], &[0.5, 1.0, 1.7])?;
            (BLOCK_TOL, grad_check_with(|t, v| {
                let y = t.snake(v[0], v[1]);
                project(t, y, 1)
            }, &[x, a], cfg)?)
        }
        "conv-stack" => {
            let mut s = ParamStore::new();
            let c1 = Conv::new(&mut s, &mut rng, "c1", 2, 4, 4, 2, 1, 1, 1);
            let a = snake_alpha(&mut s, "a", 4);
            let c2 = Conv::same(&mut s, &mut rng, "c2", 4, 4, 3, 3);
            let up = ConvT::upsample(&mut s, &mut rng, "up", 4, 2, 2);
            let x = rnd(&mut rng, &[1, 2, 12]);
            (BLOCK_TOL, grad_check_with(|t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let h = c1.forward(t, &p, v[0]);
                let h = t.snake(h, p.var(a));
                let h = c2.forward(t, &p, h);
                let y = up.forward(t, &p, h);
                project(t, y, 2)
            }, &with_store(vec![x], &s), cfg)?)
        }
        "transformer-block" => {
            let mut s = ParamStore::new();
            let tr = crate::lm::transformer::Transformer::new(&mut s, &mut rng, "t", 1, 8, 2, 2, 10000.0);
            let ln = LayerNorm::new(&mut s, "ln", 8);
            let x = rnd(&mut rng, &[4, 8]);
            (BLOCK_TOL, grad_check_with(|t, v| {
                use crate::lm::transformer::{causal_mask, Masks, Positions};
                let p = Bound::from_vars(v[1..].to_vec());
                let m = causal_mask(4, 0);
                let y = tr.forward(t, &p, v[0], Positions::From(1), None, Masks::Shared(&m));
                let y = ln.forward(t, &p, y);
                let y = t.gelu(y);
                project(t, y, 3)
            }, &with_store(vec![x], &s), cfg)?)
        }
        "codec" => {
            let model = CodecModel::<f64>::new(tiny_codec(), 4)?;
            let x = Tensor::from_parts(vec![1, 1, 16], (0..16).map(|_| rng.random_range(-0.8..0.8)).collect());
            (BLOCK_TOL, grad_check_with(|t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let z = model.encoder.forward(t, &p, v[0]);
                let y = model.decoder.forward(t, &p, z);
                project(t, y, 4)
            }, &with_store(vec![x], &model.params), cfg)?)
        }
        "quantizer" => {
            // codebook loss in the tables; latents enter through a stop-gradient
            let stack = stack(&mut rng, AcousticInput::Parallel);
            let z = rnd(&mut rng, &[5, 4]);
            let tables: Vec<Tensor<f64>> = stack.tables().cloned().collect();
            (LOSS_TOL, grad_check_with(|t, v| {
                let zc = t.constant(z.clone());
                quantize_on_tape(t, &stack, v, zc).expect("quantize").codebook
            }, &tables, cfg)?)
        }
        "time-loss" => {
            let (x, y) = (rnd(&mut rng, &[64]), rnd(&mut rng, &[64]));
            (LOSS_TOL, grad_check_with(|t, v| losses::time_loss(t, v[0], v[1]).expect("time"), &[x, y], cfg)?)
        }
        "mel-loss" => {
            let mcfg = MelLossConfig::tiny();
            let mel = MultiScaleMel::new(&mcfg, 256, 16000.0)?;
            let (x, y) = (rnd(&mut rng, &[256]), rnd(&mut rng, &[256]));
            (LOSS_TOL, grad_check_with(|t, v| mel.loss(t, v[0], v[1]).expect("mel"), &[x, y], cfg)?)
        }
        "adv-loss" | "disc-loss" => {
            let disc = DiscriminatorSet::<f64>::new(DiscConfig { channels: 4, ..DiscConfig::tiny() }, 5)?;
            let x = rnd(&mut rng, &[256]).map(|v| 0.3 * v);
            let y = rnd(&mut rng, &[256]).map(|v| 0.3 * v);
            let adv = name == "adv-loss";
            (LOSS_TOL, grad_check_with(|t, v| {
                let p = Bound::from_vars(v[2..].to_vec());
                let f = disc.forward(t, &p, v[1]).expect("disc");
                if adv {
                    return losses::gen_adv_loss(t, &f);
                }
                let r = disc.forward(t, &p, v[0]).expect("disc");
                losses::disc_loss(t, &r, &f)
            }, &with_store(vec![x, y], &disc.params), cfg)?)
        }
        "feat-loss" => {
            // real features are constants, so only the generated signal is probed
            let disc = DiscriminatorSet::<f64>::new(DiscConfig { channels: 4, ..DiscConfig::tiny() }, 5)?;
            let x = rnd(&mut rng, &[256]).map(|v| 0.3 * v);
            let y = rnd(&mut rng, &[256]).map(|v| 0.3 * v);
            (LOSS_TOL, grad_check_with(|t, v| {
                let p = disc.params.bind(t, false);
                let xc = t.constant(x.clone());
                let r = disc.forward(t, &p, xc).expect("disc");
                let f = disc.forward(t, &p, v[0]).expect("disc");
                losses::feat_match_loss(t, &r, &f)
            }, &[y], cfg)?)
        }
        "commit-loss" => {
            let stack = stack(&mut rng, AcousticInput::SemanticResidual);
            let z = rnd(&mut rng, &[6, 4]);
            let tables: Vec<Tensor<f64>> = stack.tables().cloned().collect();
            (LOSS_TOL, grad_check_with(|t, v| {
                let tb: Vec<Var> = tables.iter().map(|x| t.constant(x.clone())).collect();
                quantize_on_tape(t, &stack, &tb, v[0]).expect("quantize").commitment
            }, &[z], cfg)?)
        }
        "distill-loss" => {
            let mut s = ParamStore::new();
            let head = ProjectionHead::new(&mut s, &mut rng, 3, 4);
            let emb = TeacherEmbeddings::new(rnd(&mut rng, &[10, 3]), 50.0)?;
            let c0 = rnd(&mut rng, &[5, 4]);
            (LOSS_TOL, grad_check_with(|t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                distill_loss(t, &p, &head, v[0], &emb).expect("distill")
            }, &with_store(vec![c0], &s), cfg)?)
        }
        "ctx-loss" => {
            let target = rnd(&mut rng, &[4, 6]);
            let pred = rnd(&mut rng, &[4, 6]);
            (LOSS_TOL, grad_check_with(|t, v| {
                let tg = t.constant(target.clone());
                ctx_loss(t, v[0], tg)
            }, &[pred], cfg)?)
        }
        "cross-entropy" => {
            let logits = rnd(&mut rng, &[5, 7]);
            (LOSS_TOL, grad_check_with(|t, v| cross_entropy(t, v[0], &[0, 6, 3, 3, 1]), &[logits], cfg)?)
        }
        "lm-total" => {
            // code tables also build the detached target, so they stay fixed
            let lm = DualLm::<f64>::new(tiny_lm(), 6)?;
            let codes = CodeGrid::new(3, 3, 5, (0..9).map(|_| rng.random_range(0..5)).collect())?;
            let ex = LmExample { text: vec![1, 4], codes };
            let fixed: Vec<bool> = lm.params.iter().map(|(n, _)| n.starts_with("code.emb")).collect();
            let inputs: Vec<Tensor<f64>> =
                lm.params.iter().zip(&fixed).filter(|(_, &f)| !f).map(|((_, v), _)| v.clone()).collect();
            (LOSS_TOL, grad_check_with(|t, v| {
                let mut free = v.iter();
                let vars = lm
                    .params
                    .iter()
                    .zip(&fixed)
                    .map(|((_, val), &f)| if f { t.constant(val.clone()) } else { *free.next().expect("leaf") })
                    .collect();
                let p = Bound::from_vars(vars);
                lm.loss(t, &p, &ex).expect("lm loss").total
            }, &inputs, cfg)?)
        }
        "aggregation-head" | "aggregation-loss" => {
            let mut head = AggregationHead::<f64>::new(4, 7);
            let u = head.params.find("agg.u").expect("u");
            *head.params.get_mut(u) = rnd(&mut rng, &[4, 1]);
            let outs: Vec<Tensor<f64>> = (0..3).map(|_| rnd(&mut rng, &[2, 4])).collect();
            let target = rnd(&mut rng, &[2, 4]);
            let loss = name == "aggregation-loss";
            let mut inputs = outs;
            inputs.extend(head.params.iter().map(|(_, v)| v.clone()));
            (LOSS_TOL, grad_check_with(|t, v| {
                let p = Bound::from_vars(v[3..].to_vec());
                let (y, _) = head.aggregate_on_tape(t, &p, &v[..3]);
                if loss {
                    let tg = t.constant(target.clone());
                    ctx_loss(t, y, tg)
                } else {
                    project(t, y, 8)
                }
            }, &inputs, cfg)?)
        }
        _ => return Err(Error::Config(format!("unknown gradient suite {name:?}"))),
    };
    Ok(SuiteResult { name: name.into(), max_rel_error: report.max_rel_error, tolerance: tol, coords: report.coords_checked, kinks: report.kinks_skipped })
}

fn stack(rng: &mut ChaCha8Rng, input: AcousticInput) -> QuantizerStack<f64> {
    QuantizerStack {
        semantic: rnd(rng, &[4, 4]),
        acoustic: vec![rnd(rng, &[4, 4]), rnd(rng, &[4, 4])],
        input,
    }
}

/// Probe settings used by the suites: a 1e-5 central step balances
/// truncation against roundoff on these sizes.
pub fn default_config() -> GradCheckConfig {
    GradCheckConfig { step: 1e-5, max_coords: Some(6), seed: 0 }
}

/// Every suite in [`SUITES`] order.
pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        let cfg = default_config();
        for r in run_all(&cfg).unwrap() {
            std::println!("{:<18} {:.2e} ({} coords, {} kinks)", r.name, r.max_rel_error, r.coords, r.kinks);
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope", &GradCheckConfig::default()).is_err());
    }
}
