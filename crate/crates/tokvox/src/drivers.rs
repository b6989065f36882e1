//! Training loops, checkpoints and synthesis on top of the core models.

use std::path::Path;

use serde::Serialize;
use tokvox_core::codec::train::{Clip, CodecMetrics, CodecTrainer};
use tokvox_core::codec::{CodeGrid, CodecModel};
use tokvox_core::eval::{eval_reconstruction, EvalConfig, ReconMetrics};
use tokvox_core::lm::{generate, DualLm, Generation, LmExample, LmMetrics, LmTrainer, PlainStepper, SamplingConfig};
use tokvox_core::mapi::{train_head, AggregationHead, MapiStepper, StreamMaskPlan};

use crate::config::RunConfig;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::formats::Checkpoint;
use crate::journal::Journal;

const GEN: &str = "gen/";
const DISC: &str = "disc/";
const LM: &str = "lm/";
const HEAD: &str = "head/";
const CODEC_STEP: &str = "__optim/codec/step";
const CODEC_INIT: &str = "__optim/codec/initialized";

pub fn new_codec_trainer(cfg: &RunConfig) -> Result<CodecTrainer<f32>> {
    let model = CodecModel::new(cfg.codec.clone(), cfg.seed)?;
    Ok(CodecTrainer::new(model, cfg.disc.clone(), cfg.loss_weights, cfg.mel.clone(), cfg.codec_train, cfg.seed)?)
}

pub fn codec_checkpoint(tr: &CodecTrainer<f32>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.put_store(GEN, &tr.model.params);
    ck.put_store(DISC, &tr.disc.params);
    ck.put_optimizer("gen", &tr.gen_opt, &tr.model.params);
    ck.put_optimizer("disc", &tr.disc_opt, &tr.disc.params);
    ck.put_u64(CODEC_STEP, tr.step);
    ck.put_u64(CODEC_INIT, tr.codebooks_initialized as u64);
    ck
}

/// Rebuilds a trainer from `cfg` and overwrites its state from `path`.
pub fn load_codec_trainer(cfg: &RunConfig, path: &Path) -> Result<CodecTrainer<f32>> {
    let ck = Checkpoint::load(path)?;
    let mut tr = new_codec_trainer(cfg)?;
    ck.load_store(GEN, &mut tr.model.params)?;
    ck.load_store(DISC, &mut tr.disc.params)?;
    ck.load_optimizer("gen", &mut tr.gen_opt, &tr.model.params)?;
    ck.load_optimizer("disc", &mut tr.disc_opt, &tr.disc.params)?;
    tr.step = ck.u64(CODEC_STEP).unwrap_or(0);
    tr.codebooks_initialized = ck.u64(CODEC_INIT).unwrap_or(1) != 0;
    Ok(tr)
}

/// Generator weights only.
pub fn load_codec(cfg: &RunConfig, path: &Path) -> Result<CodecModel<f32>> {
    let ck = Checkpoint::load(path)?;
    let mut model = CodecModel::new(cfg.codec.clone(), cfg.seed)?;
    ck.load_store(GEN, &mut model.params)?;
    Ok(model)
}

/// Clips for `step`: `batch` consecutive clips, wrapping around the corpus.
pub fn batch_for<T: Clone>(items: &[T], batch: usize, step: u64) -> Vec<T> {
    let n = items.len();
    let b = batch.min(n);
    let start = (step as usize).wrapping_mul(b) % n;
    (0..b).map(|i| items[(start + i) % n].clone()).collect()
}

/// Runs `steps` codec updates, journalling every `log_every`-th step and the last.
pub fn train_codec(
    tr: &mut CodecTrainer<f32>,
    clips: &[Clip<f32>],
    steps: u64,
    batch: usize,
    log_every: u64,
    journal: &mut Journal,
) -> Result<Vec<CodecMetrics>> {
    if clips.is_empty() {
        return Err(Error::Config("no training clips".into()));
    }
    let mut out = Vec::with_capacity(steps as usize);
    for i in 0..steps {
        let m = tr.train_step(&batch_for(clips, batch, tr.step))?;
        if i % log_every == 0 || i + 1 == steps {
            journal.record("codec-step", &m)?;
        }
        out.push(m);
    }
    Ok(out)
}

/// Encodes every utterance with `codec` into LM examples.
pub fn lm_examples(codec: &CodecModel<f32>, utts: &[Utterance]) -> Result<Vec<LmExample>> {
    utts.iter()
        .map(|u| Ok(LmExample { text: u.text.clone(), codes: codec.encode_codes(&u.wave)?.0 }))
        .collect()
}

pub fn new_lm_trainer(cfg: &RunConfig) -> Result<LmTrainer<f32>> {
    Ok(LmTrainer::new(DualLm::new(cfg.lm.clone(), cfg.seed)?, cfg.lm_train))
}

pub fn new_head(cfg: &RunConfig) -> AggregationHead<f32> {
    AggregationHead::new(cfg.lm.semantic_dim, cfg.seed ^ 0xa66)
}

pub fn mask_plan(cfg: &RunConfig, streams: usize, mask_prob: f64, seed: u64) -> Result<StreamMaskPlan> {
    let mut plan = StreamMaskPlan::new(streams, mask_prob, seed)?;
    plan.site = cfg.mapi.site;
    Ok(plan)
}

pub fn lm_checkpoint(tr: &LmTrainer<f32>, head: &AggregationHead<f32>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.put_store(LM, &tr.model.params);
    ck.put_optimizer("lm", &tr.opt, &tr.model.params);
    ck.put_store(HEAD, &head.params);
    ck
}

pub fn load_lm_trainer(cfg: &RunConfig, path: &Path) -> Result<(LmTrainer<f32>, AggregationHead<f32>)> {
    let ck = Checkpoint::load(path)?;
    let mut tr = new_lm_trainer(cfg)?;
    ck.load_store(LM, &mut tr.model.params)?;
    ck.load_optimizer("lm", &mut tr.opt, &tr.model.params)?;
    let mut head = new_head(cfg);
    ck.load_store(HEAD, &mut head.params)?;
    Ok((tr, head))
}

pub fn train_lm(
    tr: &mut LmTrainer<f32>,
    data: &[LmExample],
    steps: u64,
    log_every: u64,
    journal: &mut Journal,
) -> Result<Vec<LmMetrics>> {
    let mut out = Vec::with_capacity(steps as usize);
    for i in 0..steps {
        let m = tr.train_step(data)?;
        if i % log_every == 0 || i + 1 == steps {
            journal.record("lm-step", &m)?;
        }
        out.push(m);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct HeadStep {
    step: usize,
    loss: f64,
}

pub fn fit_head(
    cfg: &RunConfig,
    lm: &DualLm<f32>,
    head: &mut AggregationHead<f32>,
    data: &[LmExample],
    journal: &mut Journal,
) -> Result<Vec<f64>> {
    let plan = mask_plan(cfg, cfg.mapi.streams, cfg.mapi.mask_prob, cfg.mapi.seed)?;
    let losses = train_head(lm, head, &plan, data, cfg.schedule.head_steps as usize, cfg.schedule.head_lr)?;
    for (step, &loss) in losses.iter().enumerate() {
        if step as u64 % cfg.schedule.log_every == 0 || step + 1 == losses.len() {
            journal.record("head-step", &HeadStep { step, loss })?;
        }
    }
    Ok(losses)
}

/// MAPI settings for one synthesis call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parallel {
    pub streams: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub wave: Vec<f32>,
    pub generation: Generation,
    /// Aggregation weights per decode step (empty without MAPI).
    pub weights: Vec<Vec<f64>>,
}

/// Generates codes for `text` after the prompt and decodes them to audio.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    cfg: &RunConfig,
    codec: &CodecModel<f32>,
    lm: &DualLm<f32>,
    head: &AggregationHead<f32>,
    prompt_text: &[usize],
    text: &[usize],
    prompt: Option<&CodeGrid>,
    sampling: &SamplingConfig,
    parallel: Option<Parallel>,
) -> Result<Synthesis> {
    let (generation, weights) = match parallel {
        None => (generate(lm, &mut PlainStepper::default(), prompt_text, text, prompt, sampling)?, Vec::new()),
        Some(par) => {
            let plan = mask_plan(cfg, par.streams, par.mask_prob, par.seed)?;
            let mut stepper = MapiStepper::new(plan, head)?;
            let g = generate(lm, &mut stepper, prompt_text, text, prompt, sampling)?;
            (g, stepper.weights)
        }
    };
    let wave = if generation.frames.is_empty() {
        Vec::new()
    } else {
        codec.decode_codes(&generation.to_grid(codec.cfg.codebook_size)?)?
    };
    Ok(Synthesis { wave, generation, weights })
}

pub fn evaluate_codec(codec: &CodecModel<f32>, utts: &[Utterance], cfg: &EvalConfig) -> Result<ReconMetrics> {
    let waves: Vec<Vec<f32>> = utts.iter().map(|u| u.wave.clone()).collect();
    Ok(eval_reconstruction(codec, &waves, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_wrap_around() {
        let v = [0, 1, 2, 3, 4];
        assert_eq!(batch_for(&v, 2, 0), [0, 1]);
        assert_eq!(batch_for(&v, 2, 2), [4, 0]);
        assert_eq!(batch_for(&v, 9, 3), [0, 1, 2, 3, 4]);
    }
}
