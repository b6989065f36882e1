//! Semantic (next-embedding) and acoustic (coarse-to-fine) transformers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::LmConfig;
use super::transformer::{block_causal_mask, causal_mask, KvCache, Masks, Positions, Transformer};
use crate::codec::CodeGrid;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::params::init;
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Var};
use crate::{Real, Tensor};

/// One teacher-forced training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub text: Vec<usize>,
    pub codes: CodeGrid,
}

/// Per-frame sum of the selected rows of each codebook's table.
pub fn sum_code_embeddings<T: Real>(codes: &CodeGrid, tables: &[Tensor<T>]) -> Result<Tensor<T>> {
    let levels: Vec<Vec<usize>> = (0..codes.levels()).map(|k| codes.row(k)).collect();
    sum_level_rows(&levels, tables)
}

/// Same as [`sum_code_embeddings`] on raw per-level index rows, which may hold
/// the end-of-speech code when table 0 has a row for it.
pub fn sum_level_rows<T: Real>(levels: &[Vec<usize>], tables: &[Tensor<T>]) -> Result<Tensor<T>> {
    if levels.len() != tables.len() || tables.is_empty() {
        return Err(Error::Shape(format!("{} code levels for {} tables", levels.len(), tables.len())));
    }
    check_levels(levels, tables.iter().map(Tensor::rows))?;
    let d = tables[0].last_dim();
    let len = levels[0].len();
    let mut out = vec![T::zero(); len * d];
    for (row, table) in levels.iter().zip(tables) {
        if table.last_dim() != d {
            return Err(Error::Shape("embedding tables differ in width".into()));
        }
        for (t, &c) in row.iter().enumerate() {
            for (o, &v) in out[t * d..(t + 1) * d].iter_mut().zip(table.row(c)) {
                *o += v;
            }
        }
    }
    Tensor::new(vec![len, d], out)
}

fn check_levels(levels: &[Vec<usize>], sizes: impl Iterator<Item = usize>) -> Result<()> {
    for (k, (row, size)) in levels.iter().zip(sizes).enumerate() {
        if let Some((t, &c)) = row.iter().enumerate().find(|(_, &c)| c >= size) {
            return Err(Error::CorruptCode { row: k, col: t, index: c, size });
        }
    }
    Ok(())
}

/// Mean squared error over speech positions and dimensions; the target is
/// detached. Zero rows give a constant 0.
pub fn ctx_loss<T: Real>(t: &mut Tape<T>, pred: Var, target: Var) -> Var {
    if t.shape(pred)[0] == 0 {
        return t.constant(Tensor::scalar(T::zero()));
    }
    let target = t.detach(target);
    t.mse(pred, target)
}

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Real>(t: &mut Tape<T>, logits: Var, targets: &[usize]) -> Var {
    let lp = t.log_softmax(logits);
    let picked = t.pick_cols(lp, targets);
    let m = t.mean(picked);
    t.scale(m, -T::one())
}

/// Tape handles of one teacher-forced loss evaluation.
#[derive(Debug, Clone)]
pub struct LmLoss {
    pub total: Var,
    pub ctx: Var,
    pub acoustic: Var,
    /// Semantic predictions `[F, d]` for the `F = L + 1` frames (EOS frame last).
    pub pred: Var,
    pub target: Var,
    /// Per-level logits `[F, n_k]`.
    pub logits: Vec<Var>,
    /// Per-level targets, EOS frame included.
    pub targets: Vec<Vec<usize>>,
}

/// `-log` of the factorised joint likelihood recomputed from plain values:
/// mean squared error per frame plus `-ln Π_k p_k(target)`, averaged over frames.
pub fn factorized_nll<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, logits: &[Tensor<T>], targets: &[Vec<usize>]) -> f64 {
    let f = pred.rows();
    let d = pred.last_dim();
    let mut total = 0.0;
    for j in 0..f {
        let sq: f64 = pred.row(j).iter().zip(target.row(j)).map(|(a, b)| Float::powi(a.as_f64() - b.as_f64(), 2)).sum();
        let mut joint = 1.0f64;
        for (lg, tg) in logits.iter().zip(targets) {
            let row: Vec<f64> = lg.row(j).iter().map(|v| v.as_f64()).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| Float::exp(v - m)).sum();
            joint *= Float::exp(row[tg[j]] - m) / z;
        }
        total += sq / d as f64 - Float::ln(joint);
    }
    total / f as f64
}

#[derive(Debug, Clone)]
pub struct DualLm<T> {
    pub cfg: LmConfig,
    pub params: ParamStore<T>,
    text_emb: ParamId,
    sep: ParamId,
    code_emb: Vec<ParamId>,
    semantic: Transformer,
    ctx_out: Linear,
    cond: Linear,
    ac_emb: Vec<ParamId>,
    acoustic: Transformer,
    heads: Vec<Linear>,
}

impl<T: Real> DualLm<T> {
    pub fn new(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (ds, da, k) = (cfg.semantic_dim, cfg.acoustic_dim, cfg.n_codebooks);
        let text_emb = s.add("text.emb", init::normal(&mut rng, &[cfg.text_vocab, ds], 1.0));
        let sep = s.add("text.sep", init::normal(&mut rng, &[1, ds], 1.0));
        let code_std = 1.0 / Float::sqrt(k as f64);
        let code_emb = (0..k)
            .map(|l| s.add(format!("code.emb{l}"), init::normal(&mut rng, &[cfg.level_size(l), ds], code_std)))
            .collect();
        let semantic = Transformer::new(
            &mut s, &mut rng, "sem", cfg.semantic_layers, ds, cfg.semantic_heads, cfg.mlp_ratio, cfg.rope_base,
        );
        let ctx_out = Linear::new(&mut s, &mut rng, "sem.out", ds, ds, true);
        let cond = Linear::new(&mut s, &mut rng, "ac.cond", ds, da, true);
        let ac_emb = (0..k - 1)
            .map(|l| s.add(format!("ac.emb{l}"), init::normal(&mut rng, &[cfg.level_size(l), da], 1.0)))
            .collect();
        let acoustic = Transformer::new(
            &mut s, &mut rng, "ac", cfg.acoustic_layers, da, cfg.acoustic_heads, cfg.mlp_ratio, cfg.rope_base,
        );
        let heads = (0..k)
            .map(|l| Linear::new(&mut s, &mut rng, &format!("ac.head{l}"), da, cfg.level_size(l), true))
            .collect();
        Ok(Self { cfg, params: s, text_emb, sep, code_emb, semantic, ctx_out, cond, ac_emb, acoustic, heads })
    }

    pub fn semantic_layers(&self) -> usize {
        self.semantic.layers()
    }

    /// Semantic code-embedding tables (table 0 includes the EOS row).
    pub fn code_tables(&self) -> Vec<Tensor<T>> {
        self.code_emb.iter().map(|&id| self.params.get(id).clone()).collect()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.cfg.max_seq_len {
            return Err(Error::Sequence { len: n, max: self.cfg.max_seq_len });
        }
        Ok(())
    }

    pub fn check_text(&self, text: &[usize]) -> Result<()> {
        match text.iter().find(|&&c| c >= self.cfg.text_vocab) {
            Some(c) => Err(Error::Config(format!("text token {c} outside vocabulary of {}", self.cfg.text_vocab))),
            None => Ok(()),
        }
    }

    /// Levels of `codes` with an EOS frame appended (EOS in level 0, code 0 elsewhere).
    pub fn with_eos(&self, codes: &CodeGrid) -> Vec<Vec<usize>> {
        (0..codes.levels())
            .map(|k| {
                let mut r = codes.row(k);
                r.push(if k == 0 { self.cfg.eos() } else { 0 });
                r
            })
            .collect()
    }

    fn check_grid(&self, codes: &CodeGrid) -> Result<()> {
        if codes.levels() != self.cfg.n_codebooks || codes.codebook_size() != self.cfg.codebook_size {
            return Err(Error::Config(format!(
                "code grid has {} levels of size {}, model expects {} of size {}",
                codes.levels(),
                codes.codebook_size(),
                self.cfg.n_codebooks,
                self.cfg.codebook_size
            )));
        }
        Ok(())
    }

    /// Summed code embeddings `[L, d]` on the tape.
    pub fn embed_frames(&self, t: &mut Tape<T>, p: &Bound, levels: &[Vec<usize>]) -> Result<Var> {
        if levels.len() != self.cfg.n_codebooks {
            return Err(Error::Shape(format!("{} code levels, expected {}", levels.len(), self.cfg.n_codebooks)));
        }
        check_levels(levels, (0..levels.len()).map(|k| self.cfg.level_size(k)))?;
        let mut acc: Option<Var> = None;
        for (row, &id) in levels.iter().zip(&self.code_emb) {
            let e = t.gather_rows(p.var(id), row);
            acc = Some(match acc {
                None => e,
                Some(a) => t.add(a, e),
            });
        }
        Ok(acc.expect("at least one level"))
    }

    /// `[text ; SEP]` embeddings.
    pub fn embed_text(&self, t: &mut Tape<T>, p: &Bound, text: &[usize]) -> Result<Var> {
        self.check_text(text)?;
        let sep = p.var(self.sep);
        if text.is_empty() {
            return Ok(sep);
        }
        let e = t.gather_rows(p.var(self.text_emb), text);
        Ok(t.concat_rows(&[e, sep]))
    }

    /// Semantic transformer plus output projection on input rows `x`.
    pub fn semantic_hidden(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        x: Var,
        pos: Positions,
        cache: Option<&mut KvCache<T>>,
        masks: Masks<'_, T>,
    ) -> Var {
        let h = self.semantic.forward(t, p, x, pos, cache, masks);
        self.ctx_out.forward(t, p, h)
    }

    /// Full causal pass over `x`, one output per row.
    pub fn semantic_full(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = t.shape(x)[0];
        self.check_len(n)?;
        let mask = causal_mask(n, 0);
        Ok(self.semantic_hidden(t, p, x, Positions::From(0), None, Masks::Shared(&mask)))
    }

    /// Predictions at the speech positions of `text ⊕ SEP ⊕ s_prefix`; row `t`
    /// predicts frame `t + 1`.
    pub fn semantic_forward(&self, t: &mut Tape<T>, p: &Bound, text: &[usize], s_prefix: Var) -> Result<Var> {
        let head = self.embed_text(t, p, text)?;
        let m = t.shape(head)[0];
        let l = t.shape(s_prefix)[0];
        let x = t.concat_rows(&[head, s_prefix]);
        let out = self.semantic_full(t, p, x)?;
        Ok(t.slice_rows(out, m, l))
    }

    /// Within-frame input rows `[F·K, d_a]`: per frame the conditioning vector
    /// followed by embeddings of levels `0..K-1`.
    pub fn acoustic_input(&self, t: &mut Tape<T>, p: &Bound, h: Var, levels: &[Vec<usize>]) -> Var {
        let f = t.shape(h)[0];
        let c = self.cond.forward(t, p, h);
        let mut cols = vec![c];
        for (row, &id) in levels.iter().zip(&self.ac_emb) {
            cols.push(t.gather_rows(p.var(id), row));
        }
        let k = cols.len();
        let wide = if k == 1 { c } else { t.concat_cols(&cols) };
        t.reshape(wide, &[f * k, self.cfg.acoustic_dim])
    }

    /// Teacher-forced per-level logits `[F, n_k]` from within-frame rows `[F·K, d_a]`.
    pub fn acoustic_logits(&self, t: &mut Tape<T>, p: &Bound, seq: Var) -> Vec<Var> {
        let k = self.cfg.n_codebooks;
        let da = self.cfg.acoustic_dim;
        let f = t.shape(seq)[0] / k;
        let mask = block_causal_mask(f, k);
        let out = self.acoustic.forward(t, p, seq, Positions::Periodic(k), None, Masks::Shared(&mask));
        let wide = t.reshape(out, &[f, k * da]);
        (0..k)
            .map(|l| {
                let o = t.slice_cols(wide, l * da, da);
                self.heads[l].forward(t, p, o)
            })
            .collect()
    }

    /// Level-`prefix.len()` logits `[1, n_k]` for one frame conditioned on `h[1, d]`.
    pub fn acoustic_forward(&self, t: &mut Tape<T>, p: &Bound, h: Var, prefix: &[usize]) -> Result<Var> {
        let k = prefix.len();
        if k >= self.cfg.n_codebooks {
            return Err(Error::Config(format!(
                "acoustic prefix of {k} codes, at most {} allowed",
                self.cfg.n_codebooks - 1
            )));
        }
        let mut cache = KvCache::new(self.acoustic.layers());
        let mut last = self.acoustic_step(t, p, &mut cache, AcousticRow::Cond(h))?;
        for (l, &c) in prefix.iter().enumerate() {
            last = self.acoustic_step(t, p, &mut cache, AcousticRow::Code(l, c))?;
        }
        Ok(self.acoustic_head(t, p, last, k))
    }

    /// Feeds one within-frame row to the cached acoustic transformer.
    pub fn acoustic_step(&self, t: &mut Tape<T>, p: &Bound, cache: &mut KvCache<T>, input: AcousticRow) -> Result<Var> {
        let x = match input {
            AcousticRow::Cond(h) => self.cond.forward(t, p, h),
            AcousticRow::Code(l, c) => {
                let size = self.cfg.level_size(l);
                if c >= size {
                    return Err(Error::CorruptCode { row: l, col: 0, index: c, size });
                }
                t.gather_rows(p.var(self.ac_emb[l]), &[c])
            }
        };
        let past = cache.len;
        let mask = causal_mask(1, past);
        Ok(self.acoustic.forward(t, p, x, Positions::From(past), Some(cache), Masks::Shared(&mask)))
    }

    pub fn acoustic_head(&self, t: &mut Tape<T>, p: &Bound, out: Var, level: usize) -> Var {
        self.heads[level].forward(t, p, out)
    }

    /// Teacher-forced loss on one utterance.
    pub fn loss(&self, t: &mut Tape<T>, p: &Bound, ex: &LmExample) -> Result<LmLoss> {
        self.check_grid(&ex.codes)?;
        let levels = self.with_eos(&ex.codes);
        let f = levels[0].len();
        let target = self.embed_frames(t, p, &levels)?;
        let head = self.embed_text(t, p, &ex.text)?;
        let m = t.shape(head)[0] - 1;
        // the EOS frame is a target only, never an input
        let inputs = t.slice_rows(target, 0, f - 1);
        let x = t.concat_rows(&[head, inputs]);
        let out = self.semantic_full(t, p, x)?;
        let pred = t.slice_rows(out, m, f);
        let ctx = ctx_loss(t, pred, target);

        let seq = self.acoustic_input(t, p, pred, &levels[..levels.len() - 1]);
        let logits = self.acoustic_logits(t, p, seq);
        let ces: Vec<Var> = logits.iter().zip(&levels).map(|(&lg, tg)| cross_entropy(t, lg, tg)).collect();
        let acoustic = crate::codec::quant::sum_vars(t, &ces);
        let total = t.add(ctx, acoustic);
        Ok(LmLoss { total, ctx, acoustic, pred, target, logits, targets: levels })
    }

    /// Teacher-forced arg-max accuracy per level, EOS frame included.
    pub fn accuracy(&self, ex: &LmExample) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let l = self.loss(&mut t, &p, ex)?;
        Ok(l.logits
            .iter()
            .zip(&l.targets)
            .map(|(&lg, tg)| {
                let v = t.value(lg);
                let hits = tg.iter().enumerate().filter(|&(j, &c)| argmax(v.row(j)) == c).count();
                hits as f64 / tg.len() as f64
            })
            .collect())
    }
}

/// Input to one acoustic-transformer step.
#[derive(Debug, Clone, Copy)]
pub enum AcousticRow {
    /// Semantic conditioning `[1, d]`.
    Cond(Var),
    /// Code `c` of level `l`.
    Code(usize, usize),
}

/// Index of the first maximum.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
