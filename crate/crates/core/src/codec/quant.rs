//! Split VQ ‖ RVQ bottleneck.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::config::AcousticInput;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::{Real, Tensor};

/// `K × L` matrix of codebook indices; row 0 is semantic, rows `1..K` acoustic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    k: usize,
    len: usize,
    codebook_size: usize,
    codes: Vec<u32>,
}

impl CodeGrid {
    pub fn new(k: usize, len: usize, codebook_size: usize, codes: Vec<u32>) -> Result<Self> {
        if k == 0 || len == 0 {
            return Err(Error::Shape(alloc::format!("code grid {k}x{len} is empty")));
        }
        if codes.len() != k * len {
            return Err(Error::Shape(alloc::format!("{} codes for a {k}x{len} grid", codes.len())));
        }
        let g = Self { k, len, codebook_size, codes };
        g.validate()?;
        Ok(g)
    }

    /// Builds from per-level rows.
    pub fn from_rows(rows: &[Vec<usize>], codebook_size: usize) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Shape("ragged code rows".into()));
        }
        let codes = rows.iter().flatten().map(|&c| c as u32).collect();
        Self::new(rows.len(), len, codebook_size, codes)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.codes.iter().enumerate() {
            if c as usize >= self.codebook_size {
                return Err(Error::CorruptCode {
                    row: i / self.len,
                    col: i % self.len,
                    index: c as usize,
                    size: self.codebook_size,
                });
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn get(&self, level: usize, t: usize) -> usize {
        self.codes[level * self.len + t] as usize
    }

    pub fn row(&self, level: usize) -> Vec<usize> {
        self.codes[level * self.len..(level + 1) * self.len].iter().map(|&c| c as usize).collect()
    }

    /// The `K` codes of frame `t`.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.k).map(|l| self.get(l, t)).collect()
    }

    pub fn raw(&self) -> &[u32] {
        &self.codes
    }

    /// First `len` frames.
    pub fn truncate(&self, len: usize) -> Result<Self> {
        let rows: Vec<Vec<usize>> = (0..self.k).map(|l| self.row(l)[..len.min(self.len)].to_vec()).collect();
        Self::from_rows(&rows, self.codebook_size)
    }
}

/// Codebook tables of one bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerStack<T> {
    pub semantic: Tensor<T>,
    pub acoustic: Vec<Tensor<T>>,
    pub input: AcousticInput,
}

impl<T: Real> QuantizerStack<T> {
    pub fn levels(&self) -> usize {
        1 + self.acoustic.len()
    }

    pub fn dim(&self) -> usize {
        self.semantic.last_dim()
    }

    pub fn codebook_size(&self) -> usize {
        self.semantic.rows()
    }

    pub fn tables(&self) -> impl Iterator<Item = &Tensor<T>> {
        core::iter::once(&self.semantic).chain(&self.acoustic)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.codebook_size(), self.dim());
        if self.acoustic.is_empty() {
            return Err(Error::Config("need at least one acoustic level".into()));
        }
        for t in self.tables() {
            if t.rank() != 2 || t.last_dim() != d || t.rows() != n {
                return Err(Error::Config(alloc::format!("codebook shape {:?}, expected [{n}, {d}]", t.shape())));
            }
            if n < 2 {
                return Err(Error::Config("codebook needs at least 2 entries".into()));
            }
            if !t.is_finite() {
                return Err(Error::Config("codebook holds non-finite entries".into()));
            }
        }
        Ok(())
    }
}

fn check_dims<T: Real>(cb: &Tensor<T>, x: &Tensor<T>) -> Result<()> {
    if cb.rows() == 0 {
        return Err(Error::Config("empty codebook".into()));
    }
    if cb.last_dim() != x.last_dim() {
        return Err(Error::Config(alloc::format!(
            "codebook dim {} vs input dim {}",
            cb.last_dim(),
            x.last_dim()
        )));
    }
    Ok(())
}

/// Index of the nearest entry by squared Euclidean distance; ties go to the lowest index.
#[inline]
pub fn nearest_index<T: Real>(cb: &Tensor<T>, x: &[T]) -> usize {
    let d = x.len();
    let mut best = (0, T::infinity());
    for (i, e) in cb.data().chunks_exact(d).enumerate() {
        let mut s = T::zero();
        for (&a, &b) in x.iter().zip(e) {
            let t = a - b;
            s += t * t;
        }
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Nearest codeword for every row of `x[L, D]`.
pub fn vq_nearest<T: Real>(cb: &Tensor<T>, x: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
    check_dims(cb, x)?;
    let d = x.last_dim();
    let idx: Vec<usize> = x.data().chunks_exact(d).map(|r| nearest_index(cb, r)).collect();
    let q = gather(cb, &idx);
    Ok((idx, q))
}

fn gather<T: Real>(cb: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = cb.last_dim();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(cb.row(i));
    }
    Tensor::from_parts(vec![idx.len(), d], out)
}

fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn add_into<T: Real>(a: &mut Tensor<T>, b: &Tensor<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn mean_sq<T: Real>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / t.numel().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqOutput<T> {
    pub indices: Vec<Vec<usize>>,
    pub codewords: Vec<Tensor<T>>,
    pub quantized: Tensor<T>,
    /// Input seen by each level.
    pub inputs: Vec<Tensor<T>>,
    /// Residual left after each level.
    pub residuals: Vec<Tensor<T>>,
}

/// Residual quantization: level `i` quantizes what levels `< i` left over.
pub fn rvq_encode<T: Real>(levels: &[Tensor<T>], x: &Tensor<T>) -> Result<RvqOutput<T>> {
    if levels.is_empty() {
        return Err(Error::Config("residual quantizer needs at least one level".into()));
    }
    let mut r = x.clone();
    let mut out = RvqOutput {
        indices: Vec::new(),
        codewords: Vec::new(),
        quantized: Tensor::zeros(x.shape().to_vec()),
        inputs: Vec::new(),
        residuals: Vec::new(),
    };
    for cb in levels {
        let (idx, q) = vq_nearest(cb, &r)?;
        add_into(&mut out.quantized, &q);
        let next = sub(&r, &q);
        out.inputs.push(r);
        out.residuals.push(next.clone());
        out.indices.push(idx);
        out.codewords.push(q);
        r = next;
    }
    Ok(out)
}

/// Everything the bottleneck produces for one latent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<T> {
    pub codes: CodeGrid,
    /// Decoder input: semantic codeword + acoustic codeword sum.
    pub quantized: Tensor<T>,
    /// Semantic codewords.
    pub semantic: Tensor<T>,
    /// Latents before quantization.
    pub semantic_pre_quant: Tensor<T>,
    /// Per-level input, level 0 semantic.
    pub inputs: Vec<Tensor<T>>,
    /// Per-level selected codewords.
    pub codewords: Vec<Tensor<T>>,
    /// Per-level `input − codeword`.
    pub residuals: Vec<Tensor<T>>,
    pub commitment: f64,
    pub codebook_loss: f64,
}

pub fn split_quantize<T: Real>(stack: &QuantizerStack<T>, latents: &Tensor<T>) -> Result<QuantizationResult<T>> {
    stack.validate()?;
    let (sem_idx, sem_q) = vq_nearest(&stack.semantic, latents)?;
    let ac_in = match stack.input {
        AcousticInput::Parallel => latents.clone(),
        AcousticInput::SemanticResidual => sub(latents, &sem_q),
    };
    let ac = rvq_encode(&stack.acoustic, &ac_in)?;
    let mut quantized = sem_q.clone();
    add_into(&mut quantized, &ac.quantized);

    let mut rows = vec![sem_idx];
    rows.extend(ac.indices);
    let codes = CodeGrid::from_rows(&rows, stack.codebook_size())?;
    let mut inputs = vec![latents.clone()];
    inputs.extend(ac.inputs);
    let mut codewords = vec![sem_q.clone()];
    codewords.extend(ac.codewords);
    let mut residuals = vec![sub(latents, &sem_q)];
    residuals.extend(ac.residuals);
    let commitment: f64 = residuals.iter().map(mean_sq).sum();
    Ok(QuantizationResult {
        codes,
        quantized,
        semantic: sem_q,
        semantic_pre_quant: latents.clone(),
        inputs,
        codewords,
        residuals,
        commitment,
        codebook_loss: commitment,
    })
}

/// Table lookup inverse of the bottleneck.
pub fn decode_codes<T: Real>(stack: &QuantizerStack<T>, codes: &CodeGrid) -> Result<Tensor<T>> {
    if codes.levels() != stack.levels() {
        return Err(Error::Config(alloc::format!("grid has {} levels, stack {}", codes.levels(), stack.levels())));
    }
    let n = stack.codebook_size();
    let d = stack.dim();
    let mut out = vec![T::zero(); codes.len() * d];
    for (level, cb) in stack.tables().enumerate() {
        for t in 0..codes.len() {
            let c = codes.get(level, t);
            if c >= n {
                return Err(Error::CorruptCode { row: level, col: t, index: c, size: n });
            }
            for (o, &e) in out[t * d..(t + 1) * d].iter_mut().zip(cb.row(c)) {
                *o += e;
            }
        }
    }
    Ok(Tensor::from_parts(vec![codes.len(), d], out))
}

/// Sum over levels of mean squared `input − codeword`.
pub fn commitment_loss<T: Real>(result: &QuantizationResult<T>) -> f64 {
    result.residuals.iter().map(mean_sq).sum()
}

/// Tape handles produced by [`quantize_on_tape`].
#[derive(Debug, Clone)]
pub struct TapeQuant<T> {
    pub result: QuantizationResult<T>,
    /// Straight-through decoder input.
    pub quantized: Var,
    /// Straight-through semantic codewords.
    pub semantic: Var,
    /// Gradient only into the latents.
    pub commitment: Var,
    /// Gradient only into the selected codebook entries.
    pub codebook: Var,
}

/// Quantizes the latent node `z[L, D]`; `tables` are the bound codebook nodes
/// in level order (semantic first).
pub fn quantize_on_tape<T: Real>(
    tape: &mut Tape<T>,
    stack: &QuantizerStack<T>,
    tables: &[Var],
    z: Var,
) -> Result<TapeQuant<T>> {
    let result = split_quantize(stack, tape.value(z))?;
    let quantized = tape.straight_through(z, result.quantized.clone());
    let semantic = tape.straight_through(z, result.semantic.clone());

    let mut commit = Vec::with_capacity(stack.levels());
    let mut level_in = z;
    for (level, q) in result.codewords.iter().enumerate() {
        if level == 1 {
            level_in = match stack.input {
                AcousticInput::Parallel => z,
                AcousticInput::SemanticResidual => {
                    let c = tape.constant(result.codewords[0].clone());
                    tape.sub(z, c)
                }
            };
        }
        let qc = tape.constant(q.clone());
        commit.push(tape.mse(level_in, qc));
        if level >= 1 {
            level_in = tape.sub(level_in, qc);
        }
    }
    let mut cbl = Vec::with_capacity(stack.levels());
    for (level, (&table, input)) in tables.iter().zip(&result.inputs).enumerate() {
        let e = tape.gather_rows(table, &result.codes.row(level));
        let x = tape.constant(input.clone());
        cbl.push(tape.mse(x, e));
    }
    let commitment = sum_vars(tape, &commit);
    let codebook = sum_vars(tape, &cbl);
    Ok(TapeQuant { result, quantized, semantic, commitment, codebook })
}

pub(crate) fn sum_vars<T: Real>(tape: &mut Tape<T>, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x);
    }
    acc
}

/// One SGD step of rate `lr` on the codebook loss; returns the loss before the step.
pub fn codebook_update<T: Real>(stack: &mut QuantizerStack<T>, result: &QuantizationResult<T>, lr: f64) -> f64 {
    let mut tape = Tape::new();
    let tables: Vec<Var> = stack.tables().map(|t| tape.leaf(t.clone())).collect();
    let mut terms = Vec::new();
    for (level, &table) in tables.iter().enumerate() {
        let e = tape.gather_rows(table, &result.codes.row(level));
        let x = tape.constant(result.inputs[level].clone());
        terms.push(tape.mse(x, e));
    }
    let loss = sum_vars(&mut tape, &terms);
    let g = tape.backward(loss);
    let lr = T::of(lr);
    let upd = |t: &mut Tensor<T>, v: Var| {
        if let Some(gr) = g.wrt(v) {
            for (e, &d) in t.data_mut().iter_mut().zip(gr.data()) {
                *e -= lr * d;
            }
        }
    };
    upd(&mut stack.semantic, tables[0]);
    for (t, &v) in stack.acoustic.iter_mut().zip(&tables[1..]) {
        upd(t, v);
    }
    tape.scalar(loss).as_f64()
}

/// Usage counters of one codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodebookUsage {
    pub counts: Vec<u64>,
    /// Consecutive steps without a hit.
    pub idle: Vec<u32>,
}

impl CodebookUsage {
    pub fn new(size: usize) -> Self {
        Self { counts: vec![0; size], idle: vec![0; size] }
    }

    /// Records one step's assignments.
    pub fn record(&mut self, indices: &[usize]) {
        let mut hit = vec![false; self.counts.len()];
        for &i in indices {
            self.counts[i] += 1;
            hit[i] = true;
        }
        for (idle, h) in self.idle.iter_mut().zip(hit) {
            *idle = if h { 0 } else { idle.saturating_add(1) };
        }
    }

    pub fn dead(&self, after: u32) -> Vec<usize> {
        self.idle.iter().enumerate().filter(|(_, &n)| n >= after).map(|(i, _)| i).collect()
    }
}

/// Replaces entries idle for `after` steps by random rows of `recent`; returns how many.
pub fn reseed_dead<T: Real, R: Rng + ?Sized>(
    table: &mut Tensor<T>,
    usage: &mut CodebookUsage,
    recent: &Tensor<T>,
    after: u32,
    rng: &mut R,
) -> usize {
    let dead = usage.dead(after);
    if recent.rows() == 0 {
        return 0;
    }
    for &i in &dead {
        let src = recent.row(rng.random_range(0..recent.rows())).to_vec();
        table.row_mut(i).copy_from_slice(&src);
        usage.idle[i] = 0;
    }
    dead.len()
}

/// Normalised usage histogram and `exp(entropy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub histogram: Vec<f64>,
    pub perplexity: f64,
}

pub fn utilization_from_counts(counts: &[u64]) -> Utilization {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Utilization { histogram: vec![0.0; counts.len()], perplexity: 0.0 };
    }
    let histogram: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let h: f64 = histogram.iter().filter(|&&p| p > 0.0).map(|&p| -p * num_traits::Float::ln(p)).sum();
    Utilization { perplexity: num_traits::Float::exp(h), histogram }
}

/// One [`Utilization`] per codebook.
pub fn code_utilization(usage: &[CodebookUsage]) -> Vec<Utilization> {
    usage.iter().map(|u| utilization_from_counts(&u.counts)).collect()
}

/// k-means++ seeding followed by `iters` Lloyd rounds; returns `[k, D]`.
pub fn kmeans<T: Real, R: Rng + ?Sized>(data: &Tensor<T>, k: usize, iters: usize, rng: &mut R) -> Tensor<T> {
    let (n, d) = (data.rows(), data.last_dim());
    assert!(n > 0 && k > 0, "kmeans needs data and k > 0");
    let x: Vec<f64> = data.to_f64_vec();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();

    let mut c = Vec::with_capacity(k * d);
    c.extend_from_slice(row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| dist(row(i), &c[..d])).collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut j = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    j = i;
                    break;
                }
                u -= b;
            }
            j
        } else {
            rng.random_range(0..n)
        };
        let start = c.len();
        c.extend_from_slice(row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist(row(i), &c[start..start + d]));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut bi = (0, f64::INFINITY);
            for j in 0..k {
                let dd = dist(row(i), &c[j * d..(j + 1) * d]);
                if dd < bi.1 {
                    bi = (j, dd);
                }
            }
            *a = bi.0;
        }
        let mut sums = vec![0.0; k * d];
        let mut cnt = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            cnt[a] += 1;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if cnt[j] > 0 {
                for t in 0..d {
                    c[j * d + t] = sums[j * d + t] / cnt[j] as f64;
                }
            }
        }
    }
    Tensor::from_parts(vec![k, d], c.into_iter().map(T::of).collect())
}

/// k-means initialisation of every level on one batch of latents `[N, D]`.
pub fn kmeans_init<T: Real, R: Rng + ?Sized>(stack: &mut QuantizerStack<T>, latents: &Tensor<T>, iters: usize, rng: &mut R) {
    let k = stack.codebook_size();
    stack.semantic = kmeans(latents, k, iters, rng);
    let mut r = match stack.input {
        AcousticInput::Parallel => latents.clone(),
        AcousticInput::SemanticResidual => {
            let (_, q) = vq_nearest(&stack.semantic, latents).expect("dims checked");
            sub(latents, &q)
        }
    };
    for level in 0..stack.acoustic.len() {
        stack.acoustic[level] = kmeans(&r, k, iters, rng);
        let (_, q) = vq_nearest(&stack.acoustic[level], &r).expect("dims checked");
        r = sub(&r, &q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn nearest_basic_and_ties() {
        let (i, q) = vq_nearest(&t1(&[-1.0, 1.0]), &t1(&[0.3])).unwrap();
        assert_eq!((i[0], q.data()[0]), (1, 1.0));
        let cb = t1(&[9.0, 8.0, 0.5, 7.0, 6.0, -0.5]);
        assert_eq!(vq_nearest(&cb, &t1(&[0.0])).unwrap().0, vec![2]);
    }

    #[test]
    fn rvq_hand_trace() {
        let out = rvq_encode(&[t1(&[0.0, 1.0]), t1(&[-0.25, 0.25])], &t1(&[0.8])).unwrap();
        assert_eq!(out.indices, vec![vec![1], vec![0]]);
        assert!((out.residuals[0].data()[0] + 0.2).abs() < 1e-12);
        assert!((out.quantized.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn commitment_scalar_case() {
        let stack = QuantizerStack {
            semantic: t1(&[1.0, 5.0]),
            acoustic: vec![t1(&[0.8, 3.0])],
            input: AcousticInput::Parallel,
        };
        let r = split_quantize(&stack, &t1(&[0.8])).unwrap();
        assert!((commitment_loss(&r) - 0.04).abs() < 1e-12);
        assert_eq!(r.codes.column(0), vec![0, 0]);
    }

    #[test]
    fn single_entry_sgd_step() {
        let mut stack = QuantizerStack {
            semantic: t1(&[0.0, 100.0]),
            acoustic: vec![t1(&[0.0, 100.0])],
            input: AcousticInput::Parallel,
        };
        let x = t1(&[1.0, 2.0, 4.0]);
        let r = split_quantize(&stack, &x).unwrap();
        codebook_update(&mut stack, &r, 0.1);
        let want = 0.1 * 2.0 * (7.0 / 3.0);
        assert!((stack.semantic.data()[0] - want).abs() < 1e-12);
        assert_eq!(stack.semantic.data()[1], 100.0);
    }

    #[test]
    fn perplexity_extremes() {
        assert!((utilization_from_counts(&[5; 64]).perplexity - 64.0).abs() < 1e-9);
        let mut c = vec![0u64; 64];
        c[3] = 10;
        assert_eq!(utilization_from_counts(&c).perplexity, 1.0);
    }

    #[test]
    fn reseed_after_idle_window() {
        let mut u = CodebookUsage::new(3);
        for _ in 0..200 {
            u.record(&[0, 1]);
        }
        assert_eq!(u.dead(200), vec![2]);
        let mut cb = t1(&[0.0, 1.0, 50.0]);
        let recent = t1(&[7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(reseed_dead(&mut cb, &mut u, &recent, 200, &mut rng), 1);
        assert_eq!(cb.data()[2], 7.0);
        assert!(u.dead(200).is_empty());
    }

    #[test]
    fn corrupt_codes_rejected() {
        assert!(matches!(
            CodeGrid::new(2, 2, 4, vec![0, 1, 4, 0]),
            Err(Error::CorruptCode { row: 1, col: 0, index: 4, size: 4 })
        ));
    }
}
