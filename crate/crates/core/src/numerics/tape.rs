//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Every primitive pushes one node holding its output value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates gradients for every node that (transitively) depends on a leaf
//! created with `requires_grad`.
//!
//! Shape mismatches inside the tape are programming errors and panic; numeric
//! faults (NaN/Inf, non-positive Snake alpha) are latched and surfaced by
//! [`Tape::check`] so a training step can abort with a diagnostic.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::spectral::StftPlan;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};
use crate::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Abs(Var),
    Sin(Var),
    Ln(Var),
    LogClamp(Var, T),
    Tanh(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Hinge(Var, T),
    Snake { x: Var, alpha: Var, channels: usize, len: usize },
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    PickCols { x: Var, idx: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    WeightNorm { v: Var, g: Var, norms: Vec<T> },
    Stft { x: Var, plan: Arc<StftPlan<T>> },
    Hypot(Var, Var),
    Atan2(Var, Var),
    Cosine { a: Var, b: Var, eps: T },
    StraightThrough(Var),
    Rope { x: Var, heads: usize, offset: usize, period: usize, base: T },
}

/// Geometry shared by the forward and reverse rules of the convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Zero padding on the left (conv) or samples trimmed from the left (transposed conv).
    pub pad: usize,
    pub len_in: usize,
    pub len_out: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Latched numeric fault.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub op: &'static str,
    pub node: usize,
    pub parameter: bool,
}

/// Ordered computation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First numeric fault recorded by any forward rule.
    pub fn fault(&self) -> Option<&Fault> {
        self.fault.as_ref()
    }

    /// Errors if any forward value so far was non-finite or any parameter invalid.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(f) if f.parameter => Err(Error::Parameter(alloc::format!(
                "`{}` received a non-positive parameter (node {})",
                f.op,
                f.node
            ))),
            Some(f) => Err(Error::NonFinite { op: f.op, node: f.node }),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(Fault { op: op_name(&op), node: id, parameter: false });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(id)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ── Leaves ─────────────────────────────────────────────────────────

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    // ── Elementwise ────────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "{}: shape mismatch", op_name(&op));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.nodes[a.0].value.map(f);
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    /// `ln(max(x, eps))`.
    pub fn log_clamp(&mut self, a: Var, eps: T) -> Var {
        self.unary(a, Op::LogClamp(a, eps), |x| x.max(eps).ln())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { slope * x })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu_fwd)
    }

    /// `max(1 + sign·x, 0)`; `sign` is `+1` or `-1`.
    pub fn hinge(&mut self, a: Var, sign: T) -> Var {
        self.unary(a, Op::Hinge(a, sign), |x| (T::one() + sign * x).max(T::zero()))
    }

    /// Snake activation `x + sin²(αx)/α` with one α per channel.
    ///
    /// `x` is `[C, T]` or `[B, C, T]`; `alpha` is `[C]`.
    pub fn snake(&mut self, x: Var, alpha: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2, "snake: x must be [.., C, T]");
        let (channels, len) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        assert_eq!(self.value(alpha).numel(), channels, "snake: alpha per channel");
        let a = self.data(alpha).to_vec();
        let bad_alpha = a.iter().any(|&v| v <= T::zero());
        let xv = self.data(x);
        let mut out = Vec::with_capacity(xv.len());
        for (row, chunk) in xv.chunks(len).enumerate() {
            let al = a[row % channels];
            for &v in chunk {
                let s = (al * v).sin();
                out.push(v + s * s / al);
            }
        }
        let ng = self.ng(&[x, alpha]);
        let id = self.nodes.len();
        let v = self.push(Tensor::from_parts(xs, out), Op::Snake { x, alpha, channels, len }, ng);
        if bad_alpha && self.fault.as_ref().is_none_or(|f| !f.parameter) {
            self.fault = Some(Fault { op: "snake", node: id, parameter: true });
        }
        v
    }

    /// Adds `b[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(b).numel(), n, "add_bias: width mismatch");
        let bv = self.data(b).to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(t, Op::AddBias(x, b), ng)
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: T = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), ng)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_nt: {sa:?} x {sb:?}ᵀ");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatmulNt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "transpose: 2-D only");
        let t = self.value(a).transpose2();
        let ng = self.ng(&[a]);
        self.push(t, Op::Transpose(a), ng)
    }

    // ── Shape ──────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape.to_vec()).expect("reshape: element count");
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0], "slice_rows: {start}+{len} > {}", shape[0]);
        let rs: usize = shape[1..].iter().product();
        let data = self.data(x)[start * rs..(start + len) * rs].to_vec();
        let mut s = shape;
        s[0] = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(s, data), Op::SliceRows { x, start }, ng)
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(&s[1..], &tail[..], "concat_rows: trailing shape mismatch");
            rows += s[0];
            data.extend_from_slice(self.data(x));
        }
        let mut s = vec![rows];
        s.extend(tail);
        let ng = self.ng(xs);
        self.push(Tensor::from_parts(s, data), Op::ConcatRows(xs.to_vec()), ng)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims2(x);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols { x, start }, ng)
    }

    /// Concatenation of 2-D tensors along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let r = self.dims2(xs[0]).0;
        let widths: Vec<usize> = xs.iter().map(|&x| self.dims2(x).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            assert_eq!(self.dims2(x).0, r, "concat_cols: row mismatch");
            let src = self.data(x);
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.ng(xs);
        self.push(Tensor::from_parts(vec![r, total], data), Op::ConcatCols(xs.to_vec()), ng)
    }

    fn dims2(&self, x: Var) -> (usize, usize) {
        let v = self.value(x);
        (v.rows(), v.last_dim())
    }

    // ── Indexing ───────────────────────────────────────────────────────

    /// `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (n, d) = self.dims2(table);
        let src = self.data(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} >= {n}");
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        self.push(
            Tensor::from_parts(vec![idx.len(), d], data),
            Op::GatherRows { table, idx: idx.to_vec() },
            ng,
        )
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims2(x);
        assert_eq!(idx.len(), r, "pick_cols: one index per row");
        let src = self.data(x);
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick_cols: column {j} >= {c}");
                src[i * c + j]
            })
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![r], data), Op::PickCols { x, idx: idx.to_vec() }, ng)
    }

    // ── Normalisation ──────────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = t.last_dim();
        for row in t.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = t.last_dim();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(&[x]);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(gamma).numel(), n);
        assert_eq!(self.value(beta).numel(), n);
        let (g, b) = (self.data(gamma).to_vec(), self.data(beta).to_vec());
        let mut t = self.value(x).clone();
        let mut means = Vec::new();
        let mut rstds = Vec::new();
        let nf = T::of(n as f64);
        for row in t.data_mut().chunks_mut(n) {
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for ((v, &gg), &bb) in row.iter_mut().zip(&g).zip(&b) {
                *v = (*v - mu) * rstd * gg + bb;
            }
            means.push(mu);
            rstds.push(rstd);
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(t, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, ng)
    }

    // ── Convolutions ───────────────────────────────────────────────────

    /// 1-D convolution of `x[B, C_in, T]` (or `[C_in, T]`) with `w[C_out, C_in, K]`.
    ///
    /// Output length is `⌊(T + pad_left + pad_right − dilation·(K−1) − 1)/stride⌋ + 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, len_in) = split_bct(&xs);
        let ws = self.shape(w);
        assert!(ws.len() == 3 && ws[1] == c_in, "conv1d: weight {ws:?} vs input channels {c_in}");
        let (c_out, kernel) = (ws[0], ws[2]);
        let span = dilation * (kernel - 1) + 1;
        let padded = len_in + pad_left + pad_right;
        assert!(padded >= span, "conv1d: input shorter than receptive span");
        let len_out = (padded - span) / stride + 1;
        let geom = ConvGeom { batch, c_in, c_out, kernel, stride, dilation, pad: pad_left, len_in, len_out };
        let mut out = vec![T::zero(); batch * c_out * len_out];
        conv1d_fwd(self.data(x), self.data(w), b.map(|b| self.data(b)), &mut out, &geom);
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = c_out;
        shape[r - 1] = len_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::from_parts(shape, out), Op::Conv1d { x, w, b, geom }, ng)
    }

    /// Transposed 1-D convolution of `x[B, C_in, T]` with `w[C_in, C_out, K]`.
    ///
    /// The full output has length `(T−1)·stride + K`; `trim_left` samples are
    /// dropped from the start and the result is cut to `len_out`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        trim_left: usize,
        len_out: usize,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, len_in) = split_bct(&xs);
        let ws = self.shape(w);
        assert!(ws.len() == 3 && ws[0] == c_in, "conv_transpose1d: weight {ws:?} vs {c_in}");
        let (c_out, kernel) = (ws[1], ws[2]);
        let geom = ConvGeom { batch, c_in, c_out, kernel, stride, dilation: 1, pad: trim_left, len_in, len_out };
        let mut out = vec![T::zero(); batch * c_out * len_out];
        convt1d_fwd(self.data(x), self.data(w), b.map(|b| self.data(b)), &mut out, &geom);
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = c_out;
        shape[r - 1] = len_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::from_parts(shape, out), Op::ConvTranspose1d { x, w, b, geom }, ng)
    }

    /// Weight normalisation: row `o` of `v` rescaled to norm `g[o]`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let rows = shape[0];
        assert_eq!(self.value(g).numel(), rows, "weight_norm: one gain per leading row");
        let rs = self.value(v).numel() / rows;
        let gv = self.data(g).to_vec();
        let src = self.data(v);
        let mut out = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(rows);
        for (o, row) in src.chunks(rs).enumerate() {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            let s = gv[o] / n;
            out.extend(row.iter().map(|&a| a * s));
            norms.push(n);
        }
        let ng = self.ng(&[v, g]);
        self.push(Tensor::from_parts(shape, out), Op::WeightNorm { v, g, norms }, ng)
    }

    // ── Spectral ───────────────────────────────────────────────────────

    /// Windowed DFT of a 1-D signal; output `[2, frames, bins]` holding real
    /// and imaginary parts.
    pub fn stft(&mut self, x: Var, plan: Arc<StftPlan<T>>) -> Var {
        assert_eq!(self.value(x).numel(), plan.signal_len, "stft: plan built for another length");
        let (f, b) = (plan.frames, plan.bins);
        let frames = plan.gather(self.data(x));
        let mut out = vec![T::zero(); 2 * f * b];
        let (re, im) = out.split_at_mut(f * b);
        gemm_acc(&frames, &plan.cos, re, f, plan.n_fft, b);
        gemm_acc(&frames, &plan.sin, im, f, plan.n_fft, b);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![2, f, b], out), Op::Stft { x, plan }, ng)
    }

    /// `sqrt(re² + im²)` elementwise.
    pub fn hypot(&mut self, re: Var, im: Var) -> Var {
        self.binary(re, im, Op::Hypot(re, im), |a, b| (a * a + b * b).sqrt())
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.binary(y, x, Op::Atan2(y, x), |a, b| a.atan2(b))
    }

    // ── Distances ──────────────────────────────────────────────────────

    /// Row-wise cosine similarity `a·b / (‖a‖‖b‖ + eps)`, output `[rows]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: T) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "cosine_rows: shape mismatch");
        let n = self.value(a).last_dim();
        let out = self
            .data(a)
            .chunks(n)
            .zip(self.data(b).chunks(n))
            .map(|(x, y)| {
                let (s, na, nb) = dot_norms(x, y);
                s / (na * nb + eps)
            })
            .collect::<Vec<_>>();
        let rows = out.len();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![rows], out), Op::Cosine { a, b, eps }, ng)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.square(d);
        self.mean(d)
    }

    // ── Special ────────────────────────────────────────────────────────

    /// Forward value `q`, reverse pass treats the op as identity on `x`.
    pub fn straight_through(&mut self, x: Var, q: Tensor<T>) -> Var {
        assert_eq!(self.shape(x), q.shape(), "straight_through: shape mismatch");
        let ng = self.ng(&[x]);
        self.push(q, Op::StraightThrough(x), ng)
    }

    /// Rotary position embedding on `x[N, heads·head_dim]`, row `r` at position `offset + r`.
    pub fn rope(&mut self, x: Var, heads: usize, offset: usize, base: T) -> Var {
        self.rope_with(x, heads, offset, 0, base)
    }

    /// Rotary embedding where positions restart every `period` rows, for
    /// several short sequences stacked along the first axis.
    pub fn rope_periodic(&mut self, x: Var, heads: usize, period: usize, base: T) -> Var {
        assert!(period > 0);
        self.rope_with(x, heads, 0, period, base)
    }

    fn rope_with(&mut self, x: Var, heads: usize, offset: usize, period: usize, base: T) -> Var {
        let mut t = self.value(x).clone();
        let width = t.last_dim();
        assert_eq!(width % (2 * heads), 0, "rope: head_dim must be even");
        rope_apply(t.data_mut(), width, heads, offset, period, base, false);
        let ng = self.ng(&[x]);
        self.push(t, Op::Rope { x, heads, offset, period, base }, ng)
    }

    // ── Reverse pass ───────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be a scalar");
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = g[id].take() else { continue };
            self.reverse_rule(id, &gout, &mut g);
            g[id] = Some(gout);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads: g, shapes }
    }

    fn acc<'a>(&self, g: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(g[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn unary_rule(&self, g: &mut [Option<Vec<T>>], a: Var, gout: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(ga) = self.acc(g, a) {
            for (i, (o, &gv)) in ga.iter_mut().zip(gout).enumerate() {
                *o += f(i, gv);
            }
        }
    }

    fn reverse_rule(&self, id: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let y = self.nodes[id].value.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.unary_rule(g, *a, gout, |_, v| v);
                self.unary_rule(g, *b, gout, |_, v| v);
            }
            Op::Sub(a, b) => {
                self.unary_rule(g, *a, gout, |_, v| v);
                self.unary_rule(g, *b, gout, |_, v| -v);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.unary_rule(g, *a, gout, |i, v| v * vb[i]);
                self.unary_rule(g, *b, gout, |i, v| v * va[i]);
            }
            Op::Scale(a, c) => self.unary_rule(g, *a, gout, |_, v| v * *c),
            Op::Square(a) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| v * (x[i] + x[i]));
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| {
                    if x[i] > T::zero() {
                        v
                    } else if x[i] < T::zero() {
                        -v
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sin(a) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| v * x[i].cos());
            }
            Op::Ln(a) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| v / x[i]);
            }
            Op::LogClamp(a, eps) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| if x[i] > *eps { v / x[i] } else { T::zero() });
            }
            Op::Tanh(a) => self.unary_rule(g, *a, gout, |i, v| v * (T::one() - y[i] * y[i])),
            Op::LeakyRelu(a, s) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| if x[i] > T::zero() { v } else { v * *s });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| v * gelu_grad(x[i]));
            }
            Op::Hinge(a, s) => {
                let x = self.data(*a);
                self.unary_rule(g, *a, gout, |i, v| {
                    if T::one() + *s * x[i] > T::zero() {
                        v * *s
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Snake { x, alpha, channels, len } => {
                let xv = self.data(*x);
                let al = self.data(*alpha);
                let ch = |i: usize| (i / len) % channels;
                self.unary_rule(g, *x, gout, |i, v| {
                    let a = al[ch(i)];
                    v * (T::one() + (a * xv[i] * T::of(2.0)).sin())
                });
                if let Some(ga) = self.acc(g, *alpha) {
                    for (i, &gv) in gout.iter().enumerate() {
                        let c = ch(i);
                        let a = al[c];
                        let s = (a * xv[i]).sin();
                        ga[c] += gv * (xv[i] * (T::of(2.0) * a * xv[i]).sin() / a - s * s / (a * a));
                    }
                }
            }
            Op::AddBias(x, b) => {
                self.unary_rule(g, *x, gout, |_, v| v);
                if let Some(gb) = self.acc(g, *b) {
                    let n = gb.len();
                    for row in gout.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sum(a) => self.unary_rule(g, *a, &vec![gout[0]; self.value(*a).numel()], |_, v| v),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = gout[0] / T::of(n as f64);
                if let Some(ga) = self.acc(g, *a) {
                    for o in ga.iter_mut() {
                        *o += v;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(g, *a) {
                    gemm_nt_acc(gout, vb, ga, m, n, k);
                }
                if let Some(gb) = self.acc(g, *b) {
                    gemm_tn_acc(va, gout, gb, m, k, n);
                }
            }
            Op::MatmulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(g, *a) {
                    gemm_acc(gout, vb, ga, m, n, k);
                }
                if let Some(gb) = self.acc(g, *b) {
                    gemm_tn_acc(gout, va, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let gt = Tensor::from_parts(vec![s[1], s[0]], gout.to_vec()).transpose2();
                self.unary_rule(g, *a, gt.data(), |_, v| v);
            }
            Op::Reshape(a) | Op::StraightThrough(a) => self.unary_rule(g, *a, gout, |_, v| v),
            Op::SliceRows { x, start } => {
                let rs = gout.len() / self.shape(Var(id))[0].max(1);
                if let Some(gx) = self.acc(g, *x) {
                    for (o, &v) in gx[start * rs..start * rs + gout.len()].iter_mut().zip(gout) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if let Some(gx) = self.acc(g, x) {
                        for (o, &v) in gx.iter_mut().zip(&gout[off..off + n]) {
                            *o += v;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims2(*x);
                let len = gout.len() / r.max(1);
                if let Some(gx) = self.acc(g, *x) {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += gout[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = self.value(Var(id)).last_dim();
                let r = self.value(Var(id)).rows();
                let mut off = 0;
                for &x in xs {
                    let w = self.dims2(x).1;
                    if let Some(gx) = self.acc(g, x) {
                        for i in 0..r {
                            for j in 0..w {
                                gx[i * w + j] += gout[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.value(*table).last_dim();
                if let Some(gt) = self.acc(g, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::PickCols { x, idx } => {
                let c = self.value(*x).last_dim();
                if let Some(gx) = self.acc(g, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += gout[r];
                    }
                }
            }
            Op::Softmax(x) => {
                let n = self.value(*x).last_dim();
                if let Some(gx) = self.acc(g, *x) {
                    for ((o, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in o.iter_mut().zip(yr).zip(gr) {
                            *o += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = self.value(*x).last_dim();
                if let Some(gx) = self.acc(g, *x) {
                    for ((o, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let s: T = gr.iter().copied().sum();
                        for ((o, &yy), &gg) in o.iter_mut().zip(yr).zip(gr) {
                            *o += gg - yy.exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let n = self.value(*x).last_dim();
                let xv = self.data(*x);
                let gam = self.data(*gamma);
                let nf = T::of(n as f64);
                let xhat = |r: usize, j: usize| (xv[r * n + j] - mean[r]) * rstd[r];
                if let Some(gg) = self.acc(g, *gamma) {
                    for r in 0..mean.len() {
                        for j in 0..n {
                            gg[j] += gout[r * n + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(gb) = self.acc(g, *beta) {
                    for row in gout.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if let Some(gx) = self.acc(g, *x) {
                    for r in 0..mean.len() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let d = gout[r * n + j] * gam[j];
                            s1 += d;
                            s2 += d * xhat(r, j);
                        }
                        for j in 0..n {
                            let d = gout[r * n + j] * gam[j];
                            gx[r * n + j] += rstd[r] / nf * (nf * d - s1 - xhat(r, j) * s2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (xv, wv) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.acc(g, *x) {
                    conv1d_bwd_input(gout, wv, gx, geom);
                }
                if let Some(gw) = self.acc(g, *w) {
                    conv1d_bwd_weight(gout, xv, gw, geom);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(g, *b) {
                        bias_bwd(gout, gb, geom);
                    }
                }
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                let (xv, wv) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.acc(g, *x) {
                    convt1d_bwd_input(gout, wv, gx, geom);
                }
                if let Some(gw) = self.acc(g, *w) {
                    convt1d_bwd_weight(gout, xv, gw, geom);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(g, *b) {
                        bias_bwd(gout, gb, geom);
                    }
                }
            }
            Op::WeightNorm { v, g: gain, norms } => {
                let vv = self.data(*v);
                let gv = self.data(*gain);
                let rows = norms.len();
                let rs = vv.len() / rows;
                // projection of the output gradient onto each normalised row
                let proj: Vec<T> = (0..rows)
                    .map(|o| {
                        let r = o * rs..(o + 1) * rs;
                        vv[r.clone()].iter().zip(&gout[r]).map(|(&a, &b)| a * b).sum::<T>() / norms[o]
                    })
                    .collect();
                if let Some(gg) = self.acc(g, *gain) {
                    for o in 0..rows {
                        gg[o] += proj[o];
                    }
                }
                if let Some(gvv) = self.acc(g, *v) {
                    for o in 0..rows {
                        let n = norms[o];
                        let s = gv[o] / n;
                        for j in o * rs..(o + 1) * rs {
                            gvv[j] += s * (gout[j] - proj[o] * vv[j] / n);
                        }
                    }
                }
            }
            Op::Stft { x, plan } => {
                if let Some(gx) = self.acc(g, *x) {
                    let (f, b, n) = (plan.frames, plan.bins, plan.n_fft);
                    let mut gframes = vec![T::zero(); f * n];
                    gemm_nt_acc(&gout[..f * b], &plan.cos, &mut gframes, f, b, n);
                    gemm_nt_acc(&gout[f * b..], &plan.sin, &mut gframes, f, b, n);
                    plan.scatter(&gframes, gx);
                }
            }
            Op::Hypot(re, im) => {
                let (a, b) = (self.data(*re), self.data(*im));
                let safe = |i: usize, num: T| if y[i] > T::zero() { num / y[i] } else { T::zero() };
                self.unary_rule(g, *re, gout, |i, v| v * safe(i, a[i]));
                self.unary_rule(g, *im, gout, |i, v| v * safe(i, b[i]));
            }
            Op::Atan2(yy, xx) => {
                let (a, b) = (self.data(*yy), self.data(*xx));
                let r2 = |i: usize| a[i] * a[i] + b[i] * b[i];
                self.unary_rule(g, *yy, gout, |i, v| if r2(i) > T::zero() { v * b[i] / r2(i) } else { T::zero() });
                self.unary_rule(g, *xx, gout, |i, v| if r2(i) > T::zero() { -v * a[i] / r2(i) } else { T::zero() });
            }
            Op::Cosine { a, b, eps } => {
                let n = self.value(*a).last_dim();
                let (va, vb) = (self.data(*a), self.data(*b));
                let mut da = vec![T::zero(); va.len()];
                let mut db = vec![T::zero(); vb.len()];
                for (r, &gr) in gout.iter().enumerate() {
                    let (x, yv) = (&va[r * n..(r + 1) * n], &vb[r * n..(r + 1) * n]);
                    let (s, na, nb) = dot_norms(x, yv);
                    let d = na * nb + *eps;
                    let c = s / (d * d);
                    for j in 0..n {
                        let ua = if na > T::zero() { x[j] / na } else { T::zero() };
                        let ub = if nb > T::zero() { yv[j] / nb } else { T::zero() };
                        da[r * n + j] = gr * (yv[j] / d - c * nb * ua);
                        db[r * n + j] = gr * (x[j] / d - c * na * ub);
                    }
                }
                self.unary_rule(g, *a, &da, |_, v| v);
                self.unary_rule(g, *b, &db, |_, v| v);
            }
            Op::Rope { x, heads, offset, period, base } => {
                let mut gt = gout.to_vec();
                let width = self.value(*x).last_dim();
                rope_apply(&mut gt, width, *heads, *offset, *period, *base, true);
                self.unary_rule(g, *x, &gt, |_, v| v);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if it does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zero-filled when absent.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor<T> {
        self.wrt(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g))
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Square(_) => "square",
        Op::Abs(_) => "abs",
        Op::Sin(_) => "sin",
        Op::Ln(_) => "ln",
        Op::LogClamp(..) => "log_clamp",
        Op::Tanh(_) => "tanh",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Gelu(_) => "gelu",
        Op::Hinge(..) => "hinge",
        Op::Snake { .. } => "snake",
        Op::AddBias(..) => "add_bias",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Matmul(..) => "matmul",
        Op::MatmulNt(..) => "matmul_nt",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::PickCols { .. } => "pick_cols",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvTranspose1d { .. } => "conv_transpose1d",
        Op::WeightNorm { .. } => "weight_norm",
        Op::Stft { .. } => "stft",
        Op::Hypot(..) => "hypot",
        Op::Atan2(..) => "atan2",
        Op::Cosine { .. } => "cosine",
        Op::StraightThrough(_) => "straight_through",
        Op::Rope { .. } => "rope",
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    let t = u.tanh();
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0 * 0.044715) * x * x)
}

fn dot_norms<T: Real>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut s = T::zero();
    let mut a = T::zero();
    let mut b = T::zero();
    for (&u, &v) in x.iter().zip(y) {
        s += u * v;
        a += u * u;
        b += v * v;
    }
    (s, a.sqrt(), b.sqrt())
}

fn split_bct(s: &[usize]) -> (usize, usize, usize) {
    match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => panic!("convolution input must be [C, T] or [B, C, T], got {s:?}"),
    }
}

/// Valid output range `[lo, hi)` for tap offset `off` (input index `t·stride + off`).
#[inline]
fn tap_range(off: isize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = len_in as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(len_out as isize) };
    (lo as usize, (hi.max(lo)) as usize)
}

fn conv1d_fwd<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T], g: &ConvGeom) {
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let orow = &mut out[(bi * g.c_out + o) * g.len_out..][..g.len_out];
            if let Some(b) = b {
                orow.fill(b[o]);
            }
            for i in 0..g.c_in {
                let xrow = &x[(bi * g.c_in + i) * g.len_in..][..g.len_in];
                for k in 0..g.kernel {
                    let wv = w[(o * g.c_in + i) * g.kernel + k];
                    let off = (k * g.dilation) as isize - g.pad as isize;
                    let (lo, hi) = tap_range(off, g.stride, g.len_in, g.len_out);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            orow[t] += wv * xrow[(t as isize * g.stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv1d_bwd_input<T: Real>(gout: &[T], w: &[T], gx: &mut [T], g: &ConvGeom) {
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &gout[(bi * g.c_out + o) * g.len_out..][..g.len_out];
            for i in 0..g.c_in {
                let xrow = &mut gx[(bi * g.c_in + i) * g.len_in..][..g.len_in];
                for k in 0..g.kernel {
                    let wv = w[(o * g.c_in + i) * g.kernel + k];
                    let off = (k * g.dilation) as isize - g.pad as isize;
                    let (lo, hi) = tap_range(off, g.stride, g.len_in, g.len_out);
                    if g.stride == 1 && lo < hi {
                        let xs = &mut xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (xv, &gv) in xs.iter_mut().zip(&grow[lo..hi]) {
                            *xv += wv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            xrow[(t as isize * g.stride as isize + off) as usize] += wv * grow[t];
                        }
                    }
                }
            }
        }
    }
}

fn conv1d_bwd_weight<T: Real>(gout: &[T], x: &[T], gw: &mut [T], g: &ConvGeom) {
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &gout[(bi * g.c_out + o) * g.len_out..][..g.len_out];
            for i in 0..g.c_in {
                let xrow = &x[(bi * g.c_in + i) * g.len_in..][..g.len_in];
                for k in 0..g.kernel {
                    let off = (k * g.dilation) as isize - g.pad as isize;
                    let (lo, hi) = tap_range(off, g.stride, g.len_in, g.len_out);
                    let mut s = T::zero();
                    if g.stride == 1 && lo < hi {
                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (&xv, &gv) in xs.iter().zip(&grow[lo..hi]) {
                            s += xv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            s += xrow[(t as isize * g.stride as isize + off) as usize] * grow[t];
                        }
                    }
                    gw[(o * g.c_in + i) * g.kernel + k] += s;
                }
            }
        }
    }
}

fn bias_bwd<T: Real>(gout: &[T], gb: &mut [T], g: &ConvGeom) {
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &gout[(bi * g.c_out + o) * g.len_out..][..g.len_out];
            gb[o] += grow.iter().copied().sum::<T>();
        }
    }
}

/// Output index `t·stride + k − trim` for input `t`, tap `k`.
#[inline]
fn convt_range(k: usize, g: &ConvGeom) -> (usize, usize, isize) {
    let off = k as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = g.len_out as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(g.len_in as isize) };
    (lo as usize, hi.max(lo) as usize, off)
}

fn convt1d_fwd<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T], g: &ConvGeom) {
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let orow = &mut out[(bi * g.c_out + o) * g.len_out..][..g.len_out];
            if let Some(b) = b {
                orow.fill(b[o]);
            }
            for i in 0..g.c_in {
                let xrow = &x[(bi * g.c_in + i) * g.len_in..][..g.len_in];
                for k in 0..g.kernel {
                    let wv = w[(i * g.c_out + o) * g.kernel + k];
                    let (lo, hi, off) = convt_range(k, g);
                    for t in lo..hi {
                        orow[(t as isize * g.stride as isize + off) as usize] += wv * xrow[t];
                    }
                }
            }
        }
    }
}

fn convt1d_bwd_input<T: Real>(gout: &[T], w: &[T], gx: &mut [T], g: &ConvGeom) {
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &gout[(bi * g.c_out + o) * g.len_out..][..g.len_out];
            for i in 0..g.c_in {
                let xrow = &mut gx[(bi * g.c_in + i) * g.len_in..][..g.len_in];
                for k in 0..g.kernel {
                    let wv = w[(i * g.c_out + o) * g.kernel + k];
                    let (lo, hi, off) = convt_range(k, g);
                    for t in lo..hi {
                        xrow[t] += wv * grow[(t as isize * g.stride as isize + off) as usize];
                    }
                }
            }
        }
    }
}

fn convt1d_bwd_weight<T: Real>(gout: &[T], x: &[T], gw: &mut [T], g: &ConvGeom) {
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &gout[(bi * g.c_out + o) * g.len_out..][..g.len_out];
            for i in 0..g.c_in {
                let xrow = &x[(bi * g.c_in + i) * g.len_in..][..g.len_in];
                for k in 0..g.kernel {
                    let (lo, hi, off) = convt_range(k, g);
                    let mut s = T::zero();
                    for t in lo..hi {
                        s += xrow[t] * grow[(t as isize * g.stride as isize + off) as usize];
                    }
                    gw[(i * g.c_out + o) * g.kernel + k] += s;
                }
            }
        }
    }
}

/// Rotates consecutive pairs `(2j, 2j+1)` of every head by `pos · base^(−2j/head_dim)`.
pub(crate) fn rope_apply<T: Real>(
    data: &mut [T],
    width: usize,
    heads: usize,
    offset: usize,
    period: usize,
    base: T,
    inverse: bool,
) {
    let hd = width / heads;
    let half = hd / 2;
    let inv_freq: Vec<T> = (0..half).map(|j| base.powf(-T::of((2 * j) as f64 / hd as f64))).collect();
    for (r, row) in data.chunks_mut(width).enumerate() {
        let pos = T::of((offset + if period > 0 { r % period } else { r }) as f64);
        for (j, &f) in inv_freq.iter().enumerate() {
            let (s, c) = (pos * f).sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..heads {
                let i = h * hd + 2 * j;
                let (a, b) = (row[i], row[i + 1]);
                row[i] = a * c - b * s;
                row[i + 1] = a * s + b * c;
            }
        }
    }
}
