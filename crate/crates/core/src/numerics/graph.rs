//! Dynamic tape for reverse-mode differentiation.
//!
//! Nodes are appended in execution order, which is already a topological
//! order, so [`Graph::backward`] is a single reverse sweep over the tape.
//! Leaf gradients accumulate across calls until [`Graph::zero_grad`].

use std::sync::Arc;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// One attention problem inside a packed batch: a run of query rows that
/// attends to a run of key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Block-diagonal multi-head attention layout over packed rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub causal: bool,
    pub segments: Vec<AttnSegment>,
}

impl AttnLayout {
    /// Self-attention where every sequence attends within itself.
    pub fn self_attention(lengths: &[usize], heads: usize, causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let seg = AttnSegment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                seg
            })
            .collect();
        Self {
            heads,
            causal,
            segments,
        }
    }

    /// Cross-attention: query sequence `i` attends to memory sequence `i`.
    pub fn cross_attention(q_lengths: &[usize], k_lengths: &[usize], heads: usize) -> Self {
        assert_eq!(q_lengths.len(), k_lengths.len());
        let (mut qs, mut ks) = (0, 0);
        let segments = q_lengths
            .iter()
            .zip(k_lengths)
            .map(|(&ql, &kl)| {
                let seg = AttnSegment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                };
                qs += ql;
                ks += kl;
                seg
            })
            .collect();
        Self {
            heads,
            causal: false,
            segments,
        }
    }

    fn q_rows(&self) -> usize {
        self.segments.iter().map(|s| s.q_start + s.q_len).max().unwrap_or(0)
    }

    fn k_rows(&self) -> usize {
        self.segments.iter().map(|s| s.k_start + s.k_len).max().unwrap_or(0)
    }

    /// Number of keys visible to query `i` of a segment.
    fn visible(&self, seg: &AttnSegment, i: usize) -> usize {
        if self.causal {
            (i + 1 + seg.k_len.saturating_sub(seg.q_len)).min(seg.k_len)
        } else {
            seg.k_len
        }
    }
}

/// Rotary position table shared by every attention layer of a model.
#[derive(Clone, Debug)]
pub struct RotaryTable {
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary head_dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { head_dim, cos, sin }
    }

    pub fn max_positions(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        probs: Vec<f64>,
    },
    Rotary {
        x: Var,
        table: Arc<RotaryTable>,
        positions: Arc<Vec<usize>>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Small epsilon for row normalization of near-zero vectors.
const NORM_EPS: f64 = 1e-12;

/// The recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pub(crate) bound_params: Vec<(usize, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt lhs")?;
        let (n, k2) = self.matrix(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions disagree: [{m}, {k}] x [{n}, {k2}]^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMulNT(a, b)))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    // ---- normalization and probabilities -------------------------------

    /// Softmax along `axis`. Entries equal to `-inf` are masked and map to
    /// exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_values(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    /// Replaces entries where `keep` is false with `-inf`.
    pub fn mask_fill_neg_inf(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "mask of length {} for tensor {:?}",
                keep.len(),
                self.shape(x)
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MaskFill { x, keep }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, v) = self.value(logits).as_matrix();
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= v) {
            return Err(Error::Index(format!(
                "cross_entropy target {t} at row {i} out of range for {v} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        let loss = total / rows as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Divides every row by its Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (rows, d) = self.value(x).as_matrix();
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let n = dot(row, row).sqrt().max(NORM_EPS);
            norms[r] = n;
            for c in 0..d {
                out[r * d + c] = row[c] / n;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::RowNormalize { x, norms })
    }

    // ---- indexing -------------------------------------------------------

    /// Row gather over a matrix view; used for embedding lookups.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(src).as_matrix();
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&s[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            rg,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[idx[i]] += src[i]` into a zero matrix with `rows` rows.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = self.matrix(src, "scatter_add_rows")?;
        if idx.len() != n {
            return Err(Error::Shape(format!("{} indices for {n} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        let s = self.value(src).data();
        let mut out = vec![0.0; rows * d];
        for (i, &r) in idx.iter().enumerate() {
            axpy(1.0, &s[i * d..(i + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            rg,
            Op::ScatterAddRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix();
        if self.value(s).numel() != rows {
            return Err(Error::Shape(format!(
                "scale_rows: {} scales for {rows} rows",
                self.value(s).numel()
            )));
        }
        let xs = self.value(x).data();
        let ss = self.value(s).data();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] = xs[r * d + c] * ss[r];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, rg, Op::ScaleRows { x, s }))
    }

    /// Picks entries by flat (row-major) index.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.is_empty() {
            return Err(Error::Shape("pick with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("flat index {bad} out of range for {n}")));
        }
        let xs = self.value(x).data();
        let out = idx.iter().map(|&i| xs[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len()], out)?,
            rg,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean of each `(start, len)` row range.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix();
        if segments.is_empty() {
            return Err(Error::Shape("segment_mean with no segments".into()));
        }
        for &(s, l) in segments {
            if l == 0 || s + l > rows {
                return Err(Error::Shape(format!(
                    "segment ({s}, {l}) invalid for {rows} rows"
                )));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; segments.len() * d];
        for (k, &(s, l)) in segments.iter().enumerate() {
            let o = &mut out[k * d..(k + 1) * d];
            for r in s..s + l {
                axpy(1.0, &xs[r * d..(r + 1) * d], o);
            }
            o.iter_mut().for_each(|v| *v /= l as f64);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![segments.len(), d], out)?,
            rg,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
        ))
    }

    // ---- attention ------------------------------------------------------

    /// Scaled dot-product multi-head attention over packed rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Result<Var> {
        let (nq, d) = self.matrix(q, "attention q")?;
        let (nk, dk) = self.matrix(k, "attention k")?;
        let (nv, dv) = self.matrix(v, "attention v")?;
        if dk != d || dv != d || nk != nv {
            return Err(Error::Shape(format!(
                "attention q [{nq}, {d}], k [{nk}, {dk}], v [{nv}, {dv}]"
            )));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::Shape(format!(
                "width {d} not divisible by {} heads",
                layout.heads
            )));
        }
        if layout.q_rows() > nq || layout.k_rows() > nk {
            return Err(Error::Shape("attention layout exceeds packed rows".into()));
        }
        if layout.segments.iter().any(|s| s.k_len == 0 && s.q_len > 0) {
            return Err(Error::Shape("attention segment without keys".into()));
        }
        let heads = layout.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in &layout.segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg.q_len {
                    let qi = &qs[(seg.q_start + i) * d + off..][..dh];
                    let vis = layout.visible(seg, i);
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..vis {
                        let kj = &ks[(seg.k_start + j) * d + off..][..dh];
                        let s = dot(qi, kj) * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let o = &mut out[(seg.q_start + i) * d + off..][..dh];
                    let base = probs.len();
                    probs.resize(base + seg.k_len, 0.0);
                    for j in 0..vis {
                        let p = scores[j] / z;
                        probs[base + j] = p;
                        axpy(p, &vs[(seg.k_start + j) * d + off..][..dh], o);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![nq, d], out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Rotates interleaved coordinate pairs inside each head by an angle
    /// proportional to the row's position.
    pub fn rotary(
        &mut self,
        x: Var,
        heads: usize,
        table: Arc<RotaryTable>,
        positions: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let (rows, d) = self.matrix(x, "rotary")?;
        if heads * table.head_dim != d {
            return Err(Error::Shape(format!(
                "rotary table for head_dim {} with {heads} heads on width {d}",
                table.head_dim
            )));
        }
        if positions.len() != rows {
            return Err(Error::Shape(format!(
                "{} positions for {rows} rows",
                positions.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= table.max_positions()) {
            return Err(Error::Context {
                len: p + 1,
                window: table.max_positions(),
            });
        }
        let mut out = self.value(x).data().to_vec();
        rotate(&mut out, d, heads, &table, &positions, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            rg,
            Op::Rotary {
                x,
                table,
                positions,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every leaf that
    /// requires them, adding into any gradient already accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
                continue;
            }
            self.backward_node(id, &gout, &mut grads);
        }
        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let acc = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.value.numel()]);
            if let Some(g) = g {
                axpy(1.0, &g, acc);
            }
        }
        for node in self.nodes[n..].iter_mut() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).as_matrix().1;
                if self.requires_grad(*a) {
                    let ga = slot(grads, self, *a);
                    gemm_nt(gout, self.value(*b).data(), ga, m, n, k);
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, self, *b);
                    gemm_tn(self.value(*a).data(), gout, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).as_matrix().0;
                if self.requires_grad(*a) {
                    let ga = slot(grads, self, *a);
                    gemm_nn(gout, self.value(*b).data(), ga, m, n, k);
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, self, *b);
                    gemm_tn(gout, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for (x, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.requires_grad(x) {
                        axpy(sign, gout, slot(grads, self, x));
                    }
                }
            }
            Op::Sub(a, b) => {
                for (x, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.requires_grad(x) {
                        axpy(sign, gout, slot(grads, self, x));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = slot(grads, self, *a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = slot(grads, self, *b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => axpy(*c, gout, slot(grads, self, *a)),
            Op::AddScalar(a) | Op::Reshape(a) => axpy(1.0, gout, slot(grads, self, *a)),
            Op::Relu(a) => {
                let ga = slot(grads, self, *a);
                for i in 0..gout.len() {
                    if out[i] > 0.0 {
                        ga[i] += gout[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, self, *a);
                for i in 0..gout.len() {
                    ga[i] += gout[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Silu(a) => {
                let xs = self.value(*a).data();
                let ga = slot(grads, self, *a);
                for i in 0..gout.len() {
                    let s = sigmoid(xs[i]);
                    ga[i] += gout[i] * s * (1.0 + xs[i] * (1.0 - s));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let gx = slot(grads, self, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..len).map(|j| gout[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += out[at(j)] * (gout[at(j)] - s);
                        }
                    }
                }
            }
            Op::MaskFill { x, keep } => {
                let gx = slot(grads, self, *x);
                for i in 0..gout.len() {
                    if keep[i] {
                        gx[i] += gout[i];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let rows = gout.len() / d;
                let g = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = slot(grads, self, *gain);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = slot(grads, self, *bias);
                    for r in 0..rows {
                        axpy(1.0, &gout[r * d..(r + 1) * d], gb);
                    }
                }
                if self.requires_grad(*x) {
                    let gx = slot(grads, self, *x);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &gout[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = gr[c] * g[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, hr) / d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let v = probs.len() / rows;
                let scale = gout[0] / rows as f64;
                let gl = slot(grads, self, *logits);
                for r in 0..rows {
                    for c in 0..v {
                        gl[r * v + c] += scale * probs[r * v + c];
                    }
                    gl[r * v + targets[r]] -= scale;
                }
            }
            Op::GatherRows { src, idx } => {
                let d = node.value.as_matrix().1;
                let gs = slot(grads, self, *src);
                for (i, &r) in idx.iter().enumerate() {
                    axpy(1.0, &gout[i * d..(i + 1) * d], &mut gs[r * d..(r + 1) * d]);
                }
            }
            Op::ScatterAddRows { src, idx } => {
                let d = node.value.as_matrix().1;
                let gs = slot(grads, self, *src);
                for (i, &r) in idx.iter().enumerate() {
                    axpy(1.0, &gout[r * d..(r + 1) * d], &mut gs[i * d..(i + 1) * d]);
                }
            }
            Op::ScaleRows { x, s } => {
                let d = node.value.as_matrix().1;
                let rows = gout.len() / d;
                if self.requires_grad(*x) {
                    let sv = self.value(*s).data();
                    let gx = slot(grads, self, *x);
                    for r in 0..rows {
                        axpy(sv[r], &gout[r * d..(r + 1) * d], &mut gx[r * d..(r + 1) * d]);
                    }
                }
                if self.requires_grad(*s) {
                    let xv = self.value(*x).data();
                    let gsv = slot(grads, self, *s);
                    for r in 0..rows {
                        gsv[r] += dot(&gout[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Pick { x, idx } => {
                let gx = slot(grads, self, *x);
                for (i, &j) in idx.iter().enumerate() {
                    gx[j] += gout[i];
                }
            }
            Op::Sum(a) => {
                let ga = slot(grads, self, *a);
                ga.iter_mut().for_each(|v| *v += gout[0]);
            }
            Op::Mean(a) => {
                let ga = slot(grads, self, *a);
                let c = gout[0] / ga.len() as f64;
                ga.iter_mut().for_each(|v| *v += c);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, gout, grads),
            Op::Rotary {
                x,
                table,
                positions,
            } => {
                let d = node.value.as_matrix().1;
                let heads = d / table.head_dim;
                let mut g = gout.to_vec();
                rotate(&mut g, d, heads, table, positions, -1.0);
                axpy(1.0, &g, slot(grads, self, *x));
            }
            Op::SegmentMean { x, segments } => {
                let d = node.value.as_matrix().1;
                let gx = slot(grads, self, *x);
                for (k, &(s, l)) in segments.iter().enumerate() {
                    let go = &gout[k * d..(k + 1) * d];
                    for r in s..s + l {
                        axpy(1.0 / l as f64, go, &mut gx[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                let d = node.value.as_matrix().1;
                let gx = slot(grads, self, *x);
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let yg = dot(y, go);
                    for c in 0..d {
                        gx[r * d + c] += (go[c] - y[c] * yg) / n;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).as_matrix().1;
        let heads = layout.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qs.len()];
        let mut gk = vec![0.0; ks.len()];
        let mut gv = vec![0.0; vs.len()];
        let mut dp = Vec::new();
        let mut cursor = 0;
        for seg in &layout.segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg.q_len {
                    let row = seg.q_start + i;
                    let go = &gout[row * d + off..][..dh];
                    let p = &probs[cursor..cursor + seg.k_len];
                    cursor += seg.k_len;
                    let vis = layout.visible(seg, i);
                    dp.clear();
                    for j in 0..vis {
                        let kr = seg.k_start + j;
                        dp.push(dot(go, &vs[kr * d + off..][..dh]));
                        axpy(p[j], go, &mut gv[kr * d + off..][..dh]);
                    }
                    let s: f64 = (0..vis).map(|j| p[j] * dp[j]).sum();
                    let qi = &qs[row * d + off..][..dh];
                    for j in 0..vis {
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kr = seg.k_start + j;
                        axpy(ds, &ks[kr * d + off..][..dh], &mut gq[row * d + off..][..dh]);
                        axpy(ds, qi, &mut gk[kr * d + off..][..dh]);
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.requires_grad(var) {
                axpy(1.0, &g, slot(grads, self, var));
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], g: &Graph, v: Var) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; g.nodes[v.0].value.numel()])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rotate(data: &mut [f64], d: usize, heads: usize, table: &RotaryTable, positions: &[usize], sign: f64) {
    let dh = table.head_dim;
    let half = dh / 2;
    for (r, &p) in positions.iter().enumerate() {
        let cos = &table.cos[p * half..(p + 1) * half];
        let sin = &table.sin[p * half..(p + 1) * half];
        for h in 0..heads {
            let base = r * d + h * dh;
            for i in 0..half {
                let (a, b) = (data[base + 2 * i], data[base + 2 * i + 1]);
                let (c, s) = (cos[i], sign * sin[i]);
                data[base + 2 * i] = a * c - b * s;
                data[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Softmax of plain values along `axis`, shared by the graph op and by
/// callers that only need numbers.
pub fn softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank().max(1) {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let shape = if x.rank() == 0 { vec![1] } else { x.shape().to_vec() };
    let (outer, len, inner) = axis_split(&shape, axis);
    let xs = x.data();
    if let Some(bad) = xs.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
        return Err(Error::NonFinite(format!("softmax input contains {bad}")));
    }
    let mut out = vec![0.0; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Degenerate(format!(
                    "every entry of softmax slice {o}/{i} is -inf"
                )));
            }
            let mut z = 0.0;
            for j in 0..len {
                let e = (xs[at(j)] - max).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
