//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s together with
//! whatever the backward rule needs (softmax outputs, layer-norm statistics,
//! dropout masks). Nodes are appended in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep. A tape supports exactly one backward pass.
//!
//! Most primitives treat a tensor as a matrix: the last extent is the column
//! count and everything before it is flattened into rows. Every primitive
//! rejects non-finite results instead of propagating them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{exp, sqrt, tanh};
use crate::rng::SplitMix64;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "extents must be positive",
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "element count does not match data length",
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[1 × n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        assert!(!values.is_empty());
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn same_shape_zeros(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape.clone(),
            reason: "expected a rank-2 tensor",
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Plain matrix product without a tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax over each length-`n` chunk of `data`.
pub fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = exp(s - max);
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    ScaleRows(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. `None` when `var` does
    /// not require grad; a zero tensor when it does but is unreachable.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.requires_grad(*x) || self.requires_grad(*gamma) || self.requires_grad(*beta)
            }
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.requires_grad(*v)),
            Op::Affine(a, _)
            | Op::MulConst(a, _)
            | Op::ScaleRows(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Reshape(a) => self.requires_grad(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(self.mismatch(op, a, b));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    /// Elementwise sum. `b` may instead be a single row (`numel == cols(a)`)
    /// broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            let out = self.zip_with("add", a, b, |x, y| x + y)?;
            return self.push(out, Op::Add(a, b), "add");
        }
        let cols = ta.cols();
        if tb.len() != cols {
            return Err(self.mismatch("add", a, b));
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(&tb.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRowBroadcast(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Multiply every element of `x` by the single-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("scale_by", x, s));
        }
        let k = self.value(s).data[0];
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * k).collect(),
        };
        self.push(out, Op::ScaleBy(x, s), "scale_by")
    }

    /// `alpha · x + beta`
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| alpha * v + beta).collect(),
        };
        self.push(out, Op::Affine(x, alpha), "affine")
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape != factor.shape {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: tx.shape.clone(),
                right: factor.shape.clone(),
            });
        }
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().zip(&factor.data).map(|(a, b)| a * b).collect(),
        };
        self.push(out, Op::MulConst(x, factor.data.clone()), "mul_const")
    }

    /// Scale row `r` of `x` by the constant `weights[r]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: tx.shape.clone(),
                right: vec![weights.len()],
            });
        }
        let cols = tx.cols();
        let mut out = tx.clone();
        for (row, w) in out.data.chunks_mut(cols).zip(weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        self.push(out, Op::ScaleRows(x, weights.to_vec()), "scale_rows")
    }

    /// Inverted dropout: zero each element with probability `p` and scale
    /// survivors by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SplitMix64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(alloc::format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor { shape, data: mask };
        self.mul_const(x, &mask)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| f(*v)).collect(),
        };
        self.push(out, op, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid_scalar, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, tanh, Op::Tanh(x), "tanh")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, gelu_scalar, Op::Gelu(x), "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x), "relu")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: softmax_rows(&tx.data, tx.cols()),
        };
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Layer normalization over the last axis followed by `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d < 2 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: tx.shape.clone(),
                reason: "normalized axis needs at least two elements",
            });
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("layer_norm eps must be positive, got {eps}")));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let src = &tx.data[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / sqrt(var + eps);
            inv_std[r] = inv;
            for c in 0..d {
                let xh = (src[c] - mean) * inv;
                xhat[r * d + c] = xh;
                out[r * d + c] = tg.data[c] * xh + tb.data[c];
            }
        }
        let out = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims(tx, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = tx.data[i * n + j];
            }
        }
        let out = Tensor::new(&[n, m], out)?;
        self.push(out, Op::Transpose(x), "transpose")
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims(tx, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&tx.data[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(&[m, len], out)?;
        self.push(out, Op::SliceCols(x, start), "slice_cols")
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims(tx, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: start + len,
                len: m,
            });
        }
        let out = Tensor::new(&[len, n], tx.data[start * n..(start + len) * n].to_vec())?;
        self.push(out, Op::SliceRows(x, start), "slice_rows")
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (m, _) = matrix_dims(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, n) = matrix_dims(self.value(first), "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            out.extend_from_slice(&self.value(p).data);
            m += pm;
        }
        let out = Tensor::new(&[m, n], out)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Mean over rows: `[n × d] -> [1 × d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; cols];
        for row in tx.data.chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let out = Tensor::new(&[1, cols], out)?;
        self.push(out, Op::MeanRows(x), "mean_rows")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data.clone();
        let out = Tensor::new(shape, data).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            left: self.shape(x).to_vec(),
            right: shape.to_vec(),
        })?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every node that requires grad and is reachable from `loss` receives
    /// `∂loss/∂node`; unreachable leaves that require grad get zeros. The
    /// tape is consumed and a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor {
                shape: self.shape(loss).to_vec(),
                data: vec![1.0],
            });
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if grads[i].is_none() {
                    grads[i] = Some(node.value.same_shape_zeros());
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(contribution),
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.shape(v).to_vec(),
                    data: contribution.to_vec(),
                })
            }
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(self.value(v).same_shape_zeros());
        }
        f(&mut slot.as_mut().unwrap().data);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                self.accumulate_with(grads, *a, |ga| gemm_nt(gd, &tb.data, ga, m, k, n));
                self.accumulate_with(grads, *b, |gb| gemm_tn(&ta.data, gd, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::AddRowBroadcast(a, b) => {
                self.accumulate(grads, *a, gd);
                let cols = self.value(*b).len();
                self.accumulate_with(grads, *b, |gb| {
                    for row in gd.chunks(cols) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate_with(grads, *b, |gb| {
                    for (o, v) in gb.iter_mut().zip(gd) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *o += gv * bv;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(gd).zip(va) {
                        *o += gv * av;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let k = self.value(*s).data[0];
                let vx = &self.value(*x).data;
                self.accumulate_with(grads, *x, |gx| {
                    for (o, gv) in gx.iter_mut().zip(gd) {
                        *o += gv * k;
                    }
                });
                let ds: f64 = gd.iter().zip(vx).map(|(a, b)| a * b).sum();
                self.accumulate_with(grads, *s, |gs| gs[0] += ds);
            }
            Op::Affine(x, alpha) => {
                self.accumulate_with(grads, *x, |gx| {
                    for (o, gv) in gx.iter_mut().zip(gd) {
                        *o += alpha * gv;
                    }
                });
            }
            Op::MulConst(x, factor) => {
                self.accumulate_with(grads, *x, |gx| {
                    for ((o, gv), f) in gx.iter_mut().zip(gd).zip(factor) {
                        *o += gv * f;
                    }
                });
            }
            Op::ScaleRows(x, weights) => {
                let cols = g.cols();
                self.accumulate_with(grads, *x, |gx| {
                    for ((orow, grow), w) in gx.chunks_mut(cols).zip(gd.chunks(cols)).zip(weights) {
                        for (o, gv) in orow.iter_mut().zip(grow) {
                            *o += gv * w;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => self.accumulate_with(grads, *x, |gx| {
                for ((o, gv), yv) in gx.iter_mut().zip(gd).zip(y) {
                    *o += gv * yv * (1.0 - yv);
                }
            }),
            Op::Tanh(x) => self.accumulate_with(grads, *x, |gx| {
                for ((o, gv), yv) in gx.iter_mut().zip(gd).zip(y) {
                    *o += gv * (1.0 - yv * yv);
                }
            }),
            Op::Gelu(x) => {
                let vx = &self.value(*x).data;
                self.accumulate_with(grads, *x, |gx| {
                    for ((o, gv), xv) in gx.iter_mut().zip(gd).zip(vx) {
                        *o += gv * gelu_grad(*xv);
                    }
                })
            }
            Op::Relu(x) => {
                let vx = &self.value(*x).data;
                self.accumulate_with(grads, *x, |gx| {
                    for ((o, gv), xv) in gx.iter_mut().zip(gd).zip(vx) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                self.accumulate_with(grads, *x, |gx| {
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gam = &self.value(*gamma).data;
                self.accumulate_with(grads, *gamma, |gg| {
                    for (grow, xrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), xh) in gg.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xh;
                        }
                    }
                });
                self.accumulate_with(grads, *beta, |gb| {
                    for grow in gd.chunks(d) {
                        for (o, gv) in gb.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
                self.accumulate_with(grads, *x, |gx| {
                    let mut gxhat = vec![0.0; d];
                    for (r, (orow, grow)) in gx.chunks_mut(d).zip(gd.chunks(d)).enumerate() {
                        let xrow = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            gxhat[c] = grow[c] * gam[c];
                        }
                        let s1: f64 = gxhat.iter().sum();
                        let s2: f64 = gxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            orow[c] += k * (d as f64 * gxhat[c] - s1 - xrow[c] * s2);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (g.shape[0], g.shape[1]);
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[j * m + i] += gd[i * n + j];
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let n = self.value(*x).shape[1];
                let len = g.shape[1];
                self.accumulate_with(grads, *x, |gx| {
                    for (r, grow) in gd.chunks(len).enumerate() {
                        for (o, gv) in gx[r * n + start..r * n + start + len].iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let n = g.shape[1];
                self.accumulate_with(grads, *x, |gx| {
                    for (o, gv) in gx[start * n..start * n + gd.len()].iter_mut().zip(gd) {
                        *o += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    self.accumulate_with(grads, p, |gp| {
                        for (r, prow) in gp.chunks_mut(w).enumerate() {
                            for (o, gv) in prow.iter_mut().zip(&gd[r * total + offset..r * total + offset + w]) {
                                *o += gv;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, &gd[offset..offset + len]);
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let inv = 1.0 / rows as f64;
                self.accumulate_with(grads, *x, |gx| {
                    for row in gx.chunks_mut(cols) {
                        for (o, gv) in row.iter_mut().zip(gd) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate_with(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gv));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let a = Tensor::row(&[1.0, 2.0]);
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transposed() {
        let mut rng = SplitMix64::new(5);
        let a = Tensor::new(&[3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(&[4, 2], (0..8).map(|_| rng.normal()).collect()).unwrap();
        let mut tape = Tape::new();
        let va = tape.param(a.clone()).unwrap();
        let vb = tape.constant(b.clone()).unwrap();
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        let expected = matmul(&Tensor::ones(&[3, 2]), &{
            let mut t = Tape::new();
            let v = t.constant(b.clone()).unwrap();
            let tr = t.transpose(v).unwrap();
            t.value(tr).clone()
        })
        .unwrap();
        assert_close(grads.get(va).unwrap().data(), expected.data(), 1e-12);

        let err = grad_check(
            |t, x| {
                let vb = t.constant(b.clone())?;
                let c = t.matmul(x, vb)?;
                t.sum(c)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_examples() {
        assert_close(&softmax_rows(&[0.0, 0.0, 0.0], 3), &[1.0 / 3.0; 3], 1e-15);
        assert_close(&softmax_rows(&[1000.0, 1000.0], 2), &[0.5, 0.5], 1e-15);
        assert_close(
            &softmax_rows(&[1.0, 2.0, 3.0], 3),
            &[0.09003057, 0.24472847, 0.66524096],
            5e-9,
        );
    }

    #[test]
    fn layer_norm_examples() {
        let run = |x: &[f64], gamma: f64, beta: f64| {
            let mut t = Tape::new();
            let d = x.len();
            let vx = t.constant(Tensor::row(x)).unwrap();
            let g = t.constant(Tensor::full(&[d], gamma)).unwrap();
            let b = t.constant(Tensor::full(&[d], beta)).unwrap();
            let y = t.layer_norm(vx, g, b, 1e-5).unwrap();
            t.value(y).data().to_vec()
        };
        assert_close(&run(&[1.0, 1.0, 1.0, 1.0], 1.0, 0.0), &[0.0; 4], 0.0);
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_close(&run(&[-1.0, 1.0], 1.0, 0.0), &[-s, s], 1e-15);
        assert_close(&run(&[3.0, -2.0, 7.0], 0.0, 5.0), &[5.0; 3], 0.0);
    }

    #[test]
    fn layer_norm_rejects_degenerate_axis() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[1.0])).unwrap();
        let g = t.constant(Tensor::ones(&[1])).unwrap();
        let b = t.constant(Tensor::zeros(&[1])).unwrap();
        assert!(t.layer_norm(x, g, b, 1e-5).is_err());
        let x = t.constant(Tensor::row(&[1.0, 2.0])).unwrap();
        let g = t.constant(Tensor::ones(&[2])).unwrap();
        let b = t.constant(Tensor::zeros(&[2])).unwrap();
        assert!(t.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_191_990_6).abs() < 1e-10);
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[-2.0, 0.0, 3.0])).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
        let big = t.constant(Tensor::row(&[-800.0, 800.0])).unwrap();
        let s = t.sigmoid(big).unwrap();
        assert!(t.value(s).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors_and_unreachable_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[1.0, 2.0])).unwrap();
        let unused = t.param(Tensor::row(&[5.0])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
        assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(Tensor::row(&[f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let x = t.constant(Tensor::row(&[1e300])).unwrap();
        assert!(matches!(t.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn dropout_eval_identity_and_scaling() {
        let mut rng = SplitMix64::new(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[1, 10_000])).unwrap();
        let same = t.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
        let d = t.dropout(x, 0.1, &mut rng).unwrap();
        let vals = t.value(d).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.03);
    }

    #[test]
    fn slicing_and_concat_roundtrip_gradients() {
        let mut rng = SplitMix64::new(9);
        let x = Tensor::new(&[3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let err = grad_check(
            |t, x| {
                let a = t.slice_cols(x, 0, 2)?;
                let b = t.slice_cols(x, 2, 2)?;
                let ab = t.mul(a, b)?;
                let r = t.slice_rows(x, 1, 2)?;
                let rt = t.transpose(r)?;
                let j = t.concat_cols(&[ab, a])?;
                let k = t.concat_rows(&[j, j])?;
                let m = t.mean_rows(k)?;
                let q = t.matmul(m, rt)?;
                let q = t.tanh(q)?;
                t.sum(q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
