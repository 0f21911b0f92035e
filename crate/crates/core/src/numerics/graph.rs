//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] owns every intermediate value. Operations return [`Var`]
//! handles and fail if a shape is wrong or a result is not finite.
//! Reductions run in a fixed sequential order so that results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::numerics::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Scalar, Tensor};

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Mask>,
        probs: Vec<T>,
    },
    Rotary {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        x: Var,
        deriv: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape.
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    attention_flops: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = c::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = c::<T>(0.044715);
    let half = c::<T>(0.5);
    let one = T::one();
    let inner = k * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * k * (one + c::<T>(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            attention_flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add count of every attention call so far: `4·d` per
    /// visible (query, key) pair, covering scores and the value mix.
    pub fn attention_flops(&self) -> u64 {
        self.attention_flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let kind = if requires_grad { kind } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node; differentiable iff the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value.with_requires_grad(true))
    }

    /// Stop-gradient: same value, no adjoint flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone().with_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(shape_err(op, t.shape(), &[]));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, d]` (or `[d]`) row to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.mat("add_row", a)?;
        let r = self.value(row);
        if r.numel() != d {
            return Err(shape_err("add_row", self.value(a).shape(), r.shape()));
        }
        let rd = r.data();
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend(ad[i * d..(i + 1) * d].iter().zip(rd).map(|(&x, &y)| x + y));
        }
        self.push("add_row", Tensor::from_parts(vec![n, d], out), Op::AddRow(a, row), &[a, row])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", value, Op::Silu(a), &[a])
    }

    /// Row-wise normalization with no affine terms. A constant row maps to
    /// zeros because the variance is guarded by [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.mat("layer_norm", a)?;
        let x = self.value(a).data();
        let inv_d = c::<T>(1.0 / d as f64);
        let eps = c::<T>(LAYER_NORM_EPS);
        let mut out = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var * inv_d;
            let r = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mean) * r));
            rstd.push(r);
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![n, d], out),
            Op::LayerNorm { x: a, rstd },
            &[a],
        )
    }

    /// Row softmax with max subtraction. Masked entries are excluded and
    /// come out as zero; a fully masked row is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let (n, d) = self.mat("softmax", a)?;
        if let Some(m) = mask {
            if m.query_len() != n || m.key_len() != d {
                return Err(shape_err("softmax", &[n, d], &[m.query_len(), m.key_len()]));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let visible = |j: usize| mask.is_none_or(|m| m.get(i, j));
            let mut max = T::neg_infinity();
            for j in (0..d).filter(|&j| visible(j)) {
                max = max.max(x[i * d + j]);
            }
            let mut sum = T::zero();
            for j in (0..d).filter(|&j| visible(j)) {
                let e = (x[i * d + j] - max).exp();
                out[i * d + j] = e;
                sum = sum + e;
            }
            if sum > T::zero() {
                for v in &mut out[i * d..(i + 1) * d] {
                    *v = *v / sum;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(vec![n, d], out), Op::Softmax { x: a }, &[a])
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q: [n_q, d]`, `k, v: [n_k, d]`, `d` split into `heads` contiguous
    /// slices. Keys hidden by `mask` are skipped entirely, so their values
    /// cannot influence the output in any bit. Rows with no visible key
    /// output zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
        let (nq, d) = self.mat("attention", q)?;
        let (nk, dk) = self.mat("attention", k)?;
        let (nv, dv) = self.mat("attention", v)?;
        if dk != d || dv != d || nv != nk {
            return Err(shape_err("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(m) = mask {
            if m.query_len() != nq || m.key_len() != nk {
                return Err(shape_err("attention", &[nq, nk], &[m.query_len(), m.key_len()]));
            }
        }
        let hd = d / heads;
        let scale = c::<T>(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); nq * d];
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut visible = Vec::with_capacity(nk);
        let mut scores = vec![T::zero(); nk];
        let mut pairs = 0u64;
        for i in 0..nq {
            visible.clear();
            visible.extend((0..nk).filter(|&j| mask.is_none_or(|m| m.get(i, j))));
            pairs += visible.len() as u64;
            if visible.is_empty() {
                continue;
            }
            for h in 0..heads {
                let qi = &qd[i * d + h * hd..i * d + (h + 1) * hd];
                let mut max = T::neg_infinity();
                for &j in &visible {
                    let kj = &kd[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut s = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s = s + a * b;
                    }
                    s = s * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = T::zero();
                for &j in &visible {
                    let e = (scores[j] - max).exp();
                    scores[j] = e;
                    sum = sum + e;
                }
                let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let orow = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
                for &j in &visible {
                    let p = scores[j] / sum;
                    prow[j] = p;
                    let vj = &vd[j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
        }
        self.attention_flops += 4 * d as u64 * pairs;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            mask: mask.cloned(),
            probs,
        };
        self.push("attention", Tensor::from_parts(vec![nq, d], out), op, &[q, k, v])
    }

    /// Rotary position embedding. Within each head, adjacent pairs
    /// `(2i, 2i+1)` rotate by `position · base^(-2i/head_dim)`.
    pub fn rotary(&mut self, x: Var, positions: &[f64], heads: usize, base: f64) -> Result<Var> {
        let (n, d) = self.mat("rotary", x)?;
        if positions.len() != n {
            return Err(shape_err("rotary", &[n, d], &[positions.len()]));
        }
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rotary needs an even head width, got width {d} over {heads} heads"
            )));
        }
        let hd = d / heads;
        let half = hd / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for i in 0..half {
                let theta = p * base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(c::<T>(theta.cos()));
                sin.push(c::<T>(theta.sin()));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for h in 0..heads {
                for i in 0..half {
                    let (cs, sn) = (cos[r * half + i], sin[r * half + i]);
                    let at = r * d + h * hd + 2 * i;
                    let (a, b) = (xd[at], xd[at + 1]);
                    out[at] = a * cs - b * sn;
                    out[at + 1] = a * sn + b * cs;
                }
            }
        }
        let op = Op::Rotary { x, heads, cos, sin };
        self.push("rotary", Tensor::from_parts(vec![n, d], out), op, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (n, _) = self.mat("concat_cols", *first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, w) = self.mat("concat_cols", p)?;
            if m != n {
                return Err(shape_err("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, _) = self.mat("slice_rows", x)?;
        if start > end || end > n {
            return Err(shape_err("slice_rows", self.value(x).shape(), &[start, end]));
        }
        let value = self.value(x).slice_rows(start, end);
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.mat("slice_cols", x)?;
        if start > end || end > d {
            return Err(shape_err("slice_cols", self.value(x).shape(), &[start, end]));
        }
        let w = end - start;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&xd[i * d + start..i * d + end]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![n, w], out), Op::SliceCols { x, start }, &[x])
    }

    /// Row lookup, as for an embedding table.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = self.mat("gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", self.value(x).shape(), &[bad]));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let op = Op::GatherRows { x, index: index.to_vec() };
        self.push("gather_rows", Tensor::from_parts(vec![index.len(), d], out), op, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let m = t.sum() / c::<T>(t.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum of squares.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Element-wise map with a caller-supplied derivative. Nothing checks
    /// that `df` is really the derivative of `f`.
    pub fn custom_unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(x);
        let value = t.map(&f);
        let deriv = t.data().iter().map(|&v| df(v)).collect();
        self.push("custom_unary", value, Op::Custom { x, deriv }, &[x])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(lv.shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(g.data_mut());
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |ga| gemm_bt_acc(g, bd, ga, m, n, k));
                self.accumulate_with(grads, *b, |gb| gemm_at_acc(ad, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, gy.zip_map(bd, "mul", |x, y| x * y)?);
                self.accumulate(grads, *b, gy.zip_map(ad, "mul", |x, y| x * y)?);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gy.clone());
                let d = self.value(*a).cols();
                self.accumulate_with(grads, *row, |gr| {
                    for chunk in g.chunks(d) {
                        for (x, &y) in gr.iter_mut().zip(chunk) {
                            *x = *x + y;
                        }
                    }
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gy.map(|x| x * s));
            }
            Op::Gelu(a) => {
                let d = gy.zip_map(self.value(*a), "gelu", |g, x| g * gelu_parts(x).1)?;
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = gy.zip_map(self.value(*a), "silu", |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let d = node.value.cols();
                let inv_d = c::<T>(1.0 / d as f64);
                let mut out = vec![T::zero(); y.len()];
                for (i, &r) in rstd.iter().enumerate() {
                    let (gr, yr) = (&g[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
                    let mut mg = T::zero();
                    let mut mgy = T::zero();
                    for (&a, &b) in gr.iter().zip(yr) {
                        mg = mg + a;
                        mgy = mgy + a * b;
                    }
                    mg = mg * inv_d;
                    mgy = mgy * inv_d;
                    for j in 0..d {
                        out[i * d + j] = r * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), out));
            }
            Op::Softmax { x } => {
                let p = node.value.data();
                let d = node.value.cols();
                let mut out = vec![T::zero(); p.len()];
                for i in 0..node.value.rows() {
                    let (pr, gr) = (&p[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                    let mut dot = T::zero();
                    for (&a, &b) in pr.iter().zip(gr) {
                        dot = dot + a * b;
                    }
                    for j in 0..d {
                        out[i * d + j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), out));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, mask.as_ref(), probs, g, grads),
            Op::Rotary { x, heads, cos, sin } => {
                let (n, d) = (node.value.rows(), node.value.cols());
                let hd = d / heads;
                let half = hd / 2;
                let mut out = vec![T::zero(); n * d];
                for r in 0..n {
                    for h in 0..*heads {
                        for i in 0..half {
                            let (cs, sn) = (cos[r * half + i], sin[r * half + i]);
                            let at = r * d + h * hd + 2 * i;
                            let (a, b) = (g[at], g[at + 1]);
                            out[at] = a * cs + b * sn;
                            out[at + 1] = b * cs - a * sn;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, d], out));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let sl = gy.slice_rows(start, start + rows).reshape(self.value(p).shape().to_vec())?;
                    self.accumulate(grads, p, sl);
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = gy.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate_with(grads, p, |gp| {
                        for (i, chunk) in gp.chunks_mut(w).enumerate() {
                            for (x, &y) in chunk.iter_mut().zip(&g[i * total + start..i * total + start + w]) {
                                *x = *x + y;
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.value(*x).cols();
                let off = start * d;
                self.accumulate_with(grads, *x, |gx| {
                    for (a, &b) in gx[off..off + g.len()].iter_mut().zip(g) {
                        *a = *a + b;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).cols();
                let w = gy.cols();
                self.accumulate_with(grads, *x, |gx| {
                    for (i, chunk) in g.chunks(w).enumerate() {
                        for (a, &b) in gx[i * d + start..i * d + start + w].iter_mut().zip(chunk) {
                            *a = *a + b;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = self.value(*x).cols();
                self.accumulate_with(grads, *x, |gx| {
                    for (r, &i) in index.iter().enumerate() {
                        for (a, &b) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a = *a + b;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                let t = Tensor::filled(self.value(*x).shape().to_vec(), s);
                self.accumulate(grads, *x, t);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = g[0] / c::<T>(n as f64);
                let t = Tensor::filled(self.value(*x).shape().to_vec(), s);
                self.accumulate(grads, *x, t);
            }
            Op::Custom { x, deriv } => {
                let d = Tensor::from_parts(gy.shape().to_vec(), g.iter().zip(deriv).map(|(&a, &b)| a * b).collect());
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Mask>,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (nq, d) = (self.value(q).rows(), self.value(q).cols());
        let nk = self.value(k).rows();
        let hd = d / heads;
        let scale = c::<T>(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); nk];
        let mut visible = Vec::with_capacity(nk);
        for i in 0..nq {
            visible.clear();
            visible.extend((0..nk).filter(|&j| mask.is_none_or(|m| m.get(i, j))));
            for h in 0..heads {
                let prow = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let go = &g[i * d + h * hd..i * d + (h + 1) * hd];
                let mut dot = T::zero();
                for &j in &visible {
                    let vj = &vd[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut s = T::zero();
                    for (&a, &b) in go.iter().zip(vj) {
                        s = s + a * b;
                    }
                    dp[j] = s;
                    dot = dot + prow[j] * s;
                    for (x, &y) in gv[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(go) {
                        *x = *x + prow[j] * y;
                    }
                }
                let qi = &qd[i * d + h * hd..i * d + (h + 1) * hd];
                for &j in &visible {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let kj = &kd[j * d + h * hd..j * d + (h + 1) * hd];
                    for (x, &y) in gq[i * d + h * hd..i * d + (h + 1) * hd].iter_mut().zip(kj) {
                        *x = *x + ds * y;
                    }
                    for (x, &y) in gk[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(qi) {
                        *x = *x + ds * y;
                    }
                }
            }
        }
        self.accumulate(grads, q, Tensor::from_parts(vec![nq, d], gq));
        self.accumulate(grads, k, Tensor::from_parts(vec![nk, d], gk));
        self.accumulate(grads, v, Tensor::from_parts(vec![nk, d], gv));
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss through differentiable paths.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x, None).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[7.0; 4])).unwrap();
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let l = g.sum_sq(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_is_constant() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -3.0])).unwrap();
        let sx = g.detach(x);
        let p = g.mul(sx, x).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, -3.0]);
        assert!(grads.get(sx).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1e300])).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn fully_masked_attention_row_is_zero() {
        let mut g = Graph::new();
        let q = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = Mask::from_fn(crate::masks::MaskKind::VideoSelf, 2, 2, |i, j| i == 1 && j == 0);
        let y = g.attention(q, q, q, 1, Some(&m)).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
        assert_eq!(g.value(y).row(1), &[1.0, 2.0]);
        assert_eq!(g.attention_flops(), 4 * 2);
    }

    #[test]
    fn rotary_preserves_norm() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 0.0])).unwrap();
        let y = g.rotary(x, &[0.0, 3.7], 1, 100.0).unwrap();
        assert_eq!(g.value(y).row(0), g.value(x).row(0));
        let n0: f64 = g.value(x).row(1).iter().map(|v| v * v).sum();
        let n1: f64 = g.value(y).row(1).iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
    }
}
