// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape of tensor operations and its reverse pass.
//!
//! A [`Graph`] owns every intermediate value. Operations append a node and
//! return a [`Var`] handle; node ids are assigned in creation order, which
//! is a topological order, so [`Graph::backward`] simply walks the tape in
//! reverse.

use super::tensor::{gemm, Float, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax(Var, usize),
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<usize>, rows: Vec<usize> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
    OverwriteRows { x: Var, rows: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape. Not shared across threads; independent graphs may run
/// concurrently.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a node that requires grad. `None` means the loss does
    /// not depend on it at all.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, materializing zeros for nodes the loss does not reach.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Splits a shape around `axis` into (outer, dim, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let rank = out_shape.len();
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    // Odometer over output indices; the innermost axis is copied in a tight loop.
    loop {
        let (len, st) = (out_shape[last], src_strides[last]);
        for j in 0..len {
            out.push(data[off + j * st]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn transpose_last2<T: Copy>(data: &[T], shape: &[usize]) -> Vec<T> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (m * n).max(1);
    let mut out = Vec::with_capacity(data.len());
    for b in 0..batch {
        let base = b * m * n;
        for j in 0..n {
            for i in 0..m {
                out.push(data[base + i * n + j]);
            }
        }
    }
    out
}

fn gelu_scalar<T: Float>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x);
    (y, dy)
}

/// Rotation tables for pairs `(2i, 2i+1)` at each position:
/// angle = pos * base^(-2i/dim).
fn rope_tables<T: Float>(positions: &[usize], dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let inv_freq = base.powf(-(2.0 * i as f64) / dim as f64);
            let a = p as f64 * inv_freq;
            cos.push(T::lit(a.cos()));
            sin.push(T::lit(a.sin()));
        }
    }
    (cos, sin)
}

/// Apply the rotation (or its inverse when `inverse`) to `[..., seq, dim]` data.
fn rope_apply<T: Float>(data: &[T], seq: usize, dim: usize, cos: &[T], sin: &[T], inverse: bool) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); data.len()];
    for (r, (src, dst)) in data.chunks(dim).zip(out.chunks_mut(dim)).enumerate() {
        let pos = r % seq;
        for i in 0..half {
            let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
            let s = if inverse { -s } else { s };
            let (x0, x1) = (src[2 * i], src[2 * i + 1]);
            dst[2 * i] = x0 * c - x1 * s;
            dst[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    out
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `[..., m, k] @ [..., k, n]`; leading dimensions must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    MatRef::rm(&av[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::rm(&bv[i * k * n..(i + 1) * k * n], k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias over rows, mask over batch/head). The only broadcast supported.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let w = self.value(b).numel().max(1);
        let bv = self.value(b).data();
        let x = self.value(a);
        let data = x.data().iter().enumerate().map(|(i, &p)| p + bv[i % w]).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddBroadcast(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", format!("rank {} < 2", s.len())));
        }
        let data = transpose_last2(self.value(a).data(), &s);
        let mut shape = s.clone();
        shape.swap(s.len() - 2, s.len() - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Transpose(a), rg))
    }

    /// General axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {s:?}")));
        }
        let (data, shape) = permute_data(self.value(a).data(), &s, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::dim("concat", format!("axis {axis} for rank {}", s0.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i]) {
                return Err(Error::dim("concat", format!("{s0:?} vs {s:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::dim("slice", format!("{start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, rg))
    }

    /// Rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("embedding", format!("table shape {s:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Contract(format!("token id {bad} >= vocab size {}", s[0])));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * s[1]);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::from_parts(vec![ids.len(), s[1]], data), Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Normalize over the last axis, then `* gain + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::dim("layernorm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layernorm",
                format!("x {s:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        if d == 0 {
            return Err(Error::domain("layernorm", "empty normalization axis"));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::from_parts(s, out), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| gelu_scalar(a).0);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Softmax along `axis` with max subtraction. `-inf` entries get zero
    /// probability; a row must contain at least one finite entry.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {s:?}")));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        if dim == 0 {
            return Err(Error::domain("softmax", "empty axis"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * dim * inner + j * inner + i;
                let m = (0..dim).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..dim {
                    let e = (xv[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..dim {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(x, axis), rg))
    }

    /// Mean next-token cross-entropy over rows where `mask` is true.
    /// `logits` is `[rows, vocab]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?}, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let v = s[1];
        if v == 0 {
            return Err(Error::domain("cross_entropy", "empty class axis"));
        }
        let rows: Vec<usize> = (0..s[0]).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::domain("cross_entropy", "mask selects no positions"));
        }
        if let Some(&r) = rows.iter().find(|&&r| targets[r] >= v) {
            return Err(Error::Contract(format!("target {} >= vocab {v}", targets[r])));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut loss = T::zero();
        for &r in &rows {
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            loss += lz - row[targets[r]];
            probs.extend(row.iter().map(|&x| (x - lz).exp()));
        }
        loss = loss / T::lit(rows.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, targets: targets.to_vec(), rows }, rg))
    }

    /// Rotary embedding on `[..., seq, dim]` with `positions.len() == seq`.
    pub fn rope_rotate(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || !s[s.len() - 1].is_multiple_of(2) || s[s.len() - 2] != positions.len() {
            return Err(Error::dim("rope_rotate", format!("shape {s:?} with {} positions", positions.len())));
        }
        let (seq, dim) = (s[s.len() - 2], s[s.len() - 1]);
        let (cos, sin) = rope_tables::<T>(positions, dim, base);
        let data = rope_apply(self.value(x).data(), seq, dim, &cos, &sin, false);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(s, data), Op::Rope { x, cos, sin }, rg))
    }

    /// Replace rows (last axis = row width) with constant values.
    /// `values` is `[rows.len(), width]`. Replaced rows pass no gradient.
    pub fn overwrite_rows(&mut self, x: Var, rows: &[usize], values: &Tensor<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::dim("overwrite_rows", "scalar input"))?;
        let n_rows = self.value(x).numel() / w.max(1);
        if values.shape() != [rows.len(), w] || rows.iter().any(|&r| r >= n_rows) {
            return Err(Error::dim("overwrite_rows", format!("x {s:?}, rows {rows:?}, values {:?}", values.shape())));
        }
        let mut v = self.value(x).clone();
        for (k, &r) in rows.iter().enumerate() {
            v.data_mut()[r * w..(r + 1) * w].copy_from_slice(values.row(k));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::OverwriteRows { x, rows: rows.to_vec() }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// created with [`Graph::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_tensor(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.nodes[v.0].requires_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                let (av, bv, gv) = (self.value(*a).data(), self.value(*b).data(), g.data());
                self.acc_with(grads, *a, || {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            MatRef::rm(&gv[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::rm_t(&bv[i * k * n..(i + 1) * k * n], k, n),
                            &mut da[i * m * k..(i + 1) * m * k],
                            T::zero(),
                        );
                    }
                    Tensor::from_parts(sa.to_vec(), da)
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            MatRef::rm_t(&av[i * m * k..(i + 1) * m * k], m, k),
                            MatRef::rm(&gv[i * m * n..(i + 1) * m * n], m, n),
                            &mut db[i * k * n..(i + 1) * k * n],
                            T::zero(),
                        );
                    }
                    Tensor::from_parts(sb.to_vec(), db)
                });
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *b, || g.clone());
                self.acc(grads, *a, g);
            }
            Op::AddBroadcast(a, b) => {
                self.acc_with(grads, *b, || {
                    let sb = self.shape(*b);
                    let w = sb.iter().product::<usize>().max(1);
                    let mut db = vec![T::zero(); w];
                    for (i, &x) in g.data().iter().enumerate() {
                        db[i % w] += x;
                    }
                    Tensor::from_parts(sb.to_vec(), db)
                });
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *b, || g.map(|x| -x));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || {
                    Tensor::from_parts(
                        out_shape.to_vec(),
                        g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                    )
                });
                self.acc_with(grads, *b, || {
                    Tensor::from_parts(
                        out_shape.to_vec(),
                        g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                    )
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::Transpose(a) => {
                let data = transpose_last2(g.data(), out_shape);
                self.acc(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), data));
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (data, shape) = permute_data(g.data(), out_shape, &inv);
                self.acc(grads, *a, Tensor::from_parts(shape, data));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p).to_vec();
                    let d = sp[*axis];
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            data.extend_from_slice(&g.data()[base..base + d * inner]);
                        }
                        self.acc(grads, p, Tensor::from_parts(sp, data));
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&sx, *axis);
                let len = out_shape[*axis];
                let mut data = vec![T::zero(); sx.iter().product()];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    data[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::from_parts(sx, data));
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table).to_vec();
                let d = st[1];
                let mut data = vec![T::zero(); st[0] * d];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        data[id * d + j] += g.data()[k * d + j];
                    }
                }
                self.acc(grads, *table, Tensor::from_parts(st, data));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *out_shape.last().expect("rank >= 1");
                let gv = self.value(*gain).data();
                self.acc_with(grads, *gain, || {
                    let mut dg = vec![T::zero(); d];
                    for (i, &gy) in g.data().iter().enumerate() {
                        dg[i % d] += gy * xhat[i];
                    }
                    Tensor::from_parts(vec![d], dg)
                });
                self.acc_with(grads, *bias, || {
                    let mut db = vec![T::zero(); d];
                    for (i, &gy) in g.data().iter().enumerate() {
                        db[i % d] += gy;
                    }
                    Tensor::from_parts(vec![d], db)
                });
                self.acc_with(grads, *x, || {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dx = Vec::with_capacity(g.numel());
                    for (r, (gy, xh)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            dx.push(rstd[r] * (gy[j] * gv[j] - mean_dxh - xh[j] * mean_dxh_xh));
                        }
                    }
                    Tensor::from_parts(out_shape.to_vec(), dx)
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let data = g.data().iter().zip(xv).map(|(&gy, &a)| gy * gelu_scalar(a).1).collect();
                self.acc(grads, *x, Tensor::from_parts(out_shape.to_vec(), data));
            }
            Op::Softmax(x, axis) => {
                let (outer, dim, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                let gv = g.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * dim * inner + j * inner + i;
                        let dot: T = (0..dim).map(|j| gv[at(j)] * y[at(j)]).sum();
                        for j in 0..dim {
                            dx[at(j)] = y[at(j)] * (gv[at(j)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(out_shape.to_vec(), dx));
            }
            Op::CrossEntropy { logits, probs, targets, rows } => {
                let sl = self.shape(*logits).to_vec();
                let v = sl[1];
                let scale = g.data()[0] / T::lit(rows.len() as f64);
                let mut dl = vec![T::zero(); sl[0] * v];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..v {
                        dl[r * v + j] = probs[k * v + j] * scale;
                    }
                    dl[r * v + targets[r]] -= scale;
                }
                self.acc(grads, *logits, Tensor::from_parts(sl, dl));
            }
            Op::Rope { x, cos, sin } => {
                let r = out_shape.len();
                let (seq, dim) = (out_shape[r - 2], out_shape[r - 1]);
                let data = rope_apply(g.data(), seq, dim, cos, sin, true);
                self.acc(grads, *x, Tensor::from_parts(out_shape.to_vec(), data));
            }
            Op::OverwriteRows { x, rows } => {
                let w = *out_shape.last().expect("rank >= 1");
                let mut g = g;
                for &r in rows {
                    g.data_mut()[r * w..(r + 1) * w].iter_mut().for_each(|v| *v = T::zero());
                }
                self.acc(grads, *x, g);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let i = g.constant(Tensor::eye(3));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y), g.value(a));
        let bad = g.constant(Tensor::eye(2));
        assert!(matches!(g.matmul(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.7).sin() * 30.0));
        let p = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let p0 = g.softmax(x, 0).unwrap();
        for c in 0..5 {
            let s: f64 = (0..3).map(|r| g.value(p0).data()[r * 5 + c]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let empty = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax(empty, 1), Err(Error::Domain { .. })));
    }

    #[test]
    fn masked_softmax_ignores_neg_inf() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, f32::NEG_INFINITY, 1.0]).unwrap());
        let p = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 4], |i| i as f64 + 0.5));
        let y = g.rope_rotate(x, &[0], 10000.0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1., -2., 0.5, 3.]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., -4., 1., 6.]);
        // Second call on the same tape gives the same result.
        let again = g.backward(l).unwrap();
        assert_eq!(again.get(x).unwrap(), grads.get(x).unwrap());
    }

    #[test]
    fn unrelated_param_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let p = g.param(t(&[2], &[3., 4.]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get_or_zeros(p, &[2]).data(), &[0., 0.]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_and_inverse() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(g.value(y).data()[(3 * 2 + 1) * 3 + 2], g.value(x).data()[(3 + 2) * 4 + 3]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_empty_mask() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy(l, &[0, 1], &[false, false]), Err(Error::Domain { .. })));
        let ce = g.cross_entropy(l, &[0, 1], &[true, false]).unwrap();
        assert!((g.value(ce).item().unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn overwrite_rows_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::from_fn(&[3, 2], |i| i as f64));
        let y = g.overwrite_rows(x, &[1], &t(&[1, 2], &[9., 9.])).unwrap();
        assert_eq!(g.value(y).row(1), &[9., 9.]);
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1., 1., 0., 0., 1., 1.]);
    }
}
