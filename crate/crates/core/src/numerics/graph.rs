//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for the non-frozen parameters that
//! contributed to the loss. Nodes that depend only on constants or frozen
//! parameters never allocate gradient buffers.

use std::collections::HashMap;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, strided_gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct SpatialDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SpatialDims {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    AddGroupBias { x: Var, bias: Var, group: usize },
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Im2Col { x: Var, dims: SpatialDims, k: usize, stride: usize, pad: usize, oh: usize, ow: usize },
    Upsample2 { x: Var, dims: SpatialDims },
    AvgPool { x: Var, dims: SpatialDims, factor: usize },
    MeanGroups { x: Var, group: usize },
    L2NormRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
}

#[derive(Clone, Copy, Debug)]
struct AttnSpec {
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape over parameters borrowed from a [`ParamStore`].
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax over each row; `masked[i]` excludes an entry.
pub(crate) fn softmax_row_in_place(row: &mut [f64], masked: Option<&[bool]>) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if masked.is_none_or(|m| !m[j]) && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if masked.is_some_and(|m| m[j]) {
            *v = 0.0;
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    row.iter_mut().for_each(|v| *v /= sum);
    true
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    /// A graph that never tracks gradients; used for evaluation passes.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Attention weights stored by an [`Graph::attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients without being a stored parameter.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let rg = !p.frozen && self.track;
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn mat_dims(t: &Tensor, trans: bool) -> (usize, usize) {
        let (r, c) = (t.rows(), t.cols());
        if trans {
            (c, r)
        } else {
            (r, c)
        }
    }

    /// `op(a) · op(b)` for 2-D operands.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, k) = Self::mat_dims(av, ta);
        let (k2, n) = Self::mat_dims(bv, tb);
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        Ok(av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, d)?, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, d)?, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, d)?, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(dim_err("add_bias", xv, bv));
        }
        let mut d = xv.data().to_vec();
        for row in d.chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), d)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddBias { x, bias }, rg)
    }

    /// Adds row `g` of `bias` (`[groups, cols]`) to rows `g*group..(g+1)*group` of `x`.
    pub fn add_group_bias(&mut self, x: Var, bias: Var, group: usize) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.cols() != c || bv.rows() * group != xv.rows() {
            return Err(dim_err("add_group_bias", xv, bv));
        }
        let mut d = xv.data().to_vec();
        for (r, row) in d.chunks_mut(c).enumerate() {
            let g = r / group;
            row.iter_mut()
                .zip(&bv.data()[g * c..(g + 1) * c])
                .for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), d)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddGroupBias { x, bias, group }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu_fwd(v)).collect())?;
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * sigmoid(v)).collect(),
        )?;
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// Row-wise layer normalization with learnable gain and bias (eps 1e-5).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(dim_err("layernorm", xv, self.value(gain)));
        }
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Softmax over each row. `mask[i] == true` removes entry `i` (output exactly 0).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    left: xv.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let c = xv.cols();
        let mut d = xv.data().to_vec();
        for (r, row) in d.chunks_mut(c).enumerate() {
            let mrow = mask.map(|m| &m[r * c..(r + 1) * c]);
            if !softmax_row_in_place(row, mrow) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), d)?;
        let rg = self.rg(x);
        self.push(t, Op::Softmax { x }, rg)
    }

    /// Scaled dot-product multi-head attention over `batch` independent sequences.
    ///
    /// `q` is `[batch*lq, d]`, `k` and `v` are `[batch*lk, d]`. With `causal`, query `i`
    /// sees keys `j <= i + lk - lq`. The softmax weights are kept on the node.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize, causal: bool) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.shape() != kv.shape() || d % heads != 0 {
            return Err(dim_err("attention", qv, kv));
        }
        if qv.rows() % batch != 0 || kv.rows() % batch != 0 {
            return Err(dim_err("attention", qv, kv));
        }
        let lq = qv.rows() / batch;
        let lk = kv.rows() / batch;
        if causal && lk < lq {
            return Err(dim_err("attention", qv, kv));
        }
        let spec = AttnSpec { batch, heads, lq, lk };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = vec![0.0; qv.numel()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[((b * heads + h) * lq) * lk..((b * heads + h + 1) * lq) * lk];
                let qoff = b * lq * d + h * dh;
                let koff = b * lk * d + h * dh;
                // SAFETY: offsets and strides stay within the [rows, d] buffers.
                unsafe {
                    strided_gemm(
                        lq, dh, lk, scale,
                        qd.as_ptr().add(qoff), d as isize, 1,
                        kd.as_ptr().add(koff), 1, d as isize,
                        0.0, p.as_mut_ptr(), lk as isize, 1,
                    );
                }
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let limit = if causal { i + lk - lq } else { lk - 1 };
                    let max = row[..=limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if j <= limit {
                            *x = (*x - max).exp();
                            sum += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    row[..=limit].iter_mut().for_each(|x| *x /= sum);
                }
                unsafe {
                    strided_gemm(
                        lq, lk, dh, 1.0,
                        p.as_ptr(), lk as isize, 1,
                        vd.as_ptr().add(koff), d as isize, 1,
                        0.0, out.as_mut_ptr().add(qoff), d as isize, 1,
                    );
                }
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(t, Op::Attention { q, k, v, spec, probs }, rg)
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let dim = tv.cols();
        let vocab = tv.rows();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Argument(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let t = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.rg(table);
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Mean cross-entropy of `logits` rows against targets; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            softmax_row_in_place(row, None);
            if let Some(t) = targets[r] {
                if t >= c {
                    return Err(Error::Argument(format!("target {t} outside {c} classes")));
                }
                total -= row[t].max(1e-300).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Argument("cross_entropy with no targets".into()));
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        )
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mse", |x, y| (x - y) * (x - y))?;
        let loss = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(loss), Op::Mse(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(dim_err("concat_cols", self.value(parts[0]), pv));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return Err(Error::Argument(format!("slice_cols {start}+{len} of {c}")));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(dim_err("concat_rows", self.value(parts[0]), pv));
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / c;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Argument(format!("gather row {i} of {rows}")));
            }
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![idx.len(), c], out)?, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Patch extraction for square convolutions over channels-last maps
    /// `[batch*h*w, c]`; output columns are ordered `(ky, kx, c)`.
    pub fn im2col(&mut self, x: Var, dims: SpatialDims, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != dims.batch * dims.pixels() || xv.cols() != dims.channels {
            return Err(Error::Dimension {
                op: "im2col",
                left: xv.shape().to_vec(),
                right: vec![dims.batch, dims.height, dims.width, dims.channels],
            });
        }
        let oh = (dims.height + 2 * pad - k) / stride + 1;
        let ow = (dims.width + 2 * pad - k) / stride + 1;
        let c = dims.channels;
        let cols = k * k * c;
        let mut out = vec![0.0; dims.batch * oh * ow * cols];
        let xd = xv.data();
        for b in 0..dims.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let orow = (b * oh + oy) * ow + ox;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= dims.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= dims.width as isize {
                                continue;
                            }
                            let irow = (b * dims.height + iy as usize) * dims.width + ix as usize;
                            let dst = orow * cols + (ky * k + kx) * c;
                            out[dst..dst + c].copy_from_slice(&xd[irow * c..(irow + 1) * c]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![dims.batch * oh * ow, cols], out)?,
            Op::Im2Col { x, dims, k, stride, pad, oh, ow },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of a channels-last map.
    pub fn upsample2(&mut self, x: Var, dims: SpatialDims) -> Result<Var> {
        let xv = self.value(x);
        let c = dims.channels;
        if xv.rows() != dims.batch * dims.pixels() || xv.cols() != c {
            return Err(Error::Argument("upsample2 dims".into()));
        }
        let (h2, w2) = (dims.height * 2, dims.width * 2);
        let mut out = vec![0.0; dims.batch * h2 * w2 * c];
        for b in 0..dims.batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = (b * dims.height + y / 2) * dims.width + xx / 2;
                    let dst = (b * h2 + y) * w2 + xx;
                    out[dst * c..(dst + 1) * c].copy_from_slice(&xv.data()[src * c..(src + 1) * c]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![dims.batch * h2 * w2, c], out)?, Op::Upsample2 { x, dims }, rg)
    }

    /// Non-overlapping `factor x factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, dims: SpatialDims, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = dims.channels;
        if xv.rows() != dims.batch * dims.pixels() || !dims.height.is_multiple_of(factor) || !dims.width.is_multiple_of(factor) {
            return Err(Error::Argument("avg_pool dims".into()));
        }
        if factor == 1 {
            let t = xv.clone();
            let rg = self.rg(x);
            return self.push(t, Op::Reshape(x), rg);
        }
        let (oh, ow) = (dims.height / factor, dims.width / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; dims.batch * oh * ow * c];
        for b in 0..dims.batch {
            for y in 0..dims.height {
                for xx in 0..dims.width {
                    let src = (b * dims.height + y) * dims.width + xx;
                    let dst = (b * oh + y / factor) * ow + xx / factor;
                    for ch in 0..c {
                        out[dst * c + ch] += xv.data()[src * c + ch] * inv;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![dims.batch * oh * ow, c], out)?, Op::AvgPool { x, dims, factor }, rg)
    }

    /// Mean over consecutive groups of `group` rows: `[g*group, c] -> [g, c]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(Error::Argument("mean_groups".into()));
        }
        let g = xv.rows() / group;
        let mut out = vec![0.0; g * c];
        for r in 0..xv.rows() {
            for j in 0..c {
                out[(r / group) * c + j] += xv.data()[r * c + j] / group as f64;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![g, c], out)?, Op::MeanGroups { x, group }, rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::L2NormRows { x, norms }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        if !out.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = Self::mat_dims(av, *ta);
                let n = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    if !*ta {
                        // dA = dC · op(B)^T
                        gemm(m, n, k, g, false, bv.data(), !*tb, 1.0, ga);
                    } else {
                        // dA = op(B) · dC^T
                        gemm(k, n, m, bv.data(), *tb, g, true, 1.0, ga);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if !*tb {
                        // dB = op(A)^T · dC
                        gemm(k, m, n, av.data(), !*ta, g, false, 1.0, gb);
                    } else {
                        // dB = dC^T · op(A)
                        gemm(n, m, k, g, true, av.data(), *ta, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = node.value.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::AddGroupBias { x, bias, group } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = node.value.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for (r, row) in g.chunks(c).enumerate() {
                        let off = (r / group) * c;
                        gb[off..off + c].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * (s + xv[i] * s * (1.0 - s));
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.value.cols();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (r, row) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            gg[j] += row[j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for (r, row) in g.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = row[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..node.value.rows() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            gt[id * dim + j] += g[i * dim + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.value(*logits).cols();
                let s = g[0] / *count as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..c {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / av.len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..av.len() {
                        ga[i] += s * (av[i] - bv[i]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..av.len() {
                        gb[i] -= s * (av[i] - bv[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..node.value.rows() {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Im2Col { x, dims, k, stride, pad, oh, ow } => {
                let c = dims.channels;
                let cols = k * k * c;
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..dims.batch {
                        for oy in 0..*oh {
                            for ox in 0..*ow {
                                let orow = (b * oh + oy) * ow + ox;
                                for ky in 0..*k {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= dims.height as isize {
                                        continue;
                                    }
                                    for kx in 0..*k {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= dims.width as isize {
                                            continue;
                                        }
                                        let irow = (b * dims.height + iy as usize) * dims.width + ix as usize;
                                        let src = orow * cols + (ky * k + kx) * c;
                                        for ch in 0..c {
                                            gx[irow * c + ch] += g[src + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2 { x, dims } => {
                let c = dims.channels;
                let (h2, w2) = (dims.height * 2, dims.width * 2);
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..dims.batch {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let src = (b * dims.height + y / 2) * dims.width + xx / 2;
                                let dst = (b * h2 + y) * w2 + xx;
                                for ch in 0..c {
                                    gx[src * c + ch] += g[dst * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x, dims, factor } => {
                let c = dims.channels;
                let (oh, ow) = (dims.height / factor, dims.width / factor);
                let inv = 1.0 / (factor * factor) as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..dims.batch {
                        for y in 0..dims.height {
                            for xx in 0..dims.width {
                                let src = (b * dims.height + y) * dims.width + xx;
                                let dst = (b * oh + y / factor) * ow + xx / factor;
                                for ch in 0..c {
                                    gx[src * c + ch] += g[dst * c + ch] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanGroups { x, group } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..gx.len() / c {
                        for j in 0..c {
                            gx[r * c + j] += g[(r / group) * c + j] / *group as f64;
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
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
        spec: &AttnSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnSpec { batch, heads, lq, lk, .. } = *spec;
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let need_q = self.rg(q);
        let need_k = self.rg(k);
        let need_v = self.rg(v);
        let mut gq = if need_q { vec![0.0; qd.len()] } else { Vec::new() };
        let mut gk = if need_k { vec![0.0; kd.len()] } else { Vec::new() };
        let mut gv = if need_v { vec![0.0; vd.len()] } else { Vec::new() };
        let mut dp = vec![0.0; lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[((b * heads + h) * lq) * lk..((b * heads + h + 1) * lq) * lk];
                let qoff = b * lq * d + h * dh;
                let koff = b * lk * d + h * dh;
                // SAFETY: every view below addresses rows of the [rows, d] buffers
                // restricted to this head's column band.
                unsafe {
                    if need_v {
                        // dV += P^T dO
                        strided_gemm(
                            lk, lq, dh, 1.0,
                            p.as_ptr(), 1, lk as isize,
                            g.as_ptr().add(qoff), d as isize, 1,
                            1.0, gv.as_mut_ptr().add(koff), d as isize, 1,
                        );
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    // dP = dO V^T
                    strided_gemm(
                        lq, dh, lk, 1.0,
                        g.as_ptr().add(qoff), d as isize, 1,
                        vd.as_ptr().add(koff), 1, d as isize,
                        0.0, dp.as_mut_ptr(), lk as isize, 1,
                    );
                }
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut dp[i * lk..(i + 1) * lk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..lk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                unsafe {
                    if need_q {
                        // dQ += dS K
                        strided_gemm(
                            lq, lk, dh, 1.0,
                            dp.as_ptr(), lk as isize, 1,
                            kd.as_ptr().add(koff), d as isize, 1,
                            1.0, gq.as_mut_ptr().add(qoff), d as isize, 1,
                        );
                    }
                    if need_k {
                        // dK += dS^T Q
                        strided_gemm(
                            lk, lq, dh, 1.0,
                            dp.as_ptr(), 1, lk as isize,
                            qd.as_ptr().add(qoff), d as isize, 1,
                            1.0, gk.as_mut_ptr().add(koff), d as isize, 1,
                        );
                    }
                }
            }
        }
        for (var, buf, need) in [(q, gq, need_q), (k, gk, need_k), (v, gv, need_v)] {
            if need {
                if let Some(acc) = self.acc(grads, var) {
                    acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias { .. } => "add_bias",
        Op::AddGroupBias { .. } => "add_group_bias",
        Op::Gelu(_) => "gelu",
        Op::Silu(_) => "silu",
        Op::LayerNorm { .. } => "layernorm",
        Op::Softmax { .. } => "softmax",
        Op::Attention { .. } => "attention",
        Op::Embedding { .. } => "embedding",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Mse(..) => "mse",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::Im2Col { .. } => "im2col",
        Op::Upsample2 { .. } => "upsample2",
        Op::AvgPool { .. } => "avg_pool",
        Op::MeanGroups { .. } => "mean_groups",
        Op::L2NormRows { .. } => "l2_normalize_rows",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
    }
}
