//! Define-by-run computation graph.
//!
//! Every operator evaluates eagerly when it is recorded, so node ids are a
//! topological order by construction. [`Graph::backward`] walks the nodes in
//! reverse and accumulates vector-Jacobian products.

use std::collections::BTreeMap;

use super::kernels::{gemm, log_softmax_in_place, softmax_in_place};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape description for the fused multi-head attention operator.
#[derive(Clone, Debug)]
pub struct Attention {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags; `false` keys are never attended to.
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, f32),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    MeanPool { x: Var, groups: Vec<Vec<usize>> },
    SumSquares(Var),
    Dot(Var, Var),
    RowDot(Var, Var),
    StopGrad,
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32>, count: usize },
    Attention { q: Var, k: Var, v: Var, spec: Box<Attention>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A recorded computation. Build with [`Graph::new`] for training or
/// [`Graph::inference`] to skip gradient bookkeeping.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Scales every parameter gradient (used for loss weighting after the fact).
    pub fn scale(&mut self, factor: f32) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.params() {
            match self.params.get_mut(&id) {
                Some(t) => t.add_assign(g),
                None => {
                    self.params.insert(id, g.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> f32 {
        self.params
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }
}

fn shape_err(node: usize, op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        node,
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph that records values only; [`Graph::backward`] will fail.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track: false,
        }
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad: needs_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Input whose gradient is recorded (queried through [`Gradients::wrt`]).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.get(id).clone(), true)
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if bk != k || av.shape().len() != 2 || bv.shape().len() != 2 {
            let expected = if trans_b { vec![n, k] } else { vec![k, n] };
            return Err(shape_err(self.next_id(), "matmul", &expected, bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Op::MatMul { a, b, trans_b },
            Tensor { shape: vec![m, n], data: out },
            ng,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(self.next_id(), op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let av = self.value(a);
        Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    /// Adds a bias vector (numel = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(shape_err(self.next_id(), "add_row", &[cols], self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                for (x, y) in row.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Op::AddRow { a, bias }, out, ng))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.map(a, |x| x * c);
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(Op::Relu(a), out, ng)
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(shape_err(self.next_id(), "layer_norm", &[cols], self.shape(p)));
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            Tensor { shape, data: out },
            ng,
        ))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        if cols > 0 {
            out.data_mut().chunks_mut(cols).for_each(softmax_in_place);
        }
        let ng = self.ng(a);
        self.push(Op::Softmax(a), out, ng)
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        if cols > 0 {
            out.data_mut().chunks_mut(cols).for_each(log_softmax_in_place);
        }
        let ng = self.ng(a);
        self.push(Op::LogSoftmax(a), out, ng)
    }

    /// Selects rows of a `[n, d]` table; also serves as embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {n} rows (node {})",
                self.next_id()
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(tv.row_slice(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Op::GatherRows { table, idx: idx.to_vec() },
            Tensor { shape: vec![idx.len(), d], data: out },
            ng,
        ))
    }

    /// Alias of [`Graph::gather_rows`] for token embeddings.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        self.gather_rows(table, tokens)
    }

    /// Output row `g` is the mean of the rows of `x` listed in `groups[g]`
    /// (an empty group yields a zero row). Masked mean-pooling over a padded
    /// sequence axis is expressed by listing only the unmasked rows.
    pub fn mean_pool(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; groups.len() * d];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let dst = &mut out[g * d..(g + 1) * d];
            for &r in rows {
                if r >= n {
                    return Err(Error::InvalidArgument(format!(
                        "mean_pool row {r} out of range for {n} rows"
                    )));
                }
                for (o, v) in dst.iter_mut().zip(xv.row_slice(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / rows.len() as f32;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.ng(x);
        let rows = groups.len();
        Ok(self.push(
            Op::MeanPool { x, groups },
            Tensor { shape: vec![rows, d], data: out },
            ng,
        ))
    }

    /// Squared L2 norm of all elements, as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let ng = self.ng(a);
        self.push(Op::SumSquares(a), Tensor::scalar(s), ng)
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = super::kernels::dot(self.value(a).data(), self.value(b).data());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s), ng))
    }

    /// Per-row inner products of two `[m, d]` tensors, giving `[m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f32> = (0..av.rows())
            .map(|r| super::kernels::dot(av.row_slice(r), bv.row_slice(r)))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let m = out.len();
        Ok(self.push(Op::RowDot(a, b), Tensor { shape: vec![m, 1], data: out }, ng))
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(Op::StopGrad, out, false)
    }

    /// Concatenates 2-D tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (rows0, cols0) = (self.value(first).rows(), self.value(first).cols());
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.cols() != cols0 {
                        return Err(shape_err(self.next_id(), "concat", &[v.rows(), cols0], v.shape()));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor { shape: vec![rows, cols0], data }
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.rows() != rows0 {
                        return Err(shape_err(self.next_id(), "concat", &[rows0, v.cols()], v.shape()));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(rows0 * cols);
                for r in 0..rows0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor { shape: vec![rows0, cols], data }
            }
            _ => return Err(Error::InvalidArgument(format!("concat axis {axis} unsupported"))),
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f32>() / v.numel().max(1) as f32;
        let ng = self.ng(a);
        self.push(Op::Mean(a), Tensor::scalar(s), ng)
    }

    /// Mean over rows with a target of `−log softmax(logits)[row, target]`.
    /// Rows whose target is `None` are excluded; with no targets at all the
    /// loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(shape_err(self.next_id(), "cross_entropy", &[targets.len(), cols], lv.shape()));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f32;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            log_softmax_in_place(row);
            if let Some(t) = *t {
                if t >= cols {
                    return Err(Error::InvalidArgument(format!(
                        "cross_entropy target {t} out of range for {cols} classes"
                    )));
                }
                total -= row[t];
                count += 1;
            }
            row.iter_mut().for_each(|v| *v = v.exp());
        }
        let loss = if count == 0 { 0.0 } else { total / count as f32 };
        let ng = self.ng(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q: [batch * q_len, d]`, `k, v: [batch * k_len, d]`; `d` must be a
    /// multiple of `heads`. Returns `[batch * q_len, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Attention) -> Result<Var> {
        let d = self.value(q).cols();
        let Attention { batch, q_len, k_len, heads, causal, .. } = spec;
        let node = self.next_id();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention dim {d} not divisible by {heads} heads (node {node})"
            )));
        }
        if self.shape(q) != [batch * q_len, d] {
            return Err(shape_err(node, "attention", &[batch * q_len, d], self.shape(q)));
        }
        for x in [k, v] {
            if self.shape(x) != [batch * k_len, d] {
                return Err(shape_err(node, "attention", &[batch * k_len, d], self.shape(x)));
            }
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != batch * k_len {
                return Err(shape_err(node, "attention", &[batch * k_len], &[mask.len()]));
            }
        }
        if causal && q_len != k_len {
            return Err(Error::InvalidArgument("causal attention needs q_len == k_len".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = vec![0.0; batch * q_len * d];
        let mut qh = vec![0.0; q_len * dh];
        let mut kh = vec![0.0; k_len * dh];
        let mut vh = vec![0.0; k_len * dh];
        let mut oh = vec![0.0; q_len * dh];
        for b in 0..batch {
            for h in 0..heads {
                copy_head(qv, b * q_len, q_len, d, h * dh, dh, &mut qh);
                copy_head(kv, b * k_len, k_len, d, h * dh, dh, &mut kh);
                copy_head(vv, b * k_len, k_len, d, h * dh, dh, &mut vh);
                let p = &mut probs[(b * heads + h) * q_len * k_len..][..q_len * k_len];
                gemm(q_len, dh, k_len, &qh, false, &kh, true, p, 0.0);
                for i in 0..q_len {
                    let row = &mut p[i * k_len..(i + 1) * k_len];
                    for (j, s) in row.iter_mut().enumerate() {
                        let masked = (causal && j > i)
                            || spec.key_mask.as_ref().is_some_and(|m| !m[b * k_len + j]);
                        *s = if masked { f32::NEG_INFINITY } else { *s * scale };
                    }
                    softmax_in_place(row);
                }
                gemm(q_len, k_len, dh, p, false, &vh, false, &mut oh, 0.0);
                scatter_head(&oh, b * q_len, q_len, d, h * dh, dh, &mut out);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Op::Attention { q, k, v, spec: Box::new(spec), probs },
            Tensor { shape: vec![batch * q_len, d], data: out },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.track {
            return Err(Error::NoGrad);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match params.get_mut(id) {
                    Some(t) => t.add_assign(g),
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f32]> {
        if !self.ng(v) {
            return None;
        }
        let shape = self.shape(v);
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if let Some(da) = self.grad_buf(grads, *a) {
                    // da = g · op(b)ᵀ
                    gemm(m, n, k, gd, false, bv.data(), !trans_b, da, 1.0);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    if *trans_b {
                        gemm(n, m, k, gd, true, av.data(), false, db, 1.0);
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        axpy(d, gd, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    axpy(d, gd, 1.0);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    axpy(d, gd, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    axpy(d, gd, 1.0);
                }
                let cols = node.value.cols();
                if let Some(d) = self.grad_buf(grads, *bias) {
                    if cols > 0 {
                        for row in gd.chunks(cols) {
                            axpy(d, row, 1.0);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    axpy(d, gd, *c);
                }
            }
            Op::Relu(a) => {
                let out = node.value.data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(out) {
                        if *y > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.grad_buf(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *beta) {
                    for row in gd.chunks(cols) {
                        axpy(db, row, 1.0);
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= cols as f32;
                        mean_dh /= cols as f32;
                        for c in 0..cols {
                            dx[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                        let s: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            d[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                        let s: f32 = gr.iter().sum();
                        for c in 0..cols {
                            d[r * cols + c] += gr[c] - yr[c].exp() * s;
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let cols = node.value.cols();
                if let Some(d) = self.grad_buf(grads, *table) {
                    for (r, &t) in idx.iter().enumerate() {
                        axpy(&mut d[t * cols..(t + 1) * cols], &gd[r * cols..(r + 1) * cols], 1.0);
                    }
                }
            }
            Op::MeanPool { x, groups } => {
                let cols = node.value.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (gi, rows) in groups.iter().enumerate() {
                        if rows.is_empty() {
                            continue;
                        }
                        let w = 1.0 / rows.len() as f32;
                        for &r in rows {
                            axpy(&mut d[r * cols..(r + 1) * cols], &gd[gi * cols..(gi + 1) * cols], w);
                        }
                    }
                }
            }
            Op::SumSquares(a) => {
                let av = self.value(*a).data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    axpy(d, av, 2.0 * gd[0]);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_buf(grads, *a) {
                    axpy(d, bv, gd[0]);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    axpy(d, av, gd[0]);
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                for (dst, other) in [(*a, bv), (*b, av)] {
                    if let Some(d) = self.grad_buf(grads, dst) {
                        for (r, gr) in gd.iter().enumerate() {
                            axpy(&mut d[r * cols..(r + 1) * cols], other.row_slice(r), *gr);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.value(p).rows(), self.value(p).cols());
                    if let Some(d) = self.grad_buf(grads, p) {
                        if *axis == 0 {
                            axpy(d, &gd[offset * out_cols..(offset + pr) * out_cols], 1.0);
                        } else {
                            for r in 0..pr {
                                axpy(
                                    &mut d[r * pc..(r + 1) * pc],
                                    &gd[r * out_cols + offset..r * out_cols + offset + pc],
                                    1.0,
                                );
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().for_each(|v| *v += gd[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    let w = gd[0] / d.len().max(1) as f32;
                    d.iter_mut().for_each(|v| *v += w);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let cols = self.value(*logits).cols();
                let w = gd[0] / *count as f32;
                if let Some(d) = self.grad_buf(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let dr = &mut d[r * cols..(r + 1) * cols];
                        axpy(dr, &probs[r * cols..(r + 1) * cols], w);
                        dr[t] -= w;
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, gd, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &Attention,
        probs: &[f32],
        gd: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let d = self.value(q).cols();
        let Attention { batch, q_len, k_len, heads, .. } = *spec;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut qh = vec![0.0; q_len * dh];
        let mut kh = vec![0.0; k_len * dh];
        let mut vh = vec![0.0; k_len * dh];
        let mut goh = vec![0.0; q_len * dh];
        let mut dp = vec![0.0; q_len * k_len];
        let mut dqh = vec![0.0; q_len * dh];
        let mut dkh = vec![0.0; k_len * dh];
        let mut dvh = vec![0.0; k_len * dh];
        for b in 0..batch {
            for h in 0..heads {
                copy_head(qv, b * q_len, q_len, d, h * dh, dh, &mut qh);
                copy_head(kv, b * k_len, k_len, d, h * dh, dh, &mut kh);
                copy_head(vv, b * k_len, k_len, d, h * dh, dh, &mut vh);
                copy_head(gd, b * q_len, q_len, d, h * dh, dh, &mut goh);
                let p = &probs[(b * heads + h) * q_len * k_len..][..q_len * k_len];
                // dV = Pᵀ dO ; dP = dO Vᵀ
                gemm(k_len, q_len, dh, p, true, &goh, false, &mut dvh, 0.0);
                gemm(q_len, dh, k_len, &goh, false, &vh, true, &mut dp, 0.0);
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the 1/√dh scale.
                for i in 0..q_len {
                    let pr = &p[i * k_len..(i + 1) * k_len];
                    let dr = &mut dp[i * k_len..(i + 1) * k_len];
                    let s: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (dj, pj) in dr.iter_mut().zip(pr) {
                        *dj = pj * (*dj - s) * scale;
                    }
                }
                gemm(q_len, k_len, dh, &dp, false, &kh, false, &mut dqh, 0.0);
                gemm(k_len, q_len, dh, &dp, true, &qh, false, &mut dkh, 0.0);
                scatter_head(&dqh, b * q_len, q_len, d, h * dh, dh, &mut dq);
                scatter_head(&dkh, b * k_len, k_len, d, h * dh, dh, &mut dk);
                scatter_head(&dvh, b * k_len, k_len, d, h * dh, dh, &mut dv);
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = self.grad_buf(grads, var) {
                axpy(dst, &src, 1.0);
            }
        }
    }
}

fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Copies columns `[col, col + width)` of rows `[row0, row0 + rows)` of a
/// `[_, stride]` matrix into a dense `[rows, width]` buffer.
fn copy_head(src: &[f32], row0: usize, rows: usize, stride: usize, col: usize, width: usize, dst: &mut [f32]) {
    for r in 0..rows {
        let s = (row0 + r) * stride + col;
        dst[r * width..(r + 1) * width].copy_from_slice(&src[s..s + width]);
    }
}

fn scatter_head(src: &[f32], row0: usize, rows: usize, stride: usize, col: usize, width: usize, dst: &mut [f32]) {
    for r in 0..rows {
        let s = (row0 + r) * stride + col;
        dst[s..s + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}
