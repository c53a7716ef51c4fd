//! Recorded operation tape with reverse-mode gradients.
//!
//! Every value is viewed as a row-major matrix. Operations are appended in
//! execution order, so walking the tape backwards visits each node after all
//! of its consumers.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_in_place, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous block of rows forming one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    MeanRows { x: Var, segments: Vec<Segment> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SoftmaxAll(Var),
    CausalAttention { qkv: Var, segments: Vec<Segment>, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum(Var),
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::MeanRows { .. } => "mean_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SoftmaxAll(_) => "softmax",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Build a forward pass, call [`Graph::backward`], then read
/// gradients or push them into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
    non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

#[cfg(test)]
thread_local! {
    /// Mutation hook: skews the tanh backward rule so checker sensitivity can be tested.
    pub(crate) static CORRUPT_TANH_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn tanh_grad_factor<T: Scalar>() -> T {
    #[cfg(test)]
    if CORRUPT_TANH_BACKWARD.with(|c| c.get()) {
        return T::of(1.5);
    }
    T::one()
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// `a^T @ b` for `a[r,m]`, `b[r,n]`.
fn matmul_ta<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (r, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(r, b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        r,
        n,
        T::one(),
        a.data(),
        1,
        m as isize,
        b.data(),
        n as isize,
        1,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new(), non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn finite_guard(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(format!("produced by {op}"))),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that records a gradient (used by tests and finite-difference checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bring a stored parameter onto the tape. Repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b), false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a @ b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b), true)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() || va.cols() != vb.cols() {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Broadcast-add a row vector `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        if vb.len() != c {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, &y) in value.row_mut(r).iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    /// Element-wise product of two tensors of equal shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != cols || b.len() != cols {
            return Err(Error::Shape(format!("layer_norm over {cols} columns with gain {:?}", g.shape())));
        }
        let n = T::of(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Select rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, cols) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Shape(format!("gather index {i} >= {rows}")));
            }
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::from_rows(ids.len(), cols, data);
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Mean of each segment's rows; one output row per segment.
    pub fn mean_rows(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut data = vec![T::zero(); segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            if seg.len == 0 || seg.start + seg.len > vx.rows() {
                return Err(Error::Shape(format!("mean_rows segment {seg:?} over {} rows", vx.rows())));
            }
            let inv = T::one() / T::of(seg.len as f64);
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in seg.start..seg.start + seg.len {
                for (o, &v) in out.iter_mut().zip(vx.row(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::from_rows(segments.len(), cols, data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanRows { x, segments: segments.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_rows(rows, total, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Shape("concat_rows column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let value = Tensor::from_rows(rows, cols, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.rows() {
            return Err(Error::Shape(format!("slice rows {start}..{} of {}", start + len, vx.rows())));
        }
        let c = vx.cols();
        let value = Tensor::from_rows(len, c, vx.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Softmax over every element of `a`.
    pub fn softmax_all(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        if value.is_empty() {
            return Err(Error::invalid("softmax of an empty tensor"));
        }
        softmax_in_place(value.data_mut());
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxAll(a), rg))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[rows, 3 * width]` holding queries, keys and values side by
    /// side. Each segment attends only within itself and only to earlier or
    /// equal positions.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let vq = self.value(qkv);
        if !vq.cols().is_multiple_of(3 * heads) {
            return Err(Error::Shape(format!("qkv width {} not divisible into 3 x {heads} heads", vq.cols())));
        }
        let width = vq.cols() / 3;
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let rows = vq.rows();
        let mut out = vec![T::zero(); rows * width];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in segments {
            if seg.start + seg.len > rows {
                return Err(Error::Shape("attention segment out of range".into()));
            }
            for h in 0..heads {
                let qo = h * dh;
                let ko = width + h * dh;
                let vo = 2 * width + h * dh;
                for i in 0..seg.len {
                    let q = &vq.row(seg.start + i)[qo..qo + dh];
                    scores.clear();
                    for j in 0..=i {
                        let k = &vq.row(seg.start + j)[ko..ko + dh];
                        let dot: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    softmax_in_place(&mut scores);
                    let o = &mut out[(seg.start + i) * width + qo..(seg.start + i) * width + qo + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let v = &vq.row(seg.start + j)[vo..vo + dh];
                        for (oo, &vv) in o.iter_mut().zip(v) {
                            *oo += p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let value = Tensor::from_rows(rows, width, out);
        let rg = self.rg(qkv);
        Ok(self.push(value, Op::CausalAttention { qkv, segments: segments.to_vec(), heads, probs }, rg))
    }

    /// Mean negative log-likelihood of the target column in each row that has
    /// a target. Rows with `None` do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = (vl.rows(), vl.cols());
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} logit rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("cross entropy with no scored positions"));
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let Some(t) = targets[r] else { continue };
            if t >= cols {
                return Err(Error::Shape(format!("target {t} >= {cols} classes")));
            }
            let p = &mut probs[r * cols..(r + 1) * cols];
            p.copy_from_slice(vl.row(r));
            let max = p.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in p.iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            total += s.ln() + max - vl.row(r)[t];
            p.iter_mut().for_each(|x| *x = *x / s);
        }
        let value = Tensor::scalar(total / T::of(count as f64));
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept on the tape
    /// until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.value(loss).shape())));
        }
        self.finite_guard()?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add the gradients of every parameter node on this tape into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut pairs: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        pairs.sort_by_key(|p| p.0);
        for (id, v) in pairs {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(g.reshape(shape).expect("gradient extent"));
            }
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = g.matmul(vb, !*trans_b).expect("matmul grad shape");
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = if *trans_b { matmul_ta(g, va) } else { matmul_ta(va, g) };
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let c = g.cols();
                    let mut gb = vec![T::zero(); c];
                    for r in 0..g.rows() {
                        for (o, &x) in gb.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *b, Tensor::row_vector(gb));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::row_vector(d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::row_vector(d));
                }
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, g.map(|x| x * *s));
            }
            Op::Tanh(a) => {
                let f: T = tanh_grad_factor();
                let d = g.data().iter().zip(node.value.data()).map(|(&gg, &y)| f * gg * (T::one() - y * y)).collect();
                self.acc(grads, *a, Tensor::row_vector(d));
            }
            Op::Gelu(a) => {
                let d = g.data().iter().zip(self.value(*a).data()).map(|(&gg, &x)| gg * gelu_grad(x)).collect();
                self.acc(grads, *a, Tensor::row_vector(d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = g.cols();
                let rows = g.rows();
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![T::zero(); cols];
                    let mut gb = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let d = g.data()[r * cols + c];
                            gg[c] += d * xhat[r * cols + c];
                            gb[c] += d;
                        }
                    }
                    self.acc(grads, *gamma, Tensor::row_vector(gg));
                    self.acc(grads, *beta, Tensor::row_vector(gb));
                }
                if self.rg(*x) {
                    let n = T::of(cols as f64);
                    let mut dx = vec![T::zero(); rows * cols];
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            let d = g.data()[r * cols + c] * gv[c];
                            dxhat[c] = d;
                            s1 += d;
                            s2 += d * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            dx[r * cols + c] = rstd[r] / n * (n * dxhat[c] - s1 - xhat[r * cols + c] * s2);
                        }
                    }
                    self.acc(grads, *x, Tensor::row_vector(dx));
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let vt = self.value(*table);
                    let mut gt = Tensor::zeros(vt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *table, gt);
                }
            }
            Op::MeanRows { x, segments } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape());
                for (s, seg) in segments.iter().enumerate() {
                    let inv = T::one() / T::of(seg.len as f64);
                    for r in seg.start..seg.start + seg.len {
                        for (o, &x) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o += x * inv;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        self.acc(grads, p, Tensor::from_rows(rows, c, d));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        self.acc(grads, p, Tensor::row_vector(d));
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape());
                let c = vx.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::SoftmaxAll(a) => {
                let y = node.value.data();
                let dot: T = g.data().iter().zip(y).map(|(&gg, &yy)| gg * yy).sum();
                let d = g.data().iter().zip(y).map(|(&gg, &yy)| yy * (gg - dot)).collect();
                self.acc(grads, *a, Tensor::row_vector(d));
            }
            Op::CausalAttention { qkv, segments, heads, probs } => {
                let vq = self.value(*qkv);
                let width = vq.cols() / 3;
                let dh = width / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut gq = Tensor::zeros(vq.shape());
                let mut dp = Vec::new();
                let mut pi = 0;
                for seg in segments {
                    for h in 0..*heads {
                        let qo = h * dh;
                        let ko = width + h * dh;
                        let vo = 2 * width + h * dh;
                        for i in 0..seg.len {
                            let p = &probs[pi..pi + i + 1];
                            pi += i + 1;
                            let go = &g.row(seg.start + i)[qo..qo + dh];
                            dp.clear();
                            for j in 0..=i {
                                let v = &vq.row(seg.start + j)[vo..vo + dh];
                                dp.push(go.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>());
                            }
                            let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                            let q: Vec<T> = vq.row(seg.start + i)[qo..qo + dh].to_vec();
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - s) * scale;
                                let kr = seg.start + j;
                                let krow: Vec<T> = vq.row(kr)[ko..ko + dh].to_vec();
                                {
                                    let gqr = &mut gq.row_mut(seg.start + i)[qo..qo + dh];
                                    for (o, &k) in gqr.iter_mut().zip(&krow) {
                                        *o += ds * k;
                                    }
                                }
                                let gkr = gq.row_mut(kr);
                                for (o, &qq) in gkr[ko..ko + dh].iter_mut().zip(&q) {
                                    *o += ds * qq;
                                }
                                for (o, &gg) in gkr[vo..vo + dh].iter_mut().zip(go) {
                                    *o += p[j] * gg;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *qkv, gq);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vl = self.value(*logits);
                let cols = vl.cols();
                let up = g.item() / T::of(*count as f64);
                let mut d = vec![T::zero(); vl.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for c in 0..cols {
                        d[r * cols + c] = probs[r * cols + c] * up;
                    }
                    d[r * cols + t] -= up;
                }
                self.acc(grads, *logits, Tensor::row_vector(d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, Tensor::row_vector(vec![g.item(); n]));
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, g.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradients_by_hand() {
        // loss = sum(A @ B); dA = 1 @ B^T, dB = A^T @ 1
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.input(Tensor::from_rows(2, 1, vec![5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::row_vector(vec![3.0, 4.0]));
        let c = g.mul(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_values_trip_guard() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::row_vector(vec![f64::NAN]));
        let l = g.sum(a);
        assert!(g.finite_guard().is_err());
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn attention_first_position_copies_value() {
        // A single-position segment attends only to itself.
        let mut g = Graph::<f64>::new();
        let qkv = g.input(Tensor::from_rows(1, 6, vec![0.3, -0.2, 0.1, 0.5, 7.0, 8.0]));
        let out = g.causal_attention(qkv, &[Segment { start: 0, len: 1 }], 1).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, 8.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::from_rows(2, 11, vec![0.0; 22]));
        let ce = g.cross_entropy(l, &[Some(3), None]).unwrap();
        assert!((g.value(ce).item() - 11f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[None, None]).is_err());
    }
}
