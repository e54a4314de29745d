//! Recording graph with reverse-mode gradients.
//!
//! Every primitive call evaluates eagerly and appends one node. `backward`
//! walks the nodes in exact reverse recording order and accumulates each
//! contribution into its inputs' gradient buffers in a fixed order, so the
//! result is bit-identical from run to run.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{
    gelu_grad, matmul_at_into, matmul_bt_into, matmul_into, row_moments, softmax_slice,
};
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Primitive operations. Inputs are node indices.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `[m,k] · [k,n]`
    MatMul(usize, usize),
    /// `[m,k] · [n,k]ᵀ`
    MatMulBt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    /// `[m,n] + [n]` broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// Softmax over the last axis of a 2-D tensor.
    SoftmaxRows(usize),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
    /// `[n]` repeated into `[rows, n]`.
    BroadcastRows {
        x: usize,
        rows: usize,
    },
    /// `[m,n]` averaged over rows into `[1,n]`.
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    /// Per-row `1 - y·t / (‖y‖‖t‖ + eps)`, shape `[m]`.
    RowCosineDistance {
        y: usize,
        t: usize,
        eps: f64,
    },
    /// Per-row mean squared difference, shape `[m]`.
    RowMse {
        y: usize,
        t: usize,
    },
    /// Per-row mean Smooth-L1 (Huber with threshold `beta`), shape `[m]`.
    RowSmoothL1 {
        y: usize,
        t: usize,
        beta: f64,
    },
    /// Mean softmax cross-entropy of `[m,C]` logits against class indices.
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::BroadcastRows { x, .. }
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::CrossEntropy { logits: x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::RowCosineDistance { y, t, .. } | Op::RowMse { y, t } | Op::RowSmoothL1 { y, t, .. } => {
                vec![*y, *t]
            }
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::SoftmaxRows(..) => "softmax",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowCosineDistance { .. } => "cosine_distance",
            Op::RowMse { .. } => "mse",
            Op::RowSmoothL1 { .. } => "smooth_l1",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward pass plus a registry of named parameters.
#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
    param_index: HashMap<String, usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, id: usize) -> Var {
        Var { graph: self.id, id }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to graph {}",
                v.id, self.id
            )));
        }
        Ok(v.id)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.param_index.contains_key(&name) {
            return Err(Error::Graph(format!("parameter `{name}` registered twice")));
        }
        let v = self.leaf(value, true);
        self.param_index.insert(name.clone(), v.id);
        self.params.push((name, v.id));
        Ok(v)
    }

    /// Registers every entry of `store` as a parameter.
    pub fn register(&mut self, store: &ParamStore<T>) -> Result<()> {
        for (name, t) in store.iter() {
            self.param(name.clone(), t.clone())?;
        }
        Ok(())
    }

    /// Registers every entry of `store` as a constant reachable by name
    /// through [`Graph::param_var`] but excluded from gradients.
    pub fn register_frozen(&mut self, store: &ParamStore<T>) -> Result<()> {
        for (name, t) in store.iter() {
            if self.param_index.contains_key(name) {
                return Err(Error::Graph(format!("parameter `{name}` registered twice")));
            }
            let v = self.leaf(t.clone(), false);
            self.param_index.insert(name.clone(), v.id);
        }
        Ok(())
    }

    pub fn param_var(&self, name: &str) -> Result<Var> {
        self.param_index
            .get(name)
            .map(|&id| self.var(id))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().map(|n| &n.op)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let value = eval(&op, &self.nodes)?;
        let value = value.check_finite(op.name())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::MatMul(self.check(a)?, self.check(b)?);
        self.push(op)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::MatMulBt(self.check(a)?, self.check(b)?);
        self.push(op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add(self.check(a)?, self.check(b)?);
        self.push(op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul(self.check(a)?, self.check(b)?);
        self.push(op)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let op = Op::AddRow(self.check(x)?, self.check(row)?);
        self.push(op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let op = Op::Scale(self.check(x)?, c);
        self.push(op)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let op = Op::Gelu(self.check(x)?);
        self.push(op)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layernorm eps must be positive, got {eps}")));
        }
        let op = Op::LayerNorm {
            x: self.check(x)?,
            gamma: self.check(gamma)?,
            beta: self.check(beta)?,
            eps,
        };
        self.push(op)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let op = Op::SoftmaxRows(self.check(x)?);
        self.push(op)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let op = Op::SliceCols {
            x: self.check(x)?,
            start,
            len,
        };
        self.push(op)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        self.push(Op::ConcatCols(ids))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        self.push(Op::ConcatRows(ids))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let op = Op::GatherRows {
            x: self.check(x)?,
            indices: indices.to_vec(),
        };
        self.push(op)
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let op = Op::BroadcastRows {
            x: self.check(x)?,
            rows,
        };
        self.push(op)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let op = Op::MeanRows(self.check(x)?);
        self.push(op)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let op = Op::Sum(self.check(x)?);
        self.push(op)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let op = Op::Mean(self.check(x)?);
        self.push(op)
    }

    pub fn cosine_distance_rows(&mut self, y: Var, t: Var, eps: f64) -> Result<Var> {
        let op = Op::RowCosineDistance {
            y: self.check(y)?,
            t: self.check(t)?,
            eps,
        };
        self.push(op)
    }

    pub fn mse_rows(&mut self, y: Var, t: Var) -> Result<Var> {
        let op = Op::RowMse {
            y: self.check(y)?,
            t: self.check(t)?,
        };
        self.push(op)
    }

    pub fn smooth_l1_rows(&mut self, y: Var, t: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::InvalidArgument(format!("smooth-l1 beta must be positive, got {beta}")));
        }
        let op = Op::RowSmoothL1 {
            y: self.check(y)?,
            t: self.check(t)?,
            beta,
        };
        self.push(op)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let op = Op::CrossEntropy {
            logits: self.check(logits)?,
            labels: labels.to_vec(),
        };
        self.push(op)
    }

    /// Re-executes the record from its leaves.
    pub fn replay(&self) -> Result<Self> {
        let mut out = Self {
            id: self.id,
            nodes: Vec::with_capacity(self.nodes.len()),
            params: self.params.clone(),
            param_index: self.param_index.clone(),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => eval(&node.op, &out.nodes)?.check_finite(node.op.name())?,
            };
            out.nodes.push(Node {
                value,
                op: node.op.clone(),
                requires_grad: node.requires_grad,
            });
        }
        Ok(out)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf
    /// it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            grads[root] = Some(Tensor::ones(self.nodes[root].value.shape()));
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        let mut by_name = Vec::new();
        for (name, id) in &self.params {
            if *id <= root {
                if let Some(g) = grads[*id].take() {
                    by_name.push((name.clone(), *id, g));
                }
            }
        }
        Ok(Gradients {
            graph: self.id,
            entries: by_name,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: usize, contribution: Tensor<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a = *a + *c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let rg = |i: usize| self.nodes[i].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let n = val(*b).shape()[1];
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_bt_into(g.data(), val(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(vec![m, k], ga)?);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_at_into(val(*a).data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_vec(vec![k, n], gb)?);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(*a).dims2("matmul_bt")?;
                let n = val(*b).shape()[0];
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_into(g.data(), val(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(vec![m, k], ga)?);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    matmul_at_into(g.data(), val(*a).data(), &mut gb, m, n, k);
                    self.accumulate(grads, *b, Tensor::from_vec(vec![n, k], gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape().to_vec(), d)?);
                }
                if rg(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                if rg(*r) {
                    let sums = column_sums(g)?;
                    self.accumulate(grads, *r, sums.reshape(val(*r).shape().to_vec())?);
                }
            }
            Op::Scale(x, c) => {
                let c = T::from_f64(*c);
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Gelu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x);
                let gam = val(*gamma).data();
                let d = gam.len();
                let eps = T::from_f64(*eps);
                let nf = T::from_f64(d as f64);
                let mut gx = vec![T::zero(); xv.numel()];
                let mut ggam = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for ((xr, gr), gxr) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let (mean, rstd) = row_moments(xr, eps);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gam[j];
                        m1 = m1 + dxhat[j];
                        m2 = m2 + dxhat[j] * xhat[j];
                        ggam[j] = ggam[j] + gr[j] * xhat[j];
                        gbeta[j] = gbeta[j] + gr[j];
                    }
                    let m1 = m1 / nf;
                    let m2 = m2 / nf;
                    for j in 0..d {
                        gxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if rg(*x) {
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape().to_vec(), gx)?);
                }
                if rg(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::from_vec(val(*gamma).shape().to_vec(), ggam)?);
                }
                if rg(*beta) {
                    self.accumulate(grads, *beta, Tensor::from_vec(val(*beta).shape().to_vec(), gbeta)?);
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = out.dims2("softmax")?;
                let mut gx = vec![T::zero(); out.numel()];
                for ((y, gr), gxr) in out.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot = dot + gr[j] * y[j];
                    }
                    for j in 0..n {
                        gxr[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape().to_vec(), gx)?);
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = val(*x).dims2("slice_cols")?;
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, Tensor::from_vec(vec![m, n], gx)?);
            }
            Op::ConcatCols(xs) => {
                let (m, total) = g.dims2("concat_cols")?;
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).shape()[1];
                    if rg(x) {
                        let mut gx = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gx.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, x, Tensor::from_vec(vec![m, w], gx)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let (_, n) = g.dims2("concat_rows")?;
                let mut row = 0;
                for &x in xs {
                    let r = val(x).shape()[0];
                    if rg(x) {
                        let gx = g.data()[row * n..(row + r) * n].to_vec();
                        self.accumulate(grads, x, Tensor::from_vec(val(x).shape().to_vec(), gx)?);
                    }
                    row += r;
                }
            }
            Op::GatherRows { x, indices } => {
                let (m, n) = val(*x).dims2("gather_rows")?;
                let mut gx = vec![T::zero(); m * n];
                for (k, &i) in indices.iter().enumerate() {
                    for (a, &b) in gx[i * n..(i + 1) * n].iter_mut().zip(g.row(k)) {
                        *a = *a + b;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vec![m, n], gx)?);
            }
            Op::BroadcastRows { x, .. } => {
                let sums = column_sums(g)?;
                self.accumulate(grads, *x, sums.reshape(val(*x).shape().to_vec())?);
            }
            Op::MeanRows(x) => {
                let (m, n) = val(*x).dims2("mean_rows")?;
                let inv = T::one() / T::from_f64(m as f64);
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(g.data().iter().map(|&v| v * inv));
                }
                self.accumulate(grads, *x, Tensor::from_vec(vec![m, n], gx)?);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item()));
            }
            Op::Mean(x) => {
                let n = T::from_f64(val(*x).numel() as f64);
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::RowCosineDistance { y, t, eps } => {
                let (m, d) = val(*y).dims2("cosine_distance")?;
                let eps = T::from_f64(*eps);
                let mut gy = vec![T::zero(); m * d];
                let mut gt = vec![T::zero(); m * d];
                for i in 0..m {
                    let yr = val(*y).row(i);
                    let tr = val(*t).row(i);
                    let (s, ny, nt) = dot_norms(yr, tr);
                    let den = ny * nt + eps;
                    let gi = g.data()[i];
                    for j in 0..d {
                        let dy_norm = if ny > T::zero() { nt * yr[j] / ny } else { T::zero() };
                        let dt_norm = if nt > T::zero() { ny * tr[j] / nt } else { T::zero() };
                        gy[i * d + j] = -gi * (tr[j] / den - s * dy_norm / (den * den));
                        gt[i * d + j] = -gi * (yr[j] / den - s * dt_norm / (den * den));
                    }
                }
                if rg(*y) {
                    self.accumulate(grads, *y, Tensor::from_vec(vec![m, d], gy)?);
                }
                if rg(*t) {
                    self.accumulate(grads, *t, Tensor::from_vec(vec![m, d], gt)?);
                }
            }
            Op::RowMse { y, t } => {
                let (m, d) = val(*y).dims2("mse")?;
                let scale = T::from_f64(2.0 / d as f64);
                self.elementwise_pair_grad(*y, *t, g, m, d, |diff| diff * scale, grads)?;
            }
            Op::RowSmoothL1 { y, t, beta } => {
                let (m, d) = val(*y).dims2("smooth_l1")?;
                let beta = T::from_f64(*beta);
                let inv_d = T::from_f64(1.0 / d as f64);
                self.elementwise_pair_grad(
                    *y,
                    *t,
                    g,
                    m,
                    d,
                    |diff| {
                        let dd = if diff.abs() < beta { diff / beta } else { diff.signum() };
                        dd * inv_d
                    },
                    grads,
                )?;
            }
            Op::CrossEntropy { logits, labels } => {
                let (m, c) = val(*logits).dims2("cross_entropy")?;
                let scale = g.item() / T::from_f64(m as f64);
                let mut gl = val(*logits).data().to_vec();
                for (i, row) in gl.chunks_mut(c).enumerate() {
                    softmax_slice(row);
                    row[labels[i]] = row[labels[i]] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(vec![m, c], gl)?);
            }
        }
        Ok(())
    }

    /// Gradient of per-row `mean_j f(y_ij - t_ij)` where `dfdiff` already
    /// includes the `1/d` factor.
    #[allow(clippy::too_many_arguments)]
    fn elementwise_pair_grad(
        &self,
        y: usize,
        t: usize,
        g: &Tensor<T>,
        m: usize,
        d: usize,
        dfdiff: impl Fn(T) -> T,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let yv = self.nodes[y].value.data();
        let tv = self.nodes[t].value.data();
        let mut gy = vec![T::zero(); m * d];
        for i in 0..m {
            let gi = g.data()[i];
            for j in 0..d {
                gy[i * d + j] = gi * dfdiff(yv[i * d + j] - tv[i * d + j]);
            }
        }
        if self.nodes[t].requires_grad {
            let gt = gy.iter().map(|&v| -v).collect();
            self.accumulate(grads, t, Tensor::from_vec(vec![m, d], gt)?);
        }
        self.accumulate(grads, y, Tensor::from_vec(vec![m, d], gy)?);
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = g.dims2("column_sums")?;
    let mut out = vec![T::zero(); n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::from_vec(vec![n], out)
}

fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut s = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    (s, na.sqrt(), nb.sqrt())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn eval<T: Scalar>(op: &Op, nodes: &[Node<T>]) -> Result<Tensor<T>> {
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => Err(Error::Graph("leaf has no evaluation rule".into())),
        Op::MatMul(a, b) => val(*a).matmul(val(*b)),
        Op::MatMulBt(a, b) => {
            let (m, k) = val(*a).dims2("matmul_bt")?;
            let (n, k2) = val(*b).dims2("matmul_bt")?;
            if k != k2 {
                return Err(Error::shape("matmul_bt", format!("[{m},{k}] x [{n},{k2}]ᵀ")));
            }
            let mut out = vec![T::zero(); m * n];
            matmul_bt_into(val(*a).data(), val(*b).data(), &mut out, m, k, n);
            Tensor::from_vec(vec![m, n], out)
        }
        Op::Add(a, b) => {
            same_shape("add", val(*a), val(*b))?;
            let d = val(*a).data().iter().zip(val(*b).data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(val(*a).shape().to_vec(), d)
        }
        Op::Mul(a, b) => {
            same_shape("mul", val(*a), val(*b))?;
            let d = val(*a).data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(val(*a).shape().to_vec(), d)
        }
        Op::AddRow(x, r) => {
            let (m, n) = val(*x).dims2("add_row")?;
            if val(*r).numel() != n {
                return Err(Error::shape("add_row", format!("[{m},{n}] + {:?}", val(*r).shape())));
            }
            let rv = val(*r).data();
            let mut d = val(*x).data().to_vec();
            for row in d.chunks_mut(n) {
                for (a, &b) in row.iter_mut().zip(rv) {
                    *a = *a + b;
                }
            }
            Tensor::from_vec(vec![m, n], d)
        }
        Op::Scale(x, c) => {
            let c = T::from_f64(*c);
            Ok(val(*x).map(|v| v * c))
        }
        Op::Gelu(x) => val(*x).gelu(),
        Op::LayerNorm { x, gamma, beta, eps } => val(*x).layernorm(val(*gamma), val(*beta), T::from_f64(*eps)),
        Op::SoftmaxRows(x) => {
            val(*x).dims2("softmax")?;
            val(*x).softmax(1)
        }
        Op::SliceCols { x, start, len } => {
            let (m, n) = val(*x).dims2("slice_cols")?;
            if *len == 0 || start + len > n {
                return Err(Error::shape("slice_cols", format!("cols {start}..{} of {n}", start + len)));
            }
            let mut d = Vec::with_capacity(m * len);
            for i in 0..m {
                d.extend_from_slice(&val(*x).row(i)[*start..start + len]);
            }
            Tensor::from_vec(vec![m, *len], d)
        }
        Op::ConcatCols(xs) => {
            let first = xs.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
            let (m, _) = val(*first).dims2("concat_cols")?;
            let mut widths = Vec::with_capacity(xs.len());
            for &x in xs {
                let (r, c) = val(x).dims2("concat_cols")?;
                if r != m {
                    return Err(Error::shape("concat_cols", format!("row counts {r} vs {m}")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut d = Vec::with_capacity(m * total);
            for i in 0..m {
                for &x in xs {
                    d.extend_from_slice(val(x).row(i));
                }
            }
            Tensor::from_vec(vec![m, total], d)
        }
        Op::ConcatRows(xs) => {
            let first = xs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
            let (_, n) = val(*first).dims2("concat_rows")?;
            let mut rows = 0;
            let mut d = Vec::new();
            for &x in xs {
                let (r, c) = val(x).dims2("concat_rows")?;
                if c != n {
                    return Err(Error::shape("concat_rows", format!("widths {c} vs {n}")));
                }
                rows += r;
                d.extend_from_slice(val(x).data());
            }
            Tensor::from_vec(vec![rows, n], d)
        }
        Op::GatherRows { x, indices } => {
            if indices.is_empty() {
                return Err(Error::shape("gather_rows", "empty index set"));
            }
            val(*x).gather_rows(indices)
        }
        Op::BroadcastRows { x, rows } => {
            let n = val(*x).numel();
            if *rows == 0 {
                return Err(Error::shape("broadcast_rows", "zero rows"));
            }
            let mut d = Vec::with_capacity(rows * n);
            for _ in 0..*rows {
                d.extend_from_slice(val(*x).data());
            }
            Tensor::from_vec(vec![*rows, n], d)
        }
        Op::MeanRows(x) => {
            let (m, _) = val(*x).dims2("mean_rows")?;
            let sums = column_sums(val(*x))?;
            let inv = T::one() / T::from_f64(m as f64);
            let n = sums.numel();
            sums.map(|v| v * inv).reshape(vec![1, n])
        }
        Op::Sum(x) => {
            let mut s = T::zero();
            for &v in val(*x).data() {
                s = s + v;
            }
            Ok(Tensor::scalar(s))
        }
        Op::Mean(x) => {
            let mut s = T::zero();
            for &v in val(*x).data() {
                s = s + v;
            }
            Ok(Tensor::scalar(s / T::from_f64(val(*x).numel() as f64)))
        }
        Op::RowCosineDistance { y, t, eps } => {
            same_shape("cosine_distance", val(*y), val(*t))?;
            let (m, _) = val(*y).dims2("cosine_distance")?;
            let eps = T::from_f64(*eps);
            let d = (0..m)
                .map(|i| {
                    let (s, ny, nt) = dot_norms(val(*y).row(i), val(*t).row(i));
                    T::one() - s / (ny * nt + eps)
                })
                .collect();
            Tensor::from_vec(vec![m], d)
        }
        Op::RowMse { y, t } => row_reduce("mse", val(*y), val(*t), |diff| diff * diff),
        Op::RowSmoothL1 { y, t, beta } => {
            let beta = T::from_f64(*beta);
            let half = T::from_f64(0.5);
            row_reduce("smooth_l1", val(*y), val(*t), |diff| {
                let a = diff.abs();
                if a < beta {
                    half * a * a / beta
                } else {
                    a - half * beta
                }
            })
        }
        Op::CrossEntropy { logits, labels } => {
            let (m, c) = val(*logits).dims2("cross_entropy")?;
            if labels.len() != m || labels.iter().any(|&l| l >= c) {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} labels for {m} rows of {c} classes", labels.len()),
                ));
            }
            let mut total = T::zero();
            let mut buf = vec![T::zero(); c];
            for (i, row) in val(*logits).data().chunks(c).enumerate() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (b, &v) in buf.iter_mut().zip(row) {
                    *b = (v - max).exp();
                    z = z + *b;
                }
                total = total - (row[labels[i]] - max - z.ln());
            }
            Ok(Tensor::scalar(total / T::from_f64(m as f64)))
        }
    }
}

fn row_reduce<T: Scalar>(
    op: &'static str,
    y: &Tensor<T>,
    t: &Tensor<T>,
    f: impl Fn(T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, y, t)?;
    let (m, d) = y.dims2(op)?;
    let inv = T::from_f64(1.0 / d as f64);
    let out = (0..m)
        .map(|i| {
            let mut s = T::zero();
            for (&a, &b) in y.row(i).iter().zip(t.row(i)) {
                s = s + f(a - b);
            }
            s * inv
        })
        .collect();
    Tensor::from_vec(vec![m], out)
}

/// Gradients of trainable leaves, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    graph: u64,
    entries: Vec<(String, usize, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.entries.iter().find(|(_, id, _)| *id == v.id).map(|(_, _, g)| g)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, _, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, _, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gradients as a store keyed by parameter name.
    pub fn into_store(self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for (n, _, g) in self.entries {
            s.insert(n, g);
        }
        s
    }
}
