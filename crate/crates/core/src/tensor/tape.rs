//! Reverse-mode differentiation over a flat operation record.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards visits them in
//! reverse topological order, each exactly once.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::array::{matmul_nt_raw, matmul_raw, matmul_tn_raw};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Scalar loss with an analytic local gradient: returns the value and
/// `d value / d x` for every entry of `x`.
pub type LossFn = Arc<dyn Fn(&Tensor) -> (f64, Vec<f64>) + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    /// Auxiliary data: per-row inverse standard deviation.
    LayerNorm(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    /// Elementwise product with a fixed, pre-scaled mask.
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    /// Auxiliary data: local gradient.
    Loss {
        x: Var,
        f: LossFn,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNorm(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a) => vec![*a],
            Op::SliceCols { x, .. } | Op::GatherRows { x, .. } | Op::Dropout { x, .. } | Op::Loss { x, .. } => {
                vec![*x]
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    aux: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    params: BTreeMap<String, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcastable(lhs: &Tensor, rhs: &Tensor) -> bool {
    lhs.shape() == rhs.shape() || (rhs.rows() == 1 && rhs.cols() == lhs.cols() && rhs.len() == lhs.cols())
}

fn zip_broadcast(x: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = x.cols();
    let data = if x.shape() == y.shape() {
        x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect()
    } else {
        x.data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(y.data()).map(|(&p, &q)| f(p, q)))
            .collect()
    };
    x.with_data(data)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            params: BTreeMap::new(),
        }
    }

    /// A tape whose [`Tape::param`] leaves come from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            params: BTreeMap::new(),
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

    /// Leaf node of a parameter, if the forward pass read it.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluates `op` on the current values of its inputs.
    fn compute(&self, op: &Op) -> (Tensor, Vec<f64>) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let plain = |t: Tensor| (t, Vec::new());
        match op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2();
                let n = val(b).cols();
                let data = matmul_raw(val(a).data(), val(b).data(), m, k, n);
                plain(Tensor::new(vec![m, n], data).expect("checked shapes"))
            }
            Op::Transpose(a) => {
                let x = val(a);
                let (m, n) = x.dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = x.data()[i * n + j];
                    }
                }
                plain(Tensor::new(vec![n, m], data).expect("checked shapes"))
            }
            Op::Add(a, b) => plain(zip_broadcast(val(a), val(b), |p, q| p + q)),
            Op::Sub(a, b) => plain(zip_broadcast(val(a), val(b), |p, q| p - q)),
            Op::Mul(a, b) => plain(zip_broadcast(val(a), val(b), |p, q| p * q)),
            Op::Scale(a, c) => plain(val(a).map(|x| x * c)),
            Op::AddScalar(a, c) => plain(val(a).map(|x| x + c)),
            Op::Sigmoid(a) => plain(val(a).map(sigmoid)),
            Op::Tanh(a) => plain(val(a).map(f64::tanh)),
            Op::Relu(a) => plain(val(a).map(|x| x.max(0.0))),
            Op::SoftmaxRows(a) => {
                let x = val(a);
                let cols = x.cols();
                let mut data = x.data().to_vec();
                for row in data.chunks_exact_mut(cols) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                plain(x.with_data(data))
            }
            Op::LayerNorm(a) => {
                let x = val(a);
                let cols = x.cols();
                let mut data = x.data().to_vec();
                let mut inv_std = Vec::with_capacity(x.rows());
                for row in data.chunks_exact_mut(cols) {
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * is;
                    }
                    inv_std.push(is);
                }
                (x.with_data(data), inv_std)
            }
            Op::ConcatCols(parts) => {
                let rows = val(&parts[0]).rows();
                let total: usize = parts.iter().map(|p| val(p).cols()).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(val(p).row(r));
                    }
                }
                plain(Tensor::new(vec![rows, total], data).expect("checked shapes"))
            }
            Op::ConcatRows(parts) => {
                let cols = val(&parts[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    data.extend_from_slice(val(p).data());
                    rows += val(p).rows();
                }
                plain(Tensor::new(vec![rows, cols], data).expect("checked shapes"))
            }
            Op::SliceCols { x, start, end } => {
                let x = val(x);
                let mut data = Vec::with_capacity(x.rows() * (end - start));
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.row(r)[*start..*end]);
                }
                plain(Tensor::new(vec![x.rows(), end - start], data).expect("checked shapes"))
            }
            Op::GatherRows { x, rows } => {
                let x = val(x);
                let mut data = Vec::with_capacity(rows.len() * x.cols());
                for &r in rows {
                    data.extend_from_slice(x.row(r));
                }
                plain(Tensor::new(vec![rows.len(), x.cols()], data).expect("checked shapes"))
            }
            Op::Sum(a) => plain(Tensor::scalar(val(a).data().iter().sum())),
            Op::Mean(a) => {
                let x = val(a);
                plain(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
            }
            Op::MeanRows(a) => {
                let x = val(a);
                let (rows, cols) = x.dims2();
                let mut data = vec![0.0; cols];
                for row in x.data().chunks_exact(cols) {
                    for (d, v) in data.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                for d in data.iter_mut() {
                    *d /= rows as f64;
                }
                plain(Tensor::new(vec![1, cols], data).expect("cols > 0"))
            }
            Op::Dropout { x, mask } => {
                let x = val(x);
                plain(x.with_data(x.data().iter().zip(mask).map(|(v, m)| v * m).collect()))
            }
            Op::Loss { x, f } => {
                let (value, local) = f(val(x));
                (Tensor::scalar(value), local)
            }
        }
    }

    fn record(&mut self, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&v| self.rg(v));
        let (value, aux) = self.compute(&op);
        self.nodes.push(Node {
            value,
            aux,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            aux: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A free leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Config("tape has no parameter store".into()))?;
        let value = store.require(name)?.clone();
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).cols() != self.value(b).rows() || self.shape(b).len() > 2 || self.shape(a).len() > 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        Ok(self.record(Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        Ok(self.record(Op::Transpose(a)))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if broadcastable(self.value(a), self.value(b)) {
            Ok(())
        } else {
            Err(self.shape_err(op, a, b))
        }
    }

    /// `a + b`; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        Ok(self.record(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        Ok(self.record(Op::Sub(a, b)))
    }

    /// Elementwise product; `b` may be a broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        Ok(self.record(Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::AddScalar(a, c))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a))
    }

    /// Softmax over the last axis (each row), with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.record(Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        self.record(Op::LayerNorm(a))
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(self.shape_err("concat_cols", parts[0], bad));
        }
        Ok(self.record(Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks along rows; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).cols() != cols) {
            return Err(self.shape_err("concat_rows", parts[0], bad));
        }
        Ok(self.record(Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > self.value(a).cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, end],
            });
        }
        Ok(self.record(Op::SliceCols { x: a, start, end }))
    }

    /// Rows picked by index (repeats allowed). Also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(a).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        if rows.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        Ok(self.record(Op::GatherRows {
            x: a,
            rows: rows.to_vec(),
        }))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        self.gather_rows(a, &[index])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.record(Op::Mean(a))
    }

    /// Column-wise mean over rows, giving a `[1, cols]` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        self.record(Op::MeanRows(a))
    }

    /// Inverted dropout with keep-probability `1 - rate`; identity when `rate == 0`.
    /// The sampled mask is stored with the node.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.record(Op::Dropout { x: a, mask })
    }

    /// Records a scalar loss of `x` computed by `f`, which also supplies the
    /// local gradient.
    pub fn custom_loss(&mut self, x: Var, f: LossFn) -> Var {
        self.record(Op::Loss { x, f })
    }

    /// Nodes whose values depend on `leaf`, in tape order.
    pub fn downstream(&self, leaf: Var) -> Vec<usize> {
        let mut dirty = vec![false; self.nodes.len()];
        dirty[leaf.0] = true;
        let mut out = Vec::new();
        for id in leaf.0 + 1..self.nodes.len() {
            if self.nodes[id].op.inputs().iter().any(|v| dirty[v.0]) {
                dirty[id] = true;
                out.push(id);
            }
        }
        out
    }

    /// Value of `output` with entry `index` of `leaf` replaced by `value`,
    /// recomputing only the nodes in `downstream` (from [`Tape::downstream`]).
    /// The tape is restored afterwards. The arithmetic is identical to
    /// rerunning the forward pass with the modified leaf.
    pub fn probe(&mut self, leaf: Var, index: usize, value: f64, downstream: &[usize], output: Var) -> f64 {
        let original = self.nodes[leaf.0].value.data()[index];
        self.nodes[leaf.0].value.data_mut()[index] = value;
        let mut saved = Vec::with_capacity(downstream.len());
        for &id in downstream.iter().take_while(|&&id| id <= output.0) {
            let (v, aux) = self.compute(&self.nodes[id].op);
            let node = &mut self.nodes[id];
            saved.push((
                id,
                std::mem::replace(&mut node.value, v),
                std::mem::replace(&mut node.aux, aux),
            ));
        }
        let result = if output == leaf {
            value
        } else {
            self.nodes[output.0].value.data()[0]
        };
        for (id, v, aux) in saved {
            self.nodes[id].value = v;
            self.nodes[id].aux = aux;
        }
        self.nodes[leaf.0].value.data_mut()[index] = original;
        result
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let mut params = BTreeMap::new();
        if let Some(store) = self.store {
            for (name, tensor) in store.iter() {
                let g = self
                    .params
                    .get(name)
                    .and_then(|v| grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
                params.insert(name.clone(), g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a gradient over rows when the forward op broadcast `b` across them.
    fn reduce_to(&self, g: &Tensor, target: Var) -> Tensor {
        let t = self.value(target);
        if g.shape() == t.shape() {
            return g.clone();
        }
        let (rows, cols) = g.dims2();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, v) in data.iter_mut().zip(g.row(r)) {
                *d += v;
            }
        }
        t.with_data(data)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let da = matmul_nt_raw(g.data(), self.value(*b).data(), m, n, k);
                    let t = self.value(*a).with_data(da);
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let db = matmul_tn_raw(self.value(*a).data(), g.data(), m, k, n);
                    let t = self.value(*b).with_data(db);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = g.data()[j * m + i];
                    }
                }
                let t = self.value(*a).with_data(data);
                self.accumulate(grads, *a, t);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let t = self.reduce_to(g, *b);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let t = self.reduce_to(&g.map(|x| -x), *b);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let cols = x.cols();
                let broadcast = x.shape() != y.shape();
                let yv = |i: usize| {
                    if broadcast {
                        y.data()[i % cols]
                    } else {
                        y.data()[i]
                    }
                };
                if self.rg(*a) {
                    let da = g.data().iter().enumerate().map(|(i, gv)| gv * yv(i)).collect();
                    self.accumulate(grads, *a, x.with_data(da));
                }
                if self.rg(*b) {
                    let full = g.with_data(g.data().iter().zip(x.data()).map(|(gv, xv)| gv * xv).collect());
                    let t = self.reduce_to(&full, *b);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, g.with_data(d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, t)| gv * (1.0 - t * t))
                    .collect();
                self.accumulate(grads, *a, g.with_data(d));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, g.with_data(d));
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = out.dims2();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        d[r * cols + c] = y[c] * (gy[c] - dot);
                    }
                }
                self.accumulate(grads, *a, g.with_data(d));
            }
            Op::LayerNorm(x) => {
                let inv_std = &node.aux;
                let (rows, cols) = out.dims2();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let mean_g = gy.iter().sum::<f64>() / cols as f64;
                    let mean_gy = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        d[r * cols + c] = inv_std[r] * (gy[c] - mean_g - y[c] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, g.with_data(d));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        let t = self.value(p).with_data(d);
                        self.accumulate(grads, p, t);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let t = self.value(p).with_data(g.data()[offset..offset + n].to_vec());
                        self.accumulate(grads, p, t);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start, .. } => {
                let src = self.value(*x);
                let (rows, cols) = src.dims2();
                let width = g.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, src.with_data(d));
            }
            Op::GatherRows { x, rows } => {
                let src = self.value(*x);
                let cols = src.cols();
                let mut d = vec![0.0; src.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, v) in d[r * cols..(r + 1) * cols].iter_mut().zip(g.row(i)) {
                        *dst += v;
                    }
                }
                self.accumulate(grads, *x, src.with_data(d));
            }
            Op::Sum(a) => {
                let gv = g.item();
                let t = self.value(*a).map(|_| gv);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.item() / x.len() as f64;
                self.accumulate(grads, *a, x.map(|_| gv));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let (rows, cols) = x.dims2();
                let mut d = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    d.extend(g.data().iter().map(|v| v / rows as f64));
                }
                self.accumulate(grads, *a, x.with_data(d));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accumulate(grads, *x, g.with_data(d));
            }
            Op::Loss { x, .. } => {
                let local = &node.aux;
                let gv = g.item();
                let t = self.value(*x).with_data(local.iter().map(|l| l * gv).collect());
                self.accumulate(grads, *x, t);
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if it was reached.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of the tape's store; unused parameters
    /// get zero tensors of matching shape.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.softmax_rows(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[2, 5], 3.7));
        let y = tape.layer_norm(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b).unwrap_err() {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("{e}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        store.insert("w".into(), t(&[&[1.0, -2.0], &[0.5, 4.0]])).unwrap();
        store.insert("unused".into(), Tensor::filled(&[3], 9.0)).unwrap();
        let mut tape = Tape::with_params(&store);
        let w = tape.param("w").unwrap();
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params()["w"], Tensor::ones(&[2, 2]));
        assert_eq!(grads.params()["unused"], Tensor::zeros(&[3]));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let c = 3.0;
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::scalar(0.0));
        let s = tape.sigmoid(w);
        let y = tape.scale(s, c);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(w).unwrap().item(), 0.25 * c);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn repeated_param_shares_one_node() {
        let mut store = ParamStore::new();
        store.insert("w".into(), Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::with_params(&store);
        let a = tape.param("w").unwrap();
        let b = tape.param("w").unwrap();
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params()["w"].item(), 4.0);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 2]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
        let y = tape.dropout(x, 0.5, &mut rng);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
