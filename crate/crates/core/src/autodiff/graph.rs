//! Append-only computation graph with eager forward evaluation and a
//! reverse sweep for gradients.
//!
//! Every operation is evaluated as soon as it is appended, so a node's
//! inputs always sit at smaller indices and the node vector is already in
//! topological order. `backward` walks it once from the end.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance inside batch normalization.
pub const BATCH_NORM_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node; only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Fieldless operation tag, used for error messages and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Param,
    MatMul,
    Add,
    Mul,
    Sub,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    ClampMin,
    Scale,
    Sum,
    Mean,
    SumAll,
    MeanAll,
    Lookup,
    Concat,
    IndexSelect,
    Reshape,
    BatchNorm,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sub => "sub",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::ClampMin => "clamp_min",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::Lookup => "lookup",
            OpKind::Concat => "concat",
            OpKind::IndexSelect => "index_select",
            OpKind::Reshape => "reshape",
            OpKind::BatchNorm => "batch_norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally tracked running statistics.
    Inference {
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
}

/// A differentiable operation together with its static configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Elementwise add; the right operand may omit the leading batch axis.
    Add,
    Mul,
    Sub,
    Relu,
    Tanh,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
    /// Natural log; non-positive inputs are a domain error.
    Log,
    ClampMin(f64),
    Scale(f64),
    Sum {
        axis: usize,
    },
    Mean {
        axis: usize,
    },
    SumAll,
    MeanAll,
    /// Row lookup into a `[rows, dim]` table.
    Lookup {
        indices: Vec<usize>,
    },
    /// Concatenation along the last axis.
    Concat,
    /// Column selection along the last axis.
    IndexSelect {
        indices: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Inputs: `x [batch, dim]`, `scale [dim]`, `shift [dim]`.
    BatchNorm(BatchNormMode),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Sub => OpKind::Sub,
            Op::Relu => OpKind::Relu,
            Op::Tanh => OpKind::Tanh,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softmax => OpKind::Softmax,
            Op::Log => OpKind::Log,
            Op::ClampMin(_) => OpKind::ClampMin,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumAll => OpKind::SumAll,
            Op::MeanAll => OpKind::MeanAll,
            Op::Lookup { .. } => OpKind::Lookup,
            Op::Concat => OpKind::Concat,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::BatchNorm(_) => OpKind::BatchNorm,
        }
    }
}

#[derive(Debug)]
enum Record {
    Constant,
    Param(String),
    Op(Op),
}

/// Values retained from the forward pass of a batch-norm node.
#[derive(Debug)]
struct BatchNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    record: Record,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
    bn: Option<BatchNormCache>,
}

/// Gradients of a scalar with respect to every reachable parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub(crate) fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        GradientMap(map)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    differentiated: bool,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            differentiated: false,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Allows another `backward` on the same graph.
    pub fn reset(&mut self) {
        self.differentiated = false;
    }

    /// Scales the backward rule of every node of `kind` by 1.5.
    ///
    /// Exists so gradient checking can be shown to catch broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn resolve(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(id.index)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.nodes[self.resolve(id)?].value)
    }

    /// Batch mean and biased variance computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Result<Option<(&[f64], &[f64])>> {
        let node = &self.nodes[self.resolve(id)?];
        let train = matches!(node.record, Record::Op(Op::BatchNorm(BatchNormMode::Train)));
        Ok(node
            .bn
            .as_ref()
            .filter(|_| train)
            .map(|c| (c.batch_mean.as_slice(), c.batch_var.as_slice())))
    }

    fn push(&mut self, record: Record, inputs: Vec<usize>, value: Tensor, needs_grad: bool) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node {
            record,
            inputs,
            value,
            needs_grad,
            bn: None,
        });
        NodeId { graph: self.id, index }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Record::Constant, vec![], value.with_requires_grad(false), false)
    }

    /// Registers a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Record::Param(name.into()), vec![], value.with_requires_grad(true), true)
    }

    /// Appends `op` applied to `inputs` and evaluates it.
    pub fn build(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let idx: Vec<usize> = inputs.iter().map(|&i| self.resolve(i)).collect::<Result<_>>()?;
        let kind = op.kind();
        let arity_ok = match &op {
            Op::MatMul | Op::Add | Op::Mul | Op::Sub => idx.len() == 2,
            Op::BatchNorm(_) => idx.len() == 3,
            Op::Concat => !idx.is_empty(),
            _ => idx.len() == 1,
        };
        if !arity_ok {
            return Err(Error::invalid(
                "operation",
                format!("{} does not take {} inputs", kind.name(), idx.len()),
            ));
        }
        let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, bn) = forward(&op, &vals)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let needs_grad = idx.iter().any(|&i| self.nodes[i].needs_grad);
        let id = self.push(Record::Op(op), idx, value, needs_grad);
        self.nodes[id.index].bn = bn;
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Mul, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Sub, &[a, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.build(Op::Relu, &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.build(Op::Tanh, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.build(Op::Sigmoid, &[x])
    }
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.build(Op::Softmax, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.build(Op::Log, &[x])
    }
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.build(Op::ClampMin(floor), &[x])
    }
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.build(Op::Scale(factor), &[x])
    }
    pub fn sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.build(Op::Sum { axis }, &[x])
    }
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.build(Op::Mean { axis }, &[x])
    }
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.build(Op::SumAll, &[x])
    }
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.build(Op::MeanAll, &[x])
    }
    pub fn lookup(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.build(Op::Lookup { indices }, &[table])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.build(Op::Concat, parts)
    }
    pub fn index_select(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.build(Op::IndexSelect { indices }, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.build(Op::Reshape { shape }, &[x])
    }
    pub fn batch_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, mode: BatchNormMode) -> Result<NodeId> {
        self.build(Op::BatchNorm(mode), &[x, scale, shift])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap> {
        let root = self.resolve(loss)?;
        if self.differentiated {
            return Err(Error::AlreadyDifferentiated);
        }
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::NotScalar(self.nodes[root].value.shape().to_vec()));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();

        for i in (0..=root).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.record {
                Record::Constant => {}
                Record::Param(name) => {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFiniteGradient(name.clone()));
                    }
                    match out.get_mut(name) {
                        Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                            out.insert(name.clone(), t);
                        }
                    }
                }
                Record::Op(op) => {
                    if self.fault == Some(op.kind()) {
                        g.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    backward_op(op, node, &self.nodes, &g, &mut grads);
                }
            }
        }
        Ok(GradientMap(out))
    }
}

fn shape_err(op: &Op, vals: &[&Tensor]) -> Error {
    Error::Shape {
        op: op.kind().name(),
        shapes: vals.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn forward(op: &Op, vals: &[&Tensor]) -> Result<(Tensor, Option<BatchNormCache>)> {
    let out = match op {
        Op::MatMul => {
            let (a, b) = (vals[0], vals[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(op, vals));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut c, m, k, n);
            Tensor::from_parts(vec![m, n], c)
        }
        Op::Add => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape() == b.shape() {
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_parts(a.shape().to_vec(), d)
            } else if a.rank() >= 1 && &a.shape()[1..] == b.shape() {
                let n = b.numel();
                let d = a.data().iter().enumerate().map(|(i, x)| x + b.data()[i % n]).collect();
                Tensor::from_parts(a.shape().to_vec(), d)
            } else {
                return Err(shape_err(op, vals));
            }
        }
        Op::Mul | Op::Sub => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op, vals));
            }
            let f: fn(f64, f64) -> f64 = if matches!(op, Op::Mul) {
                |x, y| x * y
            } else {
                |x, y| x - y
            };
            let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), d)
        }
        Op::Relu => map(vals[0], |v| v.max(0.0)),
        Op::Tanh => map(vals[0], f64::tanh),
        Op::Sigmoid => map(vals[0], stable_sigmoid),
        Op::Softmax => {
            let x = vals[0];
            let w = x.last_dim();
            let mut d = x.data().to_vec();
            for row in d.chunks_mut(w) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::from_parts(x.shape().to_vec(), d)
        }
        Op::Log => {
            let x = vals[0];
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
            map(x, f64::ln)
        }
        Op::ClampMin(floor) => map(vals[0], |v| v.max(*floor)),
        Op::Scale(c) => map(vals[0], |v| v * c),
        Op::Sum { axis } | Op::Mean { axis } => {
            let x = vals[0];
            if *axis >= x.rank() {
                return Err(shape_err(op, vals));
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut d = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let src = &x.data()[(o * len + a) * inner..][..inner];
                    let dst = &mut d[o * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(t, s)| *t += s);
                }
            }
            if matches!(op, Op::Mean { .. }) {
                d.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Tensor::from_parts(shape, d)
        }
        Op::SumAll => Tensor::scalar(vals[0].data().iter().sum()),
        Op::MeanAll => {
            let x = vals[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        Op::Lookup { indices } => {
            let t = vals[0];
            if t.rank() != 2 {
                return Err(shape_err(op, vals));
            }
            let (rows, dim) = (t.shape()[0], t.shape()[1]);
            if indices.is_empty() {
                return Err(Error::invalid("lookup", "empty index list"));
            }
            let mut d = Vec::with_capacity(indices.len() * dim);
            for &r in indices {
                if r >= rows {
                    return Err(Error::Domain {
                        op: "lookup",
                        detail: format!("row {r} out of range for table with {rows} rows"),
                    });
                }
                d.extend_from_slice(&t.data()[r * dim..(r + 1) * dim]);
            }
            Tensor::from_parts(vec![indices.len(), dim], d)
        }
        Op::Concat => {
            let lead = &vals[0].shape()[..vals[0].rank().saturating_sub(1)];
            if vals.iter().any(|t| t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead) {
                return Err(shape_err(op, vals));
            }
            let rows: usize = lead.iter().product();
            let total: usize = vals.iter().map(|t| t.last_dim()).sum();
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in vals {
                    let w = t.last_dim();
                    d.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, d)
        }
        Op::IndexSelect { indices } => {
            let x = vals[0];
            let w = x.last_dim();
            if x.rank() == 0 || indices.is_empty() {
                return Err(shape_err(op, vals));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= w) {
                return Err(Error::Domain {
                    op: "index_select",
                    detail: format!("index {bad} out of range for last axis of size {w}"),
                });
            }
            let rows = x.numel() / w;
            let mut d = Vec::with_capacity(rows * indices.len());
            for r in 0..rows {
                let row = &x.data()[r * w..(r + 1) * w];
                d.extend(indices.iter().map(|&i| row[i]));
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = indices.len();
            Tensor::from_parts(shape, d)
        }
        Op::Reshape { shape } => {
            let x = vals[0];
            if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
                return Err(Error::Shape {
                    op: "reshape",
                    shapes: vec![x.shape().to_vec(), shape.clone()],
                });
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
        Op::BatchNorm(mode) => return batch_norm_forward(op, mode, vals),
    };
    Ok((out, None))
}

fn batch_norm_forward(op: &Op, mode: &BatchNormMode, vals: &[&Tensor]) -> Result<(Tensor, Option<BatchNormCache>)> {
    let (x, gamma, beta) = (vals[0], vals[1], vals[2]);
    if x.rank() != 2 || gamma.shape() != [x.shape()[1]] || beta.shape() != gamma.shape() {
        return Err(shape_err(op, vals));
    }
    let (b, h) = (x.shape()[0], x.shape()[1]);
    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0; h];
            for row in x.data().chunks(h) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; h];
            for row in x.data().chunks(h) {
                for j in 0..h {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            (mean, var)
        }
        BatchNormMode::Inference {
            running_mean,
            running_var,
        } => {
            if running_mean.len() != h || running_var.len() != h {
                return Err(Error::Shape {
                    op: "batch_norm",
                    shapes: vec![x.shape().to_vec(), vec![running_mean.len()], vec![running_var.len()]],
                });
            }
            (running_mean.clone(), running_var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
    let mut normalized = Vec::with_capacity(b * h);
    let mut out = Vec::with_capacity(b * h);
    for row in x.data().chunks(h) {
        for j in 0..h {
            let n = (row[j] - mean[j]) * inv_std[j];
            normalized.push(n);
            out.push(gamma.data()[j] * n + beta.data()[j]);
        }
    }
    let cache = BatchNormCache {
        normalized,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    };
    Ok((Tensor::from_parts(vec![b, h], out), Some(cache)))
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn backward_op(op: &Op, node: &Node, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let inputs = &node.inputs;
    let wants = |k: usize| nodes[inputs[k]].needs_grad;
    let y = node.value.data();
    match op {
        Op::MatMul => {
            let (a, b) = (&nodes[inputs[0]].value, &nodes[inputs[1]].value);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if wants(0) {
                // dA = dC * B^T
                let ga = accumulate(grads, inputs[0], m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b.data()[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if wants(1) {
                // dB = A^T * dC
                let gb = accumulate(grads, inputs[1], k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        gb[p * n..(p + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(t, gv)| *t += av * gv);
                    }
                }
            }
        }
        Op::Add => {
            if wants(0) {
                let ga = accumulate(grads, inputs[0], g.len());
                ga.iter_mut().zip(g).for_each(|(t, v)| *t += v);
            }
            if wants(1) {
                let n = nodes[inputs[1]].value.numel();
                let gb = accumulate(grads, inputs[1], n);
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
            }
        }
        Op::Mul => {
            let (a, b) = (nodes[inputs[0]].value.data(), nodes[inputs[1]].value.data());
            if wants(0) {
                let ga = accumulate(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * b[i];
                }
            }
            if wants(1) {
                let gb = accumulate(grads, inputs[1], g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * a[i];
                }
            }
        }
        Op::Sub => {
            if wants(0) {
                let ga = accumulate(grads, inputs[0], g.len());
                ga.iter_mut().zip(g).for_each(|(t, v)| *t += v);
            }
            if wants(1) {
                let gb = accumulate(grads, inputs[1], g.len());
                gb.iter_mut().zip(g).for_each(|(t, v)| *t -= v);
            }
        }
        Op::Relu | Op::Tanh | Op::Sigmoid | Op::Log | Op::ClampMin(_) | Op::Scale(_) => {
            if !wants(0) {
                return;
            }
            let x = nodes[inputs[0]].value.data();
            let gx = accumulate(grads, inputs[0], g.len());
            for i in 0..g.len() {
                let local = match op {
                    Op::Relu => f64::from(u8::from(x[i] > 0.0)),
                    Op::Tanh => 1.0 - y[i] * y[i],
                    Op::Sigmoid => y[i] * (1.0 - y[i]),
                    Op::Log => 1.0 / x[i],
                    Op::ClampMin(floor) => f64::from(u8::from(x[i] > *floor)),
                    Op::Scale(c) => *c,
                    _ => unreachable!(),
                };
                gx[i] += g[i] * local;
            }
        }
        Op::Softmax => {
            if !wants(0) {
                return;
            }
            let w = node.value.last_dim();
            let gx = accumulate(grads, inputs[0], g.len());
            for ((grow, yrow), out) in g.chunks(w).zip(y.chunks(w)).zip(gx.chunks_mut(w)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    out[j] += yrow[j] * (grow[j] - dot);
                }
            }
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            if !wants(0) {
                return;
            }
            let x = &nodes[inputs[0]].value;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let factor = if matches!(op, Op::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let gx = accumulate(grads, inputs[0], x.numel());
            for o in 0..outer {
                let src = &g[o * inner..][..inner];
                for a in 0..len {
                    let dst = &mut gx[(o * len + a) * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(t, s)| *t += s * factor);
                }
            }
        }
        Op::SumAll | Op::MeanAll => {
            if !wants(0) {
                return;
            }
            let n = nodes[inputs[0]].value.numel();
            let v = if matches!(op, Op::MeanAll) {
                g[0] / n as f64
            } else {
                g[0]
            };
            let gx = accumulate(grads, inputs[0], n);
            gx.iter_mut().for_each(|t| *t += v);
        }
        Op::Lookup { indices } => {
            if !wants(0) {
                return;
            }
            let t = &nodes[inputs[0]].value;
            let dim = t.shape()[1];
            let gt = accumulate(grads, inputs[0], t.numel());
            for (k, &r) in indices.iter().enumerate() {
                gt[r * dim..(r + 1) * dim]
                    .iter_mut()
                    .zip(&g[k * dim..(k + 1) * dim])
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::Concat => {
            let total = node.value.last_dim();
            let rows = node.value.numel() / total;
            let mut offset = 0;
            for &inp in inputs {
                let part = &nodes[inp].value;
                let w = part.last_dim();
                if nodes[inp].needs_grad {
                    let gp = accumulate(grads, inp, part.numel());
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[r * total + offset..r * total + offset + w])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += w;
            }
        }
        Op::IndexSelect { indices } => {
            if !wants(0) {
                return;
            }
            let x = &nodes[inputs[0]].value;
            let w = x.last_dim();
            let k = indices.len();
            let gx = accumulate(grads, inputs[0], x.numel());
            for (r, grow) in g.chunks(k).enumerate() {
                for (j, &i) in indices.iter().enumerate() {
                    gx[r * w + i] += grow[j];
                }
            }
        }
        Op::Reshape { .. } => {
            if !wants(0) {
                return;
            }
            let gx = accumulate(grads, inputs[0], g.len());
            gx.iter_mut().zip(g).for_each(|(t, v)| *t += v);
        }
        Op::BatchNorm(mode) => batch_norm_backward(mode, node, nodes, g, grads),
    }
}

fn batch_norm_backward(mode: &BatchNormMode, node: &Node, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let inputs = &node.inputs;
    let x = &nodes[inputs[0]].value;
    let gamma = nodes[inputs[1]].value.data();
    let (b, h) = (x.shape()[0], x.shape()[1]);
    let cache = node.bn.as_ref().expect("batch-norm node without cache");

    let (normalized, inv_std) = (&cache.normalized, &cache.inv_std);

    if nodes[inputs[2]].needs_grad {
        let gb = accumulate(grads, inputs[2], h);
        for row in g.chunks(h) {
            gb.iter_mut().zip(row).for_each(|(t, v)| *t += v);
        }
    }
    if nodes[inputs[1]].needs_grad {
        let gg = accumulate(grads, inputs[1], h);
        for (row, nrow) in g.chunks(h).zip(normalized.chunks(h)) {
            for j in 0..h {
                gg[j] += row[j] * nrow[j];
            }
        }
    }
    if nodes[inputs[0]].needs_grad {
        let gx = accumulate(grads, inputs[0], b * h);
        match mode {
            BatchNormMode::Train => {
                let mut sum_g = vec![0.0; h];
                let mut sum_gn = vec![0.0; h];
                for (row, nrow) in g.chunks(h).zip(normalized.chunks(h)) {
                    for j in 0..h {
                        let gn = row[j] * gamma[j];
                        sum_g[j] += gn;
                        sum_gn[j] += gn * nrow[j];
                    }
                }
                let bf = b as f64;
                for r in 0..b {
                    for j in 0..h {
                        let gn = g[r * h + j] * gamma[j];
                        gx[r * h + j] += inv_std[j] / bf * (bf * gn - sum_g[j] - normalized[r * h + j] * sum_gn[j]);
                    }
                }
            }
            BatchNormMode::Inference { .. } => {
                for r in 0..b {
                    for j in 0..h {
                        gx[r * h + j] += g[r * h + j] * gamma[j] * inv_std[j];
                    }
                }
            }
        }
    }
}
