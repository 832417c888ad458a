//! Static computation graph with cached forward values and a reverse sweep.
//!
//! A [`Graph`] only describes the computation. Named tensors (inputs,
//! parameters, batch-norm moving statistics) and integer labels are supplied
//! per call through [`Bindings`]. Nodes can only reference nodes created
//! before them, so insertion order is a topological order and the backward
//! sweep is simply the reverse of it.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

use super::conv::{self, ConvGeometry, Padding};
use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormSpec {
    pub moving_mean: String,
    pub moving_var: String,
    /// Retention coefficient: `m <- decay * m + (1 - decay) * batch_stat`.
    pub decay: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    },
    /// `[batch, in] x [out, in]^T`.
    Dense { input: NodeId, weight: NodeId },
    /// Adds a per-channel bias along the last axis.
    BiasAdd { input: NodeId, bias: NodeId },
    /// Normalizes over every axis but the last.
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        spec: BatchNormSpec,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    Flatten(NodeId),
    Softmax(NodeId),
    /// Mean cross-entropy of logits against integer labels.
    SoftmaxCrossEntropy { logits: NodeId, labels: String },
    /// `scale * sum_i sum(x_i^2)`.
    SquaredSum { inputs: Vec<NodeId>, scale: f64 },
    Sum(NodeId),
    Scale(NodeId, f64),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::BiasAdd { .. } => "bias_add",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Flatten(_) => "flatten",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SquaredSum { .. } => "squared_sum",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Dense { input, weight } => vec![*input, *weight],
            Op::BiasAdd { input, bias } => vec![*input, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(x)
            | Op::GlobalAvgPool(x)
            | Op::Flatten(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Scale(x, _) => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::SquaredSum { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub label: String,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.nodes.len(), "node references a future node");
        }
        let id = NodeId(self.nodes.len());
        let label = format!("{}#{}", op.kind(), id.0);
        self.nodes.push(Node { op, label });
        id
    }

    /// A named tensor read from the bindings. Repeated names share one node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(i) = self
            .nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input(existing) if existing == name))
        {
            return NodeId(i);
        }
        self.push(Op::Input(name.to_string()))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: Padding) -> NodeId {
        self.push(Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        })
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId) -> NodeId {
        self.push(Op::Dense { input, weight })
    }

    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAdd { input, bias })
    }

    pub fn batch_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, spec: BatchNormSpec) -> NodeId {
        self.push(Op::BatchNorm {
            input,
            gamma,
            beta,
            spec,
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &str) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_string(),
        })
    }

    pub fn squared_sum(&mut self, inputs: Vec<NodeId>, scale: f64) -> NodeId {
        self.push(Op::SquaredSum { inputs, scale })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm; moving statistics are updated.
    Train,
    /// Moving statistics in batch-norm.
    Eval,
}

/// Named tensors and label vectors for one forward pass.
#[derive(Debug)]
pub struct Bindings<'a, T> {
    tensors: HashMap<String, &'a Tensor<T>>,
    labels: HashMap<String, &'a [usize]>,
}

impl<T> Default for Bindings<'_, T> {
    fn default() -> Self {
        Self {
            tensors: HashMap::new(),
            labels: HashMap::new(),
        }
    }
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(mut self, name: impl Into<String>, tensor: &'a Tensor<T>) -> Self {
        self.tensors.insert(name.into(), tensor);
        self
    }

    pub fn labels(mut self, name: impl Into<String>, labels: &'a [usize]) -> Self {
        self.labels.insert(name.into(), labels);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &'a Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_labels(&mut self, name: impl Into<String>, labels: &'a [usize]) {
        self.labels.insert(name.into(), labels);
    }

    pub fn get(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.tensors
            .get(name)
            .copied()
            .ok_or_else(|| Error::Unbound(name.to_string()))
    }

    fn get_labels(&self, name: &str) -> Result<&'a [usize]> {
        self.labels
            .get(name)
            .copied()
            .ok_or_else(|| Error::Unbound(name.to_string()))
    }
}

/// New moving statistics computed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct MovingStats<T> {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Debug)]
enum Cache<T> {
    None,
    Patches { cols: Vec<T>, geometry: ConvGeometry },
    Normalized { xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Probs(Vec<T>),
}

/// Values of every node from one forward pass, kept for the backward sweep.
#[derive(Debug)]
pub struct Execution<T> {
    values: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    moving_stats: Vec<MovingStats<T>>,
    mode: Mode,
}

impl<T: Scalar> Execution<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Moving-statistic updates produced in [`Mode::Train`]; empty in eval.
    pub fn moving_stats(&self) -> &[MovingStats<T>] {
        &self.moving_stats
    }

    pub fn into_moving_stats(self) -> Vec<MovingStats<T>> {
        self.moving_stats
    }
}

pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

pub fn forward<T: Scalar>(graph: &Graph, bindings: &Bindings<'_, T>, mode: Mode) -> Result<Execution<T>> {
    let mut exec = Execution {
        values: Vec::with_capacity(graph.len()),
        caches: Vec::with_capacity(graph.len()),
        moving_stats: Vec::new(),
        mode,
    };
    for node in &graph.nodes {
        let (value, cache) = eval_node(node, &exec, bindings, mode)?;
        if let Some(stats) = value.1 {
            exec.moving_stats.push(stats);
        }
        exec.values.push(value.0);
        exec.caches.push(cache);
    }
    Ok(exec)
}

type NodeOutput<T> = ((Tensor<T>, Option<MovingStats<T>>), Cache<T>);

fn eval_node<T: Scalar>(
    node: &Node,
    exec: &Execution<T>,
    bindings: &Bindings<'_, T>,
    mode: Mode,
) -> Result<NodeOutput<T>> {
    let v = |id: &NodeId| &exec.values[id.0];
    let fail = |msg: String| Error::shape(node.label.clone(), msg);
    let plain = |t: Tensor<T>| ((t, None), Cache::None);
    Ok(match &node.op {
        Op::Input(name) => {
            let t = bindings.get(name)?;
            plain(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()))
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (x, w) = (v(input), v(kernel));
            let g = ConvGeometry::new(x.shape(), w.shape(), *stride, *padding).map_err(fail)?;
            let cols = conv::im2col(x.data(), &g);
            let out = conv::conv_forward_cols(&cols, w.data(), &g);
            (
                (Tensor::from_parts(g.output_shape(), out), None),
                Cache::Patches { cols, geometry: g },
            )
        }
        Op::Dense { input, weight } => {
            let (x, w) = (v(input), v(weight));
            if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
                return Err(fail(format!(
                    "expected input [batch, k] and weight [out, k], got {:?} and {:?}",
                    x.shape(),
                    w.shape()
                )));
            }
            let (b, k, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            let mut out = vec![T::zero(); b * o];
            gemm(
                MatRef::row_major(x.data(), b, k),
                MatRef::transposed(w.data(), k, o),
                T::zero(),
                &mut out,
            );
            plain(Tensor::from_parts(vec![b, o], out))
        }
        Op::BiasAdd { input, bias } => {
            let (x, b) = (v(input), v(bias));
            let c = *x.shape().last().unwrap();
            if b.shape() != [c] {
                return Err(fail(format!(
                    "bias shape {:?} does not match channel count {c} of input {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            plain(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            spec,
        } => {
            let (x, g, b) = (v(input), v(gamma), v(beta));
            let c = *x.shape().last().unwrap();
            if g.shape() != [c] || b.shape() != [c] {
                return Err(fail(format!(
                    "gamma {:?} / beta {:?} do not match channel count {c} of input {:?}",
                    g.shape(),
                    b.shape(),
                    x.shape()
                )));
            }
            let mean = bindings.get(&spec.moving_mean)?;
            let var = bindings.get(&spec.moving_var)?;
            if mean.shape() != [c] || var.shape() != [c] {
                return Err(fail(format!(
                    "moving statistics {:?} / {:?} do not match channel count {c}",
                    mean.shape(),
                    var.shape()
                )));
            }
            let out = batch_norm_forward(
                x.data(),
                c,
                g.data(),
                b.data(),
                mean.data(),
                var.data(),
                spec.decay,
                spec.epsilon,
                mode,
            )
            .map_err(fail)?;
            let stats = out.moving.map(|(m, s)| MovingStats {
                mean_name: spec.moving_mean.clone(),
                var_name: spec.moving_var.clone(),
                mean: Tensor::from_parts(vec![c], m),
                var: Tensor::from_parts(vec![c], s),
            });
            (
                (Tensor::from_parts(x.shape().to_vec(), out.output), stats),
                Cache::Normalized {
                    xhat: out.xhat,
                    inv_std: out.inv_std,
                    batch_stats: mode == Mode::Train,
                },
            )
        }
        Op::Relu(x) => plain(v(x).map(|a| if a > T::zero() { a } else { T::zero() })),
        Op::Add(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() {
                return Err(fail(format!(
                    "operand shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect();
            plain(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::GlobalAvgPool(x) => {
            let x = v(x);
            if x.shape().len() != 4 {
                return Err(fail(format!("expected NHWC input, got {:?}", x.shape())));
            }
            let (n, hw, c) = (x.shape()[0], x.shape()[1] * x.shape()[2], x.shape()[3]);
            let inv = T::from_f64_lossy(1.0 / hw as f64);
            let mut out = vec![T::zero(); n * c];
            for (b, image) in x.data().chunks(hw * c).enumerate() {
                let acc = &mut out[b * c..(b + 1) * c];
                for pixel in image.chunks(c) {
                    for (a, &p) in acc.iter_mut().zip(pixel) {
                        *a += p;
                    }
                }
                for a in acc.iter_mut() {
                    *a *= inv;
                }
            }
            plain(Tensor::from_parts(vec![n, c], out))
        }
        Op::Flatten(x) => {
            let x = v(x);
            let n = x.shape()[0];
            plain(Tensor::from_parts(vec![n, x.len() / n], x.data().to_vec()))
        }
        Op::Softmax(x) => {
            let x = v(x);
            let k = *x.shape().last().unwrap();
            let probs = softmax_rows(x.data(), k);
            (
                (Tensor::from_parts(x.shape().to_vec(), probs.clone()), None),
                Cache::Probs(probs),
            )
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let z = v(logits);
            let labels = bindings.get_labels(labels)?;
            if z.shape().len() != 2 || z.shape()[0] != labels.len() {
                return Err(fail(format!(
                    "logits {:?} do not match {} labels",
                    z.shape(),
                    labels.len()
                )));
            }
            let k = z.shape()[1];
            if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                return Err(fail(format!("label {bad} out of range for {k} classes")));
            }
            let (loss, probs) = cross_entropy(z.data(), labels, k);
            (
                (Tensor::scalar(T::from_f64_lossy(loss)), None),
                Cache::Probs(probs),
            )
        }
        Op::SquaredSum { inputs, scale } => {
            let mut acc = 0.0f64;
            for id in inputs {
                acc += v(id).data().iter().map(|&w| w.as_f64() * w.as_f64()).sum::<f64>();
            }
            plain(Tensor::scalar(T::from_f64_lossy(scale * acc)))
        }
        Op::Sum(x) => {
            let s: f64 = v(x).data().iter().map(|w| w.as_f64()).sum();
            plain(Tensor::scalar(T::from_f64_lossy(s)))
        }
        Op::Scale(x, factor) => {
            let f = T::from_f64_lossy(*factor);
            plain(v(x).map(|a| a * f))
        }
    })
}

pub(crate) struct BatchNormOutput<T> {
    pub output: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub moving: Option<(Vec<T>, Vec<T>)>,
}

/// Batch-norm over rows of `channels` values. Training mode normalizes with
/// the biased batch variance and returns updated moving statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    moving_mean: &[T],
    moving_var: &[T],
    decay: f64,
    epsilon: f64,
    mode: Mode,
) -> std::result::Result<BatchNormOutput<T>, String> {
    let rows = x.len() / channels;
    if rows == 0 {
        return Err("batch-norm over an empty batch".into());
    }
    if !(decay > 0.0 && decay < 1.0) {
        return Err(format!("batch-norm decay {decay} outside (0, 1)"));
    }
    let (mean, var, moving) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; channels];
            for row in x.chunks(channels) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0f64; channels];
            for row in x.chunks(channels) {
                for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let blend = |old: &[T], new: &[f64]| -> Vec<T> {
                old.iter()
                    .zip(new)
                    .map(|(&o, &n)| T::from_f64_lossy(decay * o.as_f64() + (1.0 - decay) * n))
                    .collect()
            };
            let moving = (blend(moving_mean, &mean), blend(moving_var, &var));
            (mean, var, Some(moving))
        }
        Mode::Eval => (
            moving_mean.iter().map(|m| m.as_f64()).collect(),
            moving_var.iter().map(|m| m.as_f64()).collect(),
            None,
        ),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&s| T::from_f64_lossy(1.0 / (s + epsilon).sqrt()))
        .collect();
    let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut output = Vec::with_capacity(x.len());
    for row in x.chunks(channels) {
        for c in 0..channels {
            let h = (row[c] - mean[c]) * inv_std[c];
            xhat.push(h);
            output.push(gamma[c] * h + beta[c]);
        }
    }
    Ok(BatchNormOutput {
        output,
        xhat,
        inv_std,
        moving,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Mean cross-entropy via log-sum-exp, plus the softmax probabilities.
fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> (f64, Vec<T>) {
    let mut total = 0.0f64;
    let mut probs = Vec::with_capacity(logits.len());
    for (row, &label) in logits.chunks(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
        let sum_exp: f64 = row.iter().map(|&v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - row[label].as_f64();
        probs.extend(row.iter().map(|&v| T::from_f64_lossy((v.as_f64() - lse).exp())));
    }
    (total / labels.len() as f64, probs)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, grad: Vec<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(grad) {
                *a += b;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Reverse sweep from a scalar `loss` node.
///
/// Returns a gradient for every bound tensor with `requires_grad`; tensors
/// that do not influence the loss receive zeros.
pub fn backward<T: Scalar>(
    graph: &Graph,
    exec: &Execution<T>,
    bindings: &Bindings<'_, T>,
    loss: NodeId,
) -> Result<Gradients<T>> {
    let loss_value = &exec.values[loss.0];
    if loss_value.len() != 1 {
        return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
    }
    let n = loss.0 + 1;
    let mut needs = vec![false; n];
    for (i, node) in graph.nodes[..n].iter().enumerate() {
        needs[i] = match &node.op {
            Op::Input(name) => bindings.get(name)?.requires_grad(),
            op => op.inputs().iter().any(|p| needs[p.0]),
        };
    }

    let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
    grads[loss.0] = Some(vec![T::one()]);
    let mut out = Gradients::new();

    for i in (0..n).rev() {
        let Some(g) = grads[i].take() else { continue };
        if !needs[i] {
            continue;
        }
        let node = &graph.nodes[i];
        let val = |id: &NodeId| &exec.values[id.0];
        match &node.op {
            Op::Input(name) => {
                out.insert(
                    name.clone(),
                    Tensor::from_parts(exec.values[i].shape().to_vec(), g),
                );
            }
            Op::Conv2d { input, kernel, .. } => {
                let Cache::Patches { cols, geometry } = &exec.caches[i] else {
                    unreachable!("conv cache")
                };
                if needs[kernel.0] {
                    accumulate(&mut grads[kernel.0], conv::conv_kernel_grad(cols, &g, geometry));
                }
                if needs[input.0] {
                    accumulate(
                        &mut grads[input.0],
                        conv::conv_input_grad(val(kernel).data(), &g, geometry),
                    );
                }
            }
            Op::Dense { input, weight } => {
                let (x, w) = (val(input), val(weight));
                let (b, k, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if needs[weight.0] {
                    let mut dw = vec![T::zero(); o * k];
                    gemm(
                        MatRef::transposed(&g, o, b),
                        MatRef::row_major(x.data(), b, k),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(&mut grads[weight.0], dw);
                }
                if needs[input.0] {
                    let mut dx = vec![T::zero(); b * k];
                    gemm(
                        MatRef::row_major(&g, b, o),
                        MatRef::row_major(w.data(), o, k),
                        T::zero(),
                        &mut dx,
                    );
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::BiasAdd { input, bias } => {
                if needs[bias.0] {
                    let c = val(bias).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                }
                if needs[input.0] {
                    accumulate(&mut grads[input.0], g);
                }
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => {
                let Cache::Normalized {
                    xhat,
                    inv_std,
                    batch_stats,
                } = &exec.caches[i]
                else {
                    unreachable!("batch-norm cache")
                };
                let c = inv_std.len();
                let rows = g.len() / c;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += grow[ch].as_f64();
                        sum_dy_xhat[ch] += (grow[ch] * hrow[ch]).as_f64();
                    }
                }
                if needs[gamma.0] {
                    accumulate(
                        &mut grads[gamma.0],
                        sum_dy_xhat.iter().map(|&s| T::from_f64_lossy(s)).collect(),
                    );
                }
                if needs[beta.0] {
                    accumulate(
                        &mut grads[beta.0],
                        sum_dy.iter().map(|&s| T::from_f64_lossy(s)).collect(),
                    );
                }
                if needs[input.0] {
                    let gm = val(gamma).data();
                    let mut dx = Vec::with_capacity(g.len());
                    if *batch_stats {
                        let m = rows as f64;
                        let mean_dy: Vec<T> =
                            sum_dy.iter().map(|&s| T::from_f64_lossy(s / m)).collect();
                        let mean_dyh: Vec<T> =
                            sum_dy_xhat.iter().map(|&s| T::from_f64_lossy(s / m)).collect();
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                dx.push(
                                    gm[ch]
                                        * inv_std[ch]
                                        * (grow[ch] - mean_dy[ch] - hrow[ch] * mean_dyh[ch]),
                                );
                            }
                        }
                    } else {
                        for grow in g.chunks(c) {
                            for ch in 0..c {
                                dx.push(gm[ch] * inv_std[ch] * grow[ch]);
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::Relu(x) => {
                let xv = val(x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &a)| if a > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if needs[a.0] {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs[b.0] {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = val(x).shape();
                let (hw, c) = (shape[1] * shape[2], shape[3]);
                let inv = T::from_f64_lossy(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(val(x).len());
                for grow in g.chunks(c) {
                    for _ in 0..hw {
                        dx.extend(grow.iter().map(|&d| d * inv));
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Flatten(x) => accumulate(&mut grads[x.0], g),
            Op::Softmax(x) => {
                let Cache::Probs(p) = &exec.caches[i] else {
                    unreachable!("softmax cache")
                };
                let k = *val(x).shape().last().unwrap();
                let mut dx = Vec::with_capacity(p.len());
                for (prow, grow) in p.chunks(k).zip(g.chunks(k)) {
                    let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    dx.extend(prow.iter().zip(grow).map(|(&pi, &gi)| pi * (gi - dot)));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let Cache::Probs(p) = &exec.caches[i] else {
                    unreachable!("cross-entropy cache")
                };
                let labels = bindings.get_labels(labels)?;
                let k = val(logits).shape()[1];
                let scale = g[0] / T::from_f64_lossy(labels.len() as f64);
                let mut dz: Vec<T> = p.iter().map(|&v| v * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    dz[row * k + l] -= scale;
                }
                accumulate(&mut grads[logits.0], dz);
            }
            Op::SquaredSum { inputs, scale } => {
                let f = g[0] * T::from_f64_lossy(2.0 * scale);
                for id in inputs {
                    if needs[id.0] {
                        accumulate(&mut grads[id.0], val(id).data().iter().map(|&w| w * f).collect());
                    }
                }
            }
            Op::Sum(x) => accumulate(&mut grads[x.0], vec![g[0]; val(x).len()]),
            Op::Scale(x, factor) => {
                let f = T::from_f64_lossy(*factor);
                accumulate(&mut grads[x.0], g.iter().map(|&d| d * f).collect());
            }
        }
    }

    for (name, t) in &bindings.tensors {
        if t.requires_grad() && !out.contains_key(name) {
            out.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.relu(x);
        let xv = t(&[3], &[-1.0, 0.0, 2.0]);
        let exec = forward(&g, &Bindings::new().tensor("x", &xv), Mode::Eval).unwrap();
        assert_eq!(exec.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_kernel_preserves_image() {
        let mut g = Graph::new();
        let x = g.input("x");
        let k = g.input("k");
        let y = g.conv2d(x, k, 1, Padding::Same);
        let img: Vec<f64> = (0..2 * 5 * 4).map(|v| v as f64 * 0.37 - 3.0).collect();
        let xv = t(&[2, 5, 4, 1], &img);
        let mut kern = vec![0.0; 9];
        kern[4] = 1.0;
        let kv = t(&[1, 3, 3, 1], &kern);
        let b = Bindings::new().tensor("x", &xv).tensor("k", &kv);
        let exec = forward(&g, &b, Mode::Eval).unwrap();
        assert_eq!(exec.value(y), &xv);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.input("w");
        let s = g.sum(w);
        let wv = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_grad(true);
        let b = Bindings::new().tensor("w", &wv);
        let exec = forward(&g, &b, Mode::Train).unwrap();
        let grads = backward(&g, &exec, &b, s).unwrap();
        assert_eq!(grads["w"].data(), &[1.0; 6]);
        assert_eq!(grads["w"].shape(), &[2, 3]);
    }

    #[test]
    fn grad_of_l2_term() {
        let mut g = Graph::new();
        let w = g.input("w");
        let l2 = g.squared_sum(vec![w], 1e-4);
        let wv = t(&[2], &[1.0, -2.0]).with_grad(true);
        let b = Bindings::new().tensor("w", &wv);
        let exec = forward(&g, &b, Mode::Train).unwrap();
        assert!((exec.value(l2).item() - 5e-4).abs() < 1e-15);
        let grads = backward(&g, &exec, &b, l2).unwrap();
        let d = grads["w"].data();
        assert!((d[0] - 2e-4).abs() < 1e-15 && (d[1] + 4e-4).abs() < 1e-15);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.input("w");
        let s = g.sum(w);
        let wv = t(&[2], &[1.0, 2.0]).with_grad(true);
        let unused = t(&[3], &[1.0, 2.0, 3.0]).with_grad(true);
        let frozen = t(&[1], &[4.0]);
        let b = Bindings::new()
            .tensor("w", &wv)
            .tensor("unused", &unused)
            .tensor("frozen", &frozen);
        let exec = forward(&g, &b, Mode::Train).unwrap();
        let grads = backward(&g, &exec, &b, s).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0; 3]);
        assert!(!grads.contains_key("frozen"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.input("w");
        let r = g.relu(w);
        let wv = t(&[2], &[1.0, 2.0]).with_grad(true);
        let b = Bindings::new().tensor("w", &wv);
        let exec = forward(&g, &b, Mode::Train).unwrap();
        assert!(matches!(
            backward(&g, &exec, &b, r),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        g.add(a, b);
        let av = t(&[2], &[1.0, 2.0]);
        let bv = t(&[3], &[1.0, 2.0, 3.0]);
        let err = forward(&g, &Bindings::new().tensor("a", &av).tensor("b", &bv), Mode::Eval)
            .unwrap_err()
            .to_string();
        assert!(err.contains("add#2") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = Graph::new();
        g.input("missing");
        let err = forward::<f32>(&g, &Bindings::new(), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Unbound(name) if name == "missing"));
    }

    fn bn_graph(decay: f64) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let x = g.input("x");
        let gamma = g.input("gamma");
        let beta = g.input("beta");
        let y = g.batch_norm(
            x,
            gamma,
            beta,
            BatchNormSpec {
                moving_mean: "mean".into(),
                moving_var: "var".into(),
                decay,
                epsilon: 1e-5,
            },
        );
        (g, y)
    }

    #[test]
    fn moving_mean_update_uses_decay_as_retention() {
        for (decay, expect) in [(0.997, 0.003), (0.9, 0.1)] {
            let (g, _) = bn_graph(decay);
            let x = t(&[2, 1], &[0.5, 1.5]);
            let gamma = t(&[1], &[1.0]);
            let beta = t(&[1], &[0.0]);
            let mean = t(&[1], &[0.0]);
            let var = t(&[1], &[1.0]);
            let b = Bindings::new()
                .tensor("x", &x)
                .tensor("gamma", &gamma)
                .tensor("beta", &beta)
                .tensor("mean", &mean)
                .tensor("var", &var);
            let exec = forward(&g, &b, Mode::Train).unwrap();
            let stats = &exec.moving_stats()[0];
            assert!((stats.mean.item() - expect).abs() < 1e-12, "{}", stats.mean.item());
            // batch variance 0.25: 1 -> decay + (1 - decay) * 0.25
            let v = decay + (1.0 - decay) * 0.25;
            assert!((stats.var.item() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_batch_norm_with_unit_stats_is_identity() {
        let (g, y) = bn_graph(0.997);
        let xs = [-1.2, 0.3, 0.9, -0.4, 1.1, -0.7];
        let x = t(&[3, 2], &xs);
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        let mean = t(&[2], &[0.0, 0.0]);
        let var = t(&[2], &[1.0, 1.0]);
        let b = Bindings::new()
            .tensor("x", &x)
            .tensor("gamma", &gamma)
            .tensor("beta", &beta)
            .tensor("mean", &mean)
            .tensor("var", &var);
        let exec = forward(&g, &b, Mode::Eval).unwrap();
        assert!(exec.moving_stats().is_empty());
        for (a, e) in exec.value(y).data().iter().zip(xs) {
            assert!((a - e).abs() < 1e-5 * e.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1000.0f64, 0.0, -1000.0, 1.0, 2.0, 3.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
