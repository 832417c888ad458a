//! Model zoo and parameter accounting.
//!
//! ResNet-20/56/110 follow the original (post-activation) CIFAR design with
//! 1x1 projection shortcuts (no bias, no batch-norm) wherever a stage changes
//! width or resolution, and identity shortcuts elsewhere. WRN-16-8 uses
//! pre-activation blocks, projecting the pre-activated input on width
//! changes, with a final batch-norm before pooling. These are the variants
//! whose trainable/kernel counts match the reference counts exactly:
//!
//! | model      | trainable  | kernel     |
//! |------------|------------|------------|
//! | resnet20   | 272,282    | 270,896    |
//! | resnet56   | 855,578    | 851,504    |
//! | resnet110  | 1,730,522  | 1,722,416  |
//! | wrn16-8    | 10,961,370 | 10,954,160 |
//!
//! Convolutions carry no bias; the classifier is a dense layer with bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BatchNormSpec, Graph, NamedTensor, NodeId, Padding, Tensor};
use crate::error::{Error, Result};

pub const ZOO: &[&str] = &[
    "resnet20",
    "resnet56",
    "resnet110",
    "wrn16-8",
    "mlp-small",
    "cnn-small",
];

/// Name of the image input every zoo graph reads.
pub const INPUT: &str = "x";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel,
    DenseKernel,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Convolution and dense kernels are the prunable set.
    pub fn is_kernel(self) -> bool {
        matches!(self, ParamKind::ConvKernel | ParamKind::DenseKernel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Fan-in of kernels, used by the initializer.
    pub fan_in: usize,
}

impl ParamInfo {
    pub fn prunable(&self) -> bool {
        self.kind.is_kernel()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` for kernels.
    HeUniformFanIn,
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub name: String,
    pub classes: usize,
    /// `[height, width, channels]` of one input image.
    pub input_shape: [usize; 3],
    pub params: Vec<ParamInfo>,
    pub buffers: Vec<BufferInfo>,
    pub graph: Graph,
    pub logits: NodeId,
    pub initializer: Initializer,
}

/// Trainable parameters plus batch-norm moving statistics, aligned with the
/// `params` and `buffers` lists of a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

impl Weights {
    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    /// Bit-exact equality of every tensor.
    pub fn bit_eq(&self, other: &Weights) -> bool {
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }

    /// FNV-1a over names, shapes and raw float bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in self.iter() {
            eat(t.name.as_bytes());
            for &d in t.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub layer: String,
    pub trainable: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub trainable_count: usize,
    pub kernel_count: usize,
    pub layers: Vec<LayerCount>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: Weights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub classes: usize,
    pub input_shape: [usize; 3],
    pub seed: u64,
    /// Overrides the architecture's default batch-norm decay.
    pub bn_decay: Option<f64>,
    pub bn_epsilon: f64,
}

impl BuildOptions {
    pub fn cifar(classes: usize, seed: u64) -> Self {
        Self {
            classes,
            input_shape: [32, 32, 3],
            seed,
            bn_decay: None,
            bn_epsilon: 1e-5,
        }
    }
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self::cifar(10, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Architecture {
    ResNet { depth: usize },
    WideResNet { depth: usize, width: usize },
    Mlp,
    SmallCnn,
}

impl Architecture {
    fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "resnet20" => Architecture::ResNet { depth: 20 },
            "resnet56" => Architecture::ResNet { depth: 56 },
            "resnet110" => Architecture::ResNet { depth: 110 },
            "wrn16-8" => Architecture::WideResNet { depth: 16, width: 8 },
            "mlp-small" => Architecture::Mlp,
            "cnn-small" => Architecture::SmallCnn,
            _ => {
                return Err(Error::UnknownModel {
                    name: name.to_string(),
                    zoo: ZOO.join(", "),
                })
            }
        })
    }

    fn default_bn_decay(self) -> f64 {
        match self {
            Architecture::WideResNet { .. } => 0.9,
            _ => 0.997,
        }
    }

    fn is_full_scale(self) -> bool {
        matches!(
            self,
            Architecture::ResNet { .. } | Architecture::WideResNet { .. }
        )
    }
}

/// Default batch-norm decay of a zoo model.
pub fn default_bn_decay(name: &str) -> Result<f64> {
    Ok(Architecture::from_name(name)?.default_bn_decay())
}

struct NetBuilder {
    graph: Graph,
    params: Vec<ParamInfo>,
    buffers: Vec<BufferInfo>,
    bn_decay: f64,
    bn_epsilon: f64,
}

impl NetBuilder {
    fn new(bn_decay: f64, bn_epsilon: f64) -> Self {
        Self {
            graph: Graph::new(),
            params: Vec::new(),
            buffers: Vec::new(),
            bn_decay,
            bn_epsilon,
        }
    }

    fn param(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize) -> NodeId {
        let id = self.graph.input(&name);
        self.params.push(ParamInfo {
            name,
            shape,
            kind,
            fan_in,
        });
        id
    }

    fn conv(&mut self, x: NodeId, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> NodeId {
        let w = self.param(
            format!("{name}/kernel"),
            vec![cout, k, k, cin],
            ParamKind::ConvKernel,
            k * k * cin,
        );
        self.graph.conv2d(x, w, stride, Padding::Same)
    }

    fn bn(&mut self, x: NodeId, name: &str, c: usize) -> NodeId {
        let gamma = self.param(format!("{name}/gamma"), vec![c], ParamKind::BnGamma, 0);
        let beta = self.param(format!("{name}/beta"), vec![c], ParamKind::BnBeta, 0);
        let spec = BatchNormSpec {
            moving_mean: format!("{name}/moving_mean"),
            moving_var: format!("{name}/moving_var"),
            decay: self.bn_decay,
            epsilon: self.bn_epsilon,
        };
        self.buffers.push(BufferInfo {
            name: spec.moving_mean.clone(),
            shape: vec![c],
            init: 0.0,
        });
        self.buffers.push(BufferInfo {
            name: spec.moving_var.clone(),
            shape: vec![c],
            init: 1.0,
        });
        self.graph.batch_norm(x, gamma, beta, spec)
    }

    fn dense(&mut self, x: NodeId, name: &str, fan_in: usize, out: usize) -> NodeId {
        let w = self.param(
            format!("{name}/kernel"),
            vec![out, fan_in],
            ParamKind::DenseKernel,
            fan_in,
        );
        let b = self.param(format!("{name}/bias"), vec![out], ParamKind::Bias, 0);
        let y = self.graph.dense(x, w);
        self.graph.bias_add(y, b)
    }

    fn conv_bn_relu(&mut self, x: NodeId, name: &str, cin: usize, cout: usize, stride: usize) -> NodeId {
        let h = self.conv(x, &format!("{name}/conv"), cin, cout, 3, stride);
        let h = self.bn(h, &format!("{name}/bn"), cout);
        self.graph.relu(h)
    }
}

fn resnet(b: &mut NetBuilder, x: NodeId, depth: usize, classes: usize) -> NodeId {
    let blocks = (depth - 2) / 6;
    let mut h = b.conv(x, "conv0", 3, 16, 3, 1);
    h = b.bn(h, "bn0", 16);
    h = b.graph.relu(h);
    let mut cin = 16;
    for stage in 0..3 {
        let width = 16 << stage;
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("stage{}/block{}", stage + 1, block);
            let mut r = b.conv(h, &format!("{p}/conv1"), cin, width, 3, stride);
            r = b.bn(r, &format!("{p}/bn1"), width);
            r = b.graph.relu(r);
            r = b.conv(r, &format!("{p}/conv2"), width, width, 3, 1);
            r = b.bn(r, &format!("{p}/bn2"), width);
            let shortcut = if stride != 1 || cin != width {
                b.conv(h, &format!("{p}/shortcut"), cin, width, 1, stride)
            } else {
                h
            };
            let sum = b.graph.add(r, shortcut);
            h = b.graph.relu(sum);
            cin = width;
        }
    }
    let pooled = b.graph.global_avg_pool(h);
    b.dense(pooled, "dense", cin, classes)
}

fn wide_resnet(b: &mut NetBuilder, x: NodeId, depth: usize, widen: usize, classes: usize) -> NodeId {
    let blocks = (depth - 4) / 6;
    let mut h = b.conv(x, "conv0", 3, 16, 3, 1);
    let mut cin = 16;
    for stage in 0..3 {
        let width = (16 * widen) << stage;
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("stage{}/block{}", stage + 1, block);
            let pre = b.bn(h, &format!("{p}/bn1"), cin);
            let pre = b.graph.relu(pre);
            let mut r = b.conv(pre, &format!("{p}/conv1"), cin, width, 3, stride);
            r = b.bn(r, &format!("{p}/bn2"), width);
            r = b.graph.relu(r);
            r = b.conv(r, &format!("{p}/conv2"), width, width, 3, 1);
            let shortcut = if stride != 1 || cin != width {
                b.conv(pre, &format!("{p}/shortcut"), cin, width, 1, stride)
            } else {
                h
            };
            h = b.graph.add(r, shortcut);
            cin = width;
        }
    }
    h = b.bn(h, "final_bn", cin);
    h = b.graph.relu(h);
    let pooled = b.graph.global_avg_pool(h);
    b.dense(pooled, "dense", cin, classes)
}

fn small_cnn(b: &mut NetBuilder, x: NodeId, channels: usize, classes: usize) -> NodeId {
    let mut h = b.conv_bn_relu(x, "block0", channels, 16, 1);
    h = b.conv_bn_relu(h, "block1", 16, 32, 2);
    h = b.conv_bn_relu(h, "block2", 32, 32, 1);
    h = b.conv_bn_relu(h, "block3", 32, 64, 2);
    let pooled = b.graph.global_avg_pool(h);
    b.dense(pooled, "dense", 64, classes)
}

fn mlp(b: &mut NetBuilder, x: NodeId, input_dim: usize, hidden: &[usize], classes: usize) -> NodeId {
    let mut h = b.graph.flatten(x);
    let mut fan_in = input_dim;
    for (i, &width) in hidden.iter().enumerate() {
        h = b.dense(h, &format!("hidden{i}"), fan_in, width);
        h = b.graph.relu(h);
        fan_in = width;
    }
    b.dense(h, "dense", fan_in, classes)
}

/// Builds a zoo model and initializes its weights from `options.seed`.
pub fn build(name: &str, options: &BuildOptions) -> Result<Model> {
    let arch = Architecture::from_name(name)?;
    if options.classes == 0 {
        return Err(Error::InvalidArgument("model needs at least one class".into()));
    }
    if arch.is_full_scale() && !matches!(options.classes, 10 | 100) {
        return Err(Error::InvalidArgument(format!(
            "{name} is defined for 10 or 100 classes, not {}",
            options.classes
        )));
    }
    let [h, w, c] = options.input_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "input shape {:?} has an empty dimension",
            options.input_shape
        )));
    }
    if arch.is_full_scale() && c != 3 {
        return Err(Error::InvalidArgument(format!("{name} expects RGB input")));
    }
    let decay = options.bn_decay.unwrap_or(arch.default_bn_decay());
    let mut b = NetBuilder::new(decay, options.bn_epsilon);
    let x = b.graph.input(INPUT);
    let logits = match arch {
        Architecture::ResNet { depth } => resnet(&mut b, x, depth, options.classes),
        Architecture::WideResNet { depth, width } => {
            wide_resnet(&mut b, x, depth, width, options.classes)
        }
        Architecture::SmallCnn => small_cnn(&mut b, x, c, options.classes),
        Architecture::Mlp => mlp(&mut b, x, h * w * c, &[100], options.classes),
    };
    Ok(finish(b, name, options, logits))
}

/// A fully-connected classifier of arbitrary widths, outside the named zoo.
pub fn build_mlp(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Model {
    let options = BuildOptions {
        classes,
        input_shape: [1, 1, input_dim],
        seed,
        bn_decay: None,
        bn_epsilon: 1e-5,
    };
    let mut b = NetBuilder::new(0.997, options.bn_epsilon);
    let x = b.graph.input(INPUT);
    let logits = mlp(&mut b, x, input_dim, hidden, classes);
    finish(b, "mlp", &options, logits)
}

fn finish(b: NetBuilder, name: &str, options: &BuildOptions, logits: NodeId) -> Model {
    let spec = ModelSpec {
        name: name.to_string(),
        classes: options.classes,
        input_shape: options.input_shape,
        params: b.params,
        buffers: b.buffers,
        graph: b.graph,
        logits,
        initializer: Initializer::HeUniformFanIn,
    };
    let weights = spec.initialize(options.seed);
    Model { spec, weights }
}

impl ModelSpec {
    /// He-uniform (fan-in) kernels, zero biases and betas, unit gammas,
    /// moving mean 0 and moving variance 1.
    pub fn initialize(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .params
            .iter()
            .map(|p| {
                let tensor = match p.kind {
                    ParamKind::ConvKernel | ParamKind::DenseKernel => {
                        let limit = (6.0 / p.fan_in as f64).sqrt() as f32;
                        let data = (0..p.numel())
                            .map(|_| rng.random_range(-limit..limit))
                            .collect();
                        Tensor::new(p.shape.clone(), data).expect("declared shape")
                    }
                    ParamKind::BnGamma => Tensor::full(p.shape.clone(), 1.0),
                    ParamKind::Bias | ParamKind::BnBeta => Tensor::zeros(p.shape.clone()),
                };
                NamedTensor::new(p.name.clone(), tensor.with_grad(true))
            })
            .collect();
        let buffers = self
            .buffers
            .iter()
            .map(|b| NamedTensor::new(b.name.clone(), Tensor::full(b.shape.clone(), b.init)))
            .collect();
        Weights { params, buffers }
    }

    pub fn kernel_count(&self) -> usize {
        self.params.iter().filter(|p| p.prunable()).map(|p| p.numel()).sum()
    }

    /// Names of the prunable tensors, in declaration order.
    pub fn kernel_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.prunable())
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Prunable tensors of `weights`, in declaration order.
    pub fn kernels<'w>(&self, weights: &'w Weights) -> Vec<&'w NamedTensor> {
        self.params
            .iter()
            .zip(&weights.params)
            .filter(|(p, _)| p.prunable())
            .map(|(_, t)| t)
            .collect()
    }

    /// Checks that `weights` carries exactly this spec's tensors.
    pub fn check_weights(&self, weights: &Weights) -> Result<()> {
        let expect = self
            .params
            .iter()
            .map(|p| (&p.name, &p.shape))
            .chain(self.buffers.iter().map(|b| (&b.name, &b.shape)));
        let mut n = 0;
        for ((name, shape), t) in expect.zip(weights.iter()) {
            if &t.name != name || t.tensor.shape() != shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "weights entry `{}` {:?} does not match model tensor `{name}` {shape:?}",
                    t.name,
                    t.tensor.shape()
                )));
            }
            n += 1;
        }
        if n != self.params.len() + self.buffers.len()
            || weights.params.len() + weights.buffers.len() != n
        {
            return Err(Error::InvalidArgument(format!(
                "model {} has {} tensors, weights carry {}",
                self.name,
                self.params.len() + self.buffers.len(),
                weights.params.len() + weights.buffers.len()
            )));
        }
        Ok(())
    }
}

/// Trainable and kernel parameter counts, with a per-layer breakdown.
pub fn count_params(spec: &ModelSpec) -> ParamReport {
    let mut layers: Vec<LayerCount> = Vec::new();
    for p in &spec.params {
        let layer = p.name.rsplit_once('/').map_or(p.name.as_str(), |(l, _)| l);
        let n = p.numel();
        let kernel = if p.prunable() { n } else { 0 };
        match layers.last_mut() {
            Some(last) if last.layer == layer => {
                last.trainable += n;
                last.kernel += kernel;
            }
            _ => layers.push(LayerCount {
                layer: layer.to_string(),
                trainable: n,
                kernel,
            }),
        }
    }
    ParamReport {
        trainable_count: layers.iter().map(|l| l.trainable).sum(),
        kernel_count: layers.iter().map(|l| l.kernel).sum(),
        layers,
    }
}
