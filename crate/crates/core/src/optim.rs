//! SGD with Nesterov momentum, piecewise-constant learning rates and the
//! L2-regularized cross-entropy objective.

use serde::{Deserialize, Serialize};

use crate::engine::{forward, Bindings, Graph, Mode, NamedTensor, NodeId, Tensor};
use crate::error::{Error, Result};

/// Momentum used by every bundled training recipe.
pub const MOMENTUM: f64 = 0.9;

/// Piecewise-constant learning rate:
/// `lr(t) = base_lr * prod { multipliers[i] : boundaries[i] <= t }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub boundaries: Vec<u64>,
    pub multipliers: Vec<f64>,
    pub total_iterations: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, boundaries: Vec<u64>, multipliers: Vec<f64>, total_iterations: u64) -> Result<Self> {
        let s = Self {
            base_lr,
            boundaries,
            multipliers,
            total_iterations,
        };
        s.validate()?;
        Ok(s)
    }

    /// 0.1, x0.1 at 36k and 54k, 72k iterations.
    pub fn resnet() -> Self {
        Self {
            base_lr: 0.1,
            boundaries: vec![36_000, 54_000],
            multipliers: vec![0.1, 0.1],
            total_iterations: 72_000,
        }
    }

    /// 0.1, x0.2 at 32k, 48k and 64k, 80k iterations.
    pub fn wide_resnet() -> Self {
        Self {
            base_lr: 0.1,
            boundaries: vec![32_000, 48_000, 64_000],
            multipliers: vec![0.2, 0.2, 0.2],
            total_iterations: 80_000,
        }
    }

    /// The same schedule shape compressed onto `total` iterations.
    pub fn rescaled(&self, total: u64) -> Result<Self> {
        let boundaries = self
            .boundaries
            .iter()
            .map(|&b| ((b as u128 * total as u128) / self.total_iterations as u128) as u64)
            .collect();
        Self::new(self.base_lr, boundaries, self.multipliers.clone(), total)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("optim.{key}"), msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if self.total_iterations == 0 {
            return bad("total_iterations", "must be positive".into());
        }
        if self.boundaries.len() != self.multipliers.len() {
            return bad(
                "multipliers",
                format!(
                    "{} multipliers for {} boundaries",
                    self.multipliers.len(),
                    self.boundaries.len()
                ),
            );
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return bad("boundaries", "must be strictly ascending".into());
        }
        if let Some(&b) = self.boundaries.iter().find(|&&b| b >= self.total_iterations) {
            return bad(
                "boundaries",
                format!("boundary {b} not below total_iterations {}", self.total_iterations),
            );
        }
        if self.multipliers.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return bad("multipliers", "must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t >= self.total_iterations {
            return Err(Error::IterationOutOfRange {
                iteration: t,
                total: self.total_iterations,
            });
        }
        Ok(self
            .boundaries
            .iter()
            .zip(&self.multipliers)
            .filter(|(&b, _)| b <= t)
            .fold(self.base_lr, |lr, (_, &m)| lr * m))
    }
}

/// Which learning rate each retraining step uses.
#[derive(Clone, Debug, PartialEq)]
pub enum LrPlan {
    /// Step `i` uses `schedule.lr_at(offset + i)`.
    Schedule { schedule: LrSchedule, offset: u64 },
    Constant(f64),
}

impl LrPlan {
    pub fn lr_for_step(&self, step: u64) -> Result<f64> {
        match self {
            LrPlan::Schedule { schedule, offset } => schedule.lr_at(offset + step),
            LrPlan::Constant(lr) => Ok(*lr),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Scope {
    /// Every trainable tensor: kernels, biases and batch-norm parameters.
    #[default]
    AllTrainable,
    KernelsOnly,
}

/// Appends `mean_xent(logits, labels) + l2 * sum(w^2)` to `graph`.
pub fn attach_loss(graph: &mut Graph, logits: NodeId, labels: &str, weights: Vec<NodeId>, l2: f64) -> NodeId {
    let xent = graph.softmax_cross_entropy(logits, labels);
    if l2 == 0.0 || weights.is_empty() {
        return xent;
    }
    let penalty = graph.squared_sum(weights, l2);
    graph.add(xent, penalty)
}

/// Value of the regularized loss for given logits.
pub fn loss(logits: &Tensor<f64>, labels: &[usize], weights: &[&Tensor<f64>], l2: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.input("logits");
    let names: Vec<String> = (0..weights.len()).map(|i| format!("w{i}")).collect();
    let nodes = names.iter().map(|n| g.input(n)).collect();
    let out = attach_loss(&mut g, z, "labels", nodes, l2);
    let mut b = Bindings::new().tensor("logits", logits).labels("labels", labels);
    for (n, w) in names.iter().zip(weights) {
        b.insert(n.clone(), w);
    }
    Ok(forward(&g, &b, Mode::Eval)?.value(out).item())
}

/// Nesterov momentum state:
/// `v <- mu * v - lr * g; w <- w + mu * v - lr * g`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub momentum: f64,
    pub iteration: u64,
}

impl OptimizerState {
    /// Zero velocity mirroring `params`.
    pub fn new(params: &[NamedTensor], momentum: f64) -> Self {
        Self {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
                .collect(),
            momentum,
            iteration: 0,
        }
    }

    /// One update with learning rate `lr`. `grads` aligns with `params`.
    pub fn step(&mut self, params: &mut [NamedTensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        for (p, g) in params.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    tensor: p.name.clone(),
                    iteration: self.iteration,
                    loss: f64::NAN,
                });
            }
        }
        let mu = self.momentum as f32;
        let lr = lr as f32;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &d), vel) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vel = mu * *vel - lr * d;
                *w += mu * *vel - lr * d;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// One step at `schedule.lr_at(state.iteration)`.
pub fn sgd_step(
    state: &mut OptimizerState,
    params: &mut [NamedTensor],
    grads: &[&Tensor],
    schedule: &LrSchedule,
) -> Result<()> {
    let lr = schedule.lr_at(state.iteration)?;
    state.step(params, grads, lr)
}
