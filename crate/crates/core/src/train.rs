//! Mini-batch training loop with the pruning mask enforced after every step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{eval_batch, AugmentPipeline, BatchStream, Dataset};
use crate::engine::{backward, forward, Bindings, Graph, Mode, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Weights, INPUT};
use crate::optim::{attach_loss, L2Scope, LrPlan, OptimizerState, MOMENTUM};
use crate::prune::PruneMask;

pub const LABELS: &str = "labels";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub l2: f64,
    pub l2_scope: L2Scope,
    pub momentum: f64,
    pub augment: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            l2: 1e-4,
            l2_scope: L2Scope::AllTrainable,
            momentum: MOMENTUM,
            augment: true,
            eval_batch_size: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    /// Loss of the last step, `NaN` when no step ran.
    pub last_loss: f64,
}

/// Called with `(iteration, weights)` before the first step and after each.
pub type Hook<'h> = dyn FnMut(u64, &Weights) -> Result<()> + 'h;

pub struct Trainer<'a> {
    spec: &'a ModelSpec,
    train: &'a Dataset,
    validation: &'a Dataset,
    pipeline: AugmentPipeline,
    config: TrainConfig,
    graph: Graph,
    loss: NodeId,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        train: &'a Dataset,
        validation: &'a Dataset,
        config: TrainConfig,
    ) -> Result<Self> {
        let [h, w, c] = spec.input_shape;
        if train.shape() != [h, w, c] || validation.shape() != [h, w, c] {
            return Err(Error::InvalidArgument(format!(
                "model {} expects {:?} images, data has {:?}",
                spec.name,
                spec.input_shape,
                train.shape()
            )));
        }
        if train.class_count() > spec.classes {
            return Err(Error::InvalidArgument(format!(
                "data has {} classes, model {} only {}",
                train.class_count(),
                spec.name,
                spec.classes
            )));
        }
        let pipeline = AugmentPipeline::from_dataset(train)?;
        let mut graph = spec.graph.clone();
        let penalized = spec
            .params
            .iter()
            .filter(|p| config.l2_scope == L2Scope::AllTrainable || p.prunable())
            .map(|p| graph.input(&p.name))
            .collect();
        let loss = attach_loss(&mut graph, spec.logits, LABELS, penalized, config.l2);
        Ok(Self {
            spec,
            train,
            validation,
            pipeline,
            config,
            graph,
            loss,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Runs `steps` optimizer steps from zero velocity. Data order and
    /// augmentation come from `seed` alone.
    pub fn train(
        &self,
        weights: &mut Weights,
        mask: Option<&PruneMask>,
        plan: &LrPlan,
        steps: u64,
        seed: u64,
        hook: &mut Hook<'_>,
    ) -> Result<TrainSummary> {
        self.spec.check_weights(weights)?;
        let mut stream = BatchStream::new(
            self.train,
            &self.pipeline,
            self.config.augment,
            self.config.batch_size,
            seed,
        )?;
        let mut opt = OptimizerState::new(&weights.params, self.config.momentum);
        let buffer_index: HashMap<String, usize> = weights
            .buffers
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.clone(), i))
            .collect();
        if let Some(m) = mask {
            enforce(weights, &mut opt, m);
        }
        hook(0, weights)?;
        let mut last_loss = f64::NAN;
        for step in 0..steps {
            let lr = plan.lr_for_step(step)?;
            let batch = stream.next_batch();
            let (mut grads, stats) = {
                let mut b = Bindings::new()
                    .tensor(INPUT, &batch.images)
                    .labels(LABELS, &batch.labels);
                for t in weights.iter() {
                    b.insert(t.name.clone(), &t.tensor);
                }
                let exec = forward(&self.graph, &b, Mode::Train)?;
                last_loss = f64::from(exec.value(self.loss).item());
                if !last_loss.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: "loss".into(),
                        iteration: step,
                        loss: last_loss,
                    });
                }
                let grads = backward(&self.graph, &exec, &b, self.loss)?;
                (grads, exec.into_moving_stats())
            };
            if let Some(m) = mask {
                for (name, g) in grads.iter_mut() {
                    m.apply_to(name, g.data_mut());
                }
            }
            let ordered: Vec<&Tensor> = weights
                .params
                .iter()
                .map(|p| {
                    grads
                        .get(&p.name)
                        .ok_or_else(|| Error::Unbound(format!("gradient of {}", p.name)))
                })
                .collect::<Result<_>>()?;
            opt.iteration = step;
            opt.step(&mut weights.params, &ordered, lr)?;
            if let Some(m) = mask {
                enforce(weights, &mut opt, m);
            }
            for s in stats {
                weights.buffers[buffer_index[&s.mean_name]].tensor = s.mean;
                weights.buffers[buffer_index[&s.var_name]].tensor = s.var;
            }
            hook(step + 1, weights)?;
        }
        Ok(TrainSummary {
            steps,
            last_loss,
        })
    }

    /// Top-1 accuracy on the validation split, inference-mode batch norm.
    pub fn evaluate(&self, weights: &Weights) -> Result<f64> {
        evaluate(self.spec, weights, self.validation, &self.pipeline, self.config.eval_batch_size)
    }

    pub fn evaluate_on(&self, weights: &Weights, data: &Dataset) -> Result<f64> {
        evaluate(self.spec, weights, data, &self.pipeline, self.config.eval_batch_size)
    }
}

/// Zeroes masked weights and velocity.
fn enforce(weights: &mut Weights, opt: &mut OptimizerState, mask: &PruneMask) {
    for (p, v) in weights.params.iter_mut().zip(opt.velocity.iter_mut()) {
        mask.apply_to(&p.name, p.tensor.data_mut());
        mask.apply_to(&p.name, v.data_mut());
    }
}

pub fn evaluate(
    spec: &ModelSpec,
    weights: &Weights,
    data: &Dataset,
    pipeline: &AugmentPipeline,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation on an empty dataset".into()));
    }
    let classes = spec.classes;
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size.max(1)).min(data.len());
        let batch = eval_batch(data, pipeline, start, end);
        let mut b = Bindings::new().tensor(INPUT, &batch.images);
        for t in weights.iter() {
            b.insert(t.name.clone(), &t.tensor);
        }
        let exec = forward(&spec.graph, &b, Mode::Eval)?;
        let logits = exec.value(spec.logits).data();
        for (row, &label) in logits.chunks_exact(classes).zip(&batch.labels) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += usize::from(best == label);
        }
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}
