//! Central finite-difference check of analytic gradients.
//!
//! Error per tensor is `||analytic - numeric|| / max(||analytic||, ||numeric||)`
//! over the checked coordinates. A coordinate whose `+h`/`-h` probes flip the
//! sign of any ReLU input straddles a kink where the derivative does not
//! exist; it is skipped and counted in [`GradCheckReport::kinks`].

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;

use super::graph::{backward, forward, Bindings, Execution, Graph, Mode, NodeId, Op};
use super::{NamedTensor, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub coordinates: usize,
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst_tensor.is_empty() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst_tensor = other.worst_tensor.clone();
        }
        self.coordinates += other.coordinates;
        self.kinks += other.kinks;
    }
}

pub struct GradCheck<'g> {
    pub graph: &'g Graph,
    pub loss: NodeId,
    pub mode: Mode,
    pub step: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub sample: Option<usize>,
}

fn relu_signs(graph: &Graph, exec: &Execution<f64>) -> Vec<bool> {
    let mut signs = Vec::new();
    for node in graph.nodes() {
        if let Op::Relu(x) = &node.op {
            signs.extend(exec.value(*x).data().iter().map(|&v| v > 0.0));
        }
    }
    signs
}

impl GradCheck<'_> {
    pub fn new(graph: &Graph, loss: NodeId, mode: Mode) -> GradCheck<'_> {
        GradCheck {
            graph,
            loss,
            mode,
            step: DEFAULT_STEP,
            sample: None,
        }
    }

    pub fn run(
        &self,
        tensors: &[NamedTensor<f64>],
        labels: &[(String, Vec<usize>)],
        rng: &mut impl Rng,
    ) -> Result<GradCheckReport> {
        fn bind<'a>(
            tensors: &'a [NamedTensor<f64>],
            labels: &'a [(String, Vec<usize>)],
        ) -> Bindings<'a, f64> {
            let mut b = Bindings::new();
            for t in tensors {
                b.insert(t.name.clone(), &t.tensor);
            }
            for (name, l) in labels {
                b.insert_labels(name.clone(), l);
            }
            b
        }
        let (analytic, base_signs) = {
            let b = bind(tensors, labels);
            let exec = forward(self.graph, &b, self.mode)?;
            let signs = relu_signs(self.graph, &exec);
            (backward(self.graph, &exec, &b, self.loss)?, signs)
        };

        let mut report = GradCheckReport::default();
        let mut work = tensors.to_vec();
        for (ti, t) in tensors.iter().enumerate() {
            if !t.tensor.requires_grad() {
                continue;
            }
            let n = t.tensor.len();
            let coords: Vec<usize> = match self.sample {
                Some(k) if k < n => sample(rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            let grad = &analytic[&t.name];
            let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &coords {
                let original = work[ti].tensor.data()[i];
                let mut probe = |delta: f64| -> Result<(f64, Vec<bool>)> {
                    work[ti].tensor.data_mut()[i] = original + delta;
                    let b = bind(&work, labels);
                    let exec = forward(self.graph, &b, self.mode)?;
                    Ok((exec.value(self.loss).item(), relu_signs(self.graph, &exec)))
                };
                let (plus, sp) = probe(self.step)?;
                let (minus, sm) = probe(-self.step)?;
                work[ti].tensor.data_mut()[i] = original;
                if sp != base_signs || sm != base_signs {
                    report.kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = grad.data()[i];
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
                report.coordinates += 1;
            }
            let denom = a2.sqrt().max(n2.sqrt());
            let rel = if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 };
            if rel >= report.max_rel_error || report.worst_tensor.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_tensor = t.name.clone();
            }
        }
        Ok(report)
    }
}

/// Uniform random tensor in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape and data agree")
}
