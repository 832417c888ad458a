//! Self-checks run by the `verify` command: architecture counts, gradient
//! checks, schedule values, accounting identities, a pruning sort oracle and
//! the learning-rate-rewind identity on a small network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{synthetic, SyntheticSpec};
use crate::engine::gradcheck::{random_tensor, GradCheck, GradCheckReport};
use crate::engine::{BatchNormSpec, Graph, Mode, NamedTensor, NodeId, Padding, Tensor};
use crate::error::Result;
use crate::models::{self, build, count_params, BuildOptions, INPUT};
use crate::optim::{attach_loss, LrPlan, LrSchedule};
use crate::prune::{
    iterative_sparsity, prune_structured, prune_unstructured, CompressionRatio, PruneOptions,
};
use crate::rewind::{self, CheckpointStore};
use crate::train::{TrainConfig, Trainer, LABELS};

/// Reference `(model, trainable, kernel)` counts.
pub const PAPER_COUNTS: [(&str, usize, usize); 4] = [
    ("resnet20", 272_282, 270_896),
    ("resnet56", 855_578, 851_504),
    ("resnet110", 1_730_522, 1_722_416),
    ("wrn16-8", 10_961_370, 10_954_160),
];

/// Gradient-check tolerance on the relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub fn param_counts() -> Result<Vec<Check>> {
    PAPER_COUNTS
        .iter()
        .map(|&(name, trainable, kernel)| {
            let model = build(name, &BuildOptions::cifar(10, 0))?;
            let r = count_params(&model.spec);
            Ok(Check::new(
                format!("params/{name}"),
                (r.trainable_count, r.kernel_count) == (trainable, kernel),
                format!(
                    "({}, {}), expected ({trainable}, {kernel})",
                    r.trainable_count, r.kernel_count
                ),
            ))
        })
        .collect()
}

pub const PRIMITIVES: [&str; 13] = [
    "conv2d",
    "dense",
    "bias_add",
    "batch_norm",
    "relu",
    "add",
    "global_avg_pool",
    "flatten",
    "softmax",
    "softmax_cross_entropy",
    "squared_sum",
    "sum",
    "scale",
];

/// A random single-primitive graph and its bindings.
struct Case {
    graph: Graph,
    loss: Option<NodeId>,
    tensors: Vec<NamedTensor<f64>>,
    labels: Vec<(String, Vec<usize>)>,
}

impl Case {
    fn new() -> Self {
        Self {
            graph: Graph::new(),
            loss: None,
            tensors: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn param(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
        self.tensors.push(NamedTensor::new(
            name,
            random_tensor(shape, 1.0, rng).with_grad(true),
        ));
        self.graph.input(name)
    }

    fn constant(&mut self, name: &str, tensor: Tensor<f64>) -> NodeId {
        self.tensors.push(NamedTensor::new(name, tensor));
        self.graph.input(name)
    }

    /// `sum(flatten(y) . R) + 0.5 * sum(y^2)` so every output element gets a
    /// distinct, non-constant upstream gradient.
    fn readout(&mut self, y: NodeId, shape: &[usize], rng: &mut ChaCha8Rng) {
        let width = shape[1..].iter().product::<usize>();
        let r = random_tensor(&[1, width], 1.0, rng);
        let r = self.constant("readout", r);
        let flat = self.graph.flatten(y);
        let proj = self.graph.dense(flat, r);
        let lin = self.graph.sum(proj);
        let sq = self.graph.squared_sum(vec![y], 0.5);
        self.loss = Some(self.graph.add(lin, sq));
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> (Case, Mode) {
    let mut c = Case::new();
    let mut mode = Mode::Eval;
    let (b, h, w, ch) = (dims(rng, 1, 3), dims(rng, 3, 5), dims(rng, 3, 5), dims(rng, 1, 3));
    match name {
        "conv2d" => {
            let x = c.param("x", &[b, h, w, ch], rng);
            let (kh, kw) = (if rng.random_bool(0.5) { 3 } else { 1 }, if rng.random_bool(0.5) { 3 } else { 1 });
            let cout = dims(rng, 1, 3);
            let k = c.param("k", &[cout, kh, kw, ch], rng);
            let stride = dims(rng, 1, 2);
            let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            let y = c.graph.conv2d(x, k, stride, padding);
            let oh = match padding {
                Padding::Same => h.div_ceil(stride),
                Padding::Valid => (h - kh) / stride + 1,
            };
            let ow = match padding {
                Padding::Same => w.div_ceil(stride),
                Padding::Valid => (w - kw) / stride + 1,
            };
            c.readout(y, &[b, oh, ow, cout], rng);
        }
        "dense" => {
            let (k, o) = (dims(rng, 1, 6), dims(rng, 1, 5));
            let x = c.param("x", &[b, k], rng);
            let wt = c.param("w", &[o, k], rng);
            let y = c.graph.dense(x, wt);
            c.readout(y, &[b, o], rng);
        }
        "bias_add" => {
            let x = c.param("x", &[b, h, w, ch], rng);
            let bias = c.param("bias", &[ch], rng);
            let y = c.graph.bias_add(x, bias);
            c.readout(y, &[b, h, w, ch], rng);
        }
        "batch_norm" => {
            mode = Mode::Train;
            let b = b + 1;
            let x = c.param("x", &[b, h, w, ch], rng);
            let g = c.param("gamma", &[ch], rng);
            let beta = c.param("beta", &[ch], rng);
            c.constant("mean", Tensor::zeros(vec![ch]));
            c.constant("var", Tensor::full(vec![ch], 1.0));
            let y = c.graph.batch_norm(
                x,
                g,
                beta,
                BatchNormSpec {
                    moving_mean: "mean".into(),
                    moving_var: "var".into(),
                    decay: 0.997,
                    epsilon: 1e-5,
                },
            );
            c.readout(y, &[b, h, w, ch], rng);
        }
        "relu" => {
            let x = c.param("x", &[b, h * w * ch], rng);
            let y = c.graph.relu(x);
            c.readout(y, &[b, h * w * ch], rng);
        }
        "add" => {
            let p = c.param("a", &[b, h, w, ch], rng);
            let q = c.param("b", &[b, h, w, ch], rng);
            let y = c.graph.add(p, q);
            c.readout(y, &[b, h, w, ch], rng);
        }
        "global_avg_pool" => {
            let x = c.param("x", &[b, h, w, ch], rng);
            let y = c.graph.global_avg_pool(x);
            c.readout(y, &[b, ch], rng);
        }
        "flatten" => {
            let x = c.param("x", &[b, h, w, ch], rng);
            let y = c.graph.flatten(x);
            c.readout(y, &[b, h * w * ch], rng);
        }
        "softmax" => {
            let k = dims(rng, 2, 6);
            let x = c.param("x", &[b, k], rng);
            let y = c.graph.softmax(x);
            c.readout(y, &[b, k], rng);
        }
        "softmax_cross_entropy" => {
            let k = dims(rng, 2, 6);
            let z = c.param("z", &[b, k], rng);
            let labels = (0..b).map(|_| rng.random_range(0..k)).collect();
            c.labels.push(("y".into(), labels));
            c.loss = Some(c.graph.softmax_cross_entropy(z, "y"));
        }
        "squared_sum" => {
            let p = c.param("a", &[b, h], rng);
            let q = c.param("b", &[w, ch], rng);
            c.loss = Some(c.graph.squared_sum(vec![p, q], rng.random_range(1e-4..2.0)));
        }
        "sum" => {
            let x = c.param("x", &[b, h, w, ch], rng);
            c.loss = Some(c.graph.sum(x));
        }
        "scale" => {
            let x = c.param("x", &[b, h, w], rng);
            let y = c.graph.scale(x, rng.random_range(-2.0..2.0));
            c.readout(y, &[b, h, w], rng);
        }
        other => unreachable!("no gradient case for {other}"),
    }
    (c, mode)
}

/// Checks `cases` random instances of `primitive` in f64.
pub fn check_primitive(primitive: &str, cases: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport::default();
    for i in 0..cases {
        let (case, mode) = primitive_case(primitive, &mut rng);
        let mut report = GradCheck::new(&case.graph, case.loss.expect("case sets a loss"), mode).run(
            &case.tensors,
            &case.labels,
            &mut rng,
        )?;
        report.worst_tensor = format!("case {i} {}", report.worst_tensor);
        total.merge(&report);
    }
    Ok(total)
}

/// cnn-small on 8x8x3 inputs with the full regularized loss, batch norm in
/// training mode; `sample` coordinates per tensor.
pub fn check_composite(sample: usize, seed: u64) -> Result<GradCheckReport> {
    let options = BuildOptions {
        classes: 4,
        input_shape: [8, 8, 3],
        seed,
        bn_decay: None,
        bn_epsilon: 1e-5,
    };
    let model = build("cnn-small", &options)?;
    let mut graph = model.spec.graph.clone();
    let params = model
        .spec
        .params
        .iter()
        .map(|p| graph.input(&p.name))
        .collect();
    let loss = attach_loss(&mut graph, model.spec.logits, LABELS, params, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut tensors: Vec<NamedTensor<f64>> = model
        .weights
        .iter()
        .map(|t| {
            let mut c = t.tensor.cast::<f64>();
            c.set_requires_grad(t.tensor.requires_grad());
            NamedTensor::new(t.name.clone(), c)
        })
        .collect();
    // Non-trivial batch-norm affine parameters.
    for t in tensors.iter_mut().filter(|t| t.name.ends_with("gamma") || t.name.ends_with("beta")) {
        for v in t.tensor.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    tensors.push(NamedTensor::new(INPUT, random_tensor(&[3, 8, 8, 3], 1.0, &mut rng)));
    let labels = vec![(LABELS.to_string(), (0..3).map(|_| rng.random_range(0..4)).collect())];
    let mut check = GradCheck::new(&graph, loss, Mode::Train);
    check.sample = Some(sample);
    check.run(&tensors, &labels, &mut rng)
}

pub fn gradient_checks(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (i, p) in PRIMITIVES.iter().enumerate() {
        let r = check_primitive(p, cases, seed.wrapping_add(i as u64))?;
        out.push(Check::new(
            format!("grad/{p}"),
            r.max_rel_error < GRAD_TOLERANCE,
            format!(
                "{cases} cases, max rel error {:.3e} ({}), {} coords, {} kinks skipped",
                r.max_rel_error, r.worst_tensor, r.coordinates, r.kinks
            ),
        ));
    }
    let r = check_composite(24, seed)?;
    out.push(Check::new(
        "grad/cnn-small",
        r.max_rel_error < GRAD_TOLERANCE,
        format!(
            "max rel error {:.3e} ({}), {} coords, {} kinks skipped",
            r.max_rel_error, r.worst_tensor, r.coordinates, r.kinks
        ),
    ));
    Ok(out)
}

pub fn schedule_checks() -> Result<Vec<Check>> {
    let r = LrSchedule::resnet();
    let w = LrSchedule::wide_resnet();
    let cases: [(&str, &LrSchedule, u64, f32); 9] = [
        ("resnet", &r, 0, 0.1),
        ("resnet", &r, 35_999, 0.1),
        ("resnet", &r, 36_000, 0.01),
        ("resnet", &r, 54_000, 0.001),
        ("resnet", &r, 71_999, 0.001),
        ("wrn", &w, 0, 0.1),
        ("wrn", &w, 32_000, 0.02),
        ("wrn", &w, 48_000, 0.004),
        ("wrn", &w, 79_999, 0.0008),
    ];
    cases
        .iter()
        .map(|&(name, s, t, want)| {
            let got = s.lr_at(t)? as f32;
            Ok(Check::new(
                format!("schedule/{name}@{t}"),
                got == want,
                format!("{got}, expected {want}"),
            ))
        })
        .collect()
}

pub fn accounting_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let c = CompressionRatio::from_sparsity(0.893)?;
    out.push(Check::new(
        "accounting/89.3%",
        (c.value() - 9.35).abs() <= 0.01,
        format!("{:.4}x", c.value()),
    ));
    for (kernels, ratio, survivors) in [
        (270_896usize, 9.35, 29_000usize),
        (851_504, 22.73, 37_600),
        (10_954_160, 100.0, 109_500),
    ] {
        let got = CompressionRatio::new(ratio)?.survivors(kernels);
        let rel = (got as f64 - survivors as f64).abs() / survivors as f64;
        out.push(Check::new(
            format!("accounting/{kernels}@{ratio}x"),
            rel <= 0.005,
            format!("{got} survivors, reference {survivors}, rel diff {rel:.4}"),
        ));
    }
    for p in [0.2, 0.3] {
        let mut direct = 1.0;
        let mut worst = 0.0f64;
        for k in 0..=12 {
            worst = worst.max((iterative_sparsity(p, k)? - (1.0 - direct)).abs());
            direct *= 1.0 - p;
        }
        out.push(Check::new(
            format!("accounting/iterative p={p}"),
            worst < 1e-12,
            format!("max deviation {worst:.1e}"),
        ));
    }
    Ok(out)
}

/// Random kernel sets of at most 10k weights with frequent magnitude ties.
pub fn random_kernels(rng: &mut impl Rng) -> Vec<NamedTensor> {
    let count = rng.random_range(1..=4);
    let levels = rng.random_range(3..200) as f32;
    (0..count)
        .map(|i| {
            let shape: Vec<usize> = if rng.random_bool(0.5) {
                vec![rng.random_range(1..=16), rng.random_range(1..=40)]
            } else {
                vec![
                    rng.random_range(1..=8),
                    rng.random_range(1..=3),
                    rng.random_range(1..=3),
                    rng.random_range(1..=8),
                ]
            };
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| (rng.random_range(-1.0f32..1.0) * levels).round() / levels)
                .collect();
            NamedTensor::new(format!("t{i}"), Tensor::new(shape, data).expect("shape"))
        })
        .collect()
}

/// Masked positions from a full sort of `(|w|, tensor, position)`.
pub fn sort_oracle(kernels: &[NamedTensor], sparsity: f64) -> Vec<Vec<bool>> {
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for (ti, k) in kernels.iter().enumerate() {
        for (pos, w) in k.tensor.data().iter().enumerate() {
            all.push((w.abs(), ti, pos));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let cut = (sparsity * all.len() as f64 + 1e-9).floor() as usize;
    let mut keep: Vec<Vec<bool>> = kernels.iter().map(|k| vec![true; k.tensor.len()]).collect();
    for &(_, ti, pos) in &all[..cut] {
        keep[ti][pos] = false;
    }
    keep
}

pub fn pruning_checks(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let kernels = random_kernels(&mut rng);
        let s = rng.random_range(0.0..0.99);
        let refs: Vec<&NamedTensor> = kernels.iter().collect();
        let mask = prune_unstructured(&refs, s, &PruneOptions::default(), None)?;
        let got: Vec<Vec<bool>> = mask.tensors().iter().map(|t| t.keep.clone()).collect();
        mismatches += usize::from(got != sort_oracle(&kernels, s));
    }
    let rows = Tensor::from_slice(vec![2, 2], &[1.0f32, -1.0, 0.1, 0.2])?;
    let rows = NamedTensor::new("rows", rows);
    let structured = prune_structured(&[&rows], 0.5, &PruneOptions::default(), None)?;
    Ok(vec![
        Check::new(
            "prune/global-vs-sort",
            mismatches == 0,
            format!("{mismatches} of {cases} random cases differ"),
        ),
        Check::new(
            "prune/structured-rows",
            structured.tensors()[0].keep == [true, true, false, false],
            format!("{:?}", structured.tensors()[0].keep),
        ),
    ])
}

/// Trains cnn-small for `n` steps, stores snapshots through the checkpoint
/// file format, and compares LR rewinding with rewinding to K = N plus an
/// N-step schedule-reset retrain.
pub fn equivalence_check(n: u64, seed: u64) -> Result<Check> {
    let (train, val) = synthetic(&SyntheticSpec {
        train: 256,
        validation: 64,
        image_size: 8,
        seed,
        ..Default::default()
    })?;
    let model = build(
        "cnn-small",
        &BuildOptions {
            input_shape: [8, 8, 3],
            ..BuildOptions::cifar(10, seed)
        },
    )?;
    let config = TrainConfig {
        batch_size: 16,
        ..Default::default()
    };
    let trainer = Trainer::new(&model.spec, &train, &val, config)?;
    let schedule = LrSchedule::resnet().rescaled(n)?;
    let mut weights = model.weights.clone();
    let mut store = CheckpointStore::new("verify", n);
    let plan = LrPlan::Schedule {
        schedule: schedule.clone(),
        offset: 0,
    };
    trainer.train(&mut weights, None, &plan, n, seed, &mut |it, w| {
        if it == 0 || it == n {
            store.snapshot(it, w)?;
        }
        Ok(())
    })?;
    let dir = std::env::temp_dir().join(format!("rewindlab-verify-{}-{seed}", std::process::id()));
    store.save_dir(&dir)?;
    let loaded = CheckpointStore::load_dir(&dir, &model.spec, n)?;
    let _ = std::fs::remove_dir_all(&dir);
    let mask = prune_unstructured(
        &model.spec.kernels(&weights),
        0.5,
        &PruneOptions::default(),
        None,
    )?;
    let retrain_seed = seed ^ 0xabc;
    let a = rewind::lr_rewind(&trainer, weights, &mask, &schedule, retrain_seed)?;
    let b = rewind::rewind_to_end_then_reset(&trainer, &loaded, &mask, &schedule, retrain_seed)?;
    let same = a.weights.bit_eq(&b.weights);
    Ok(Check::new(
        "rewind/lr-equals-weight-rewind-at-N",
        same && a.summary.steps == n && b.summary.steps == n,
        format!(
            "N={n}, checksums {:016x} / {:016x}",
            a.weights.checksum(),
            b.weights.checksum()
        ),
    ))
}

/// The full suite; `quick` trims case counts.
pub fn run_all(quick: bool) -> Result<Vec<Check>> {
    let mut out = param_counts()?;
    out.extend(gradient_checks(if quick { 5 } else { 20 }, 7)?);
    out.extend(schedule_checks()?);
    out.extend(accounting_checks()?);
    out.extend(pruning_checks(if quick { 10 } else { 50 }, 11)?);
    out.push(equivalence_check(if quick { 20 } else { 100 }, 3)?);
    let zoo_ok = models::ZOO.iter().all(|m| build(m, &BuildOptions::cifar(10, 0)).is_ok());
    out.push(Check::new("models/zoo-builds", zoo_ok, models::ZOO.join(", ")));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for c in gradient_checks(3, 1).unwrap() {
            assert!(c.passed, "{c}");
        }
        for c in schedule_checks().unwrap().into_iter().chain(accounting_checks().unwrap()) {
            assert!(c.passed, "{c}");
        }
        for c in pruning_checks(10, 2).unwrap() {
            assert!(c.passed, "{c}");
        }
        let eq = equivalence_check(12, 5).unwrap();
        assert!(eq.passed, "{eq}");
    }
}
