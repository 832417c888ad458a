//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria run cheapest first; A4 reuses the A5 dense baseline.

use std::io::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rewindlab::config::{self, ExperimentConfig};
use rewindlab::data::{synthetic, SyntheticSpec};
use rewindlab::engine::{NamedTensor, Tensor};
use rewindlab::experiment::{self, Baseline, RunOptions, TrialRecord, Workspace};
use rewindlab::models::{build, count_params, BuildOptions};
use rewindlab::optim::{LrPlan, LrSchedule};
use rewindlab::prune::{
    iterative_sparsity, prune_structured, prune_unstructured, CompressionRatio, PruneMask,
    PruneOptions,
};
use rewindlab::rewind::{self, CheckpointStore, Strategy};
use rewindlab::train::{TrainConfig, Trainer};
use rewindlab::verify;

const A2_MAX_REL_ERROR: f64 = 1e-4;
const A2_CASES: usize = 20;
const A4_ITERATIONS: u64 = 2000;
const A5_TRIALS: u32 = 3;
const A5_BASELINE_BAND: f64 = 0.02;
const A6_CASES: usize = 50;
const A7_REL_TOLERANCE: f64 = 0.005;
const A8_MASKED_STEPS: u64 = 1000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn a1() -> Outcome {
    let expected = [
        ("resnet20", 272_282, 270_896),
        ("resnet56", 855_578, 851_504),
        ("resnet110", 1_730_522, 1_722_416),
        ("wrn16-8", 10_961_370, 10_954_160),
    ];
    let mut bad = Vec::new();
    let mut got = Vec::new();
    for (name, trainable, kernel) in expected {
        let r = count_params(&build(name, &BuildOptions::cifar(10, 0)).unwrap().spec);
        got.push(format!("{name}=({}, {})", r.trainable_count, r.kernel_count));
        if (r.trainable_count, r.kernel_count) != (trainable, kernel) {
            bad.push(name);
        }
    }
    outcome(bad.is_empty(), got.join(" "))
}

fn a2() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut cases = Vec::new();
    for (i, p) in verify::PRIMITIVES.iter().enumerate() {
        let r = verify::check_primitive(p, A2_CASES, 100 + i as u64).unwrap();
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, format!("{p}/{}", r.worst_tensor));
        }
        cases.push(r.max_rel_error < A2_MAX_REL_ERROR);
    }
    let mut composite_worst = 0.0f64;
    for seed in 0..A2_CASES as u64 {
        let r = verify::check_composite(8, seed).unwrap();
        composite_worst = composite_worst.max(r.max_rel_error);
    }
    let passed = cases.iter().all(|&ok| ok) && composite_worst < A2_MAX_REL_ERROR;
    outcome(
        passed,
        format!(
            "{} primitives x {A2_CASES} cases, worst {:.2e} ({}); cnn-small x {A2_CASES}, worst {:.2e}; limit {A2_MAX_REL_ERROR:e}",
            verify::PRIMITIVES.len(),
            worst.0,
            worst.1,
            composite_worst
        ),
    )
}

fn a3() -> Outcome {
    let resnet = LrSchedule::resnet();
    let wrn = LrSchedule::wide_resnet();
    let table: [(&LrSchedule, u64, f32); 14] = [
        (&resnet, 0, 0.1),
        (&resnet, 35_999, 0.1),
        (&resnet, 36_000, 0.01),
        (&resnet, 53_999, 0.01),
        (&resnet, 54_000, 0.001),
        (&resnet, 71_999, 0.001),
        (&wrn, 0, 0.1),
        (&wrn, 31_999, 0.1),
        (&wrn, 32_000, 0.02),
        (&wrn, 47_999, 0.02),
        (&wrn, 48_000, 0.004),
        (&wrn, 63_999, 0.004),
        (&wrn, 64_000, 0.0008),
        (&wrn, 79_999, 0.0008),
    ];
    let mut misses = Vec::new();
    for (s, t, want) in table {
        let got = s.lr_at(t).unwrap() as f32;
        if got != want {
            misses.push(format!("t={t}: {got} != {want}"));
        }
    }
    let ends = resnet.lr_at(72_000).is_err() && wrn.lr_at(80_000).is_err();
    outcome(
        misses.is_empty() && ends,
        if misses.is_empty() {
            format!("{} points exact, past-end rejected: {ends}", table.len())
        } else {
            misses.join("; ")
        },
    )
}

fn random_kernels(rng: &mut ChaCha8Rng) -> Vec<NamedTensor> {
    let levels = rng.random_range(2..100) as f32;
    (0..rng.random_range(1..=4))
        .map(|i| {
            let shape = if rng.random_bool(0.5) {
                vec![rng.random_range(1..=20), rng.random_range(1..=50)]
            } else {
                vec![
                    rng.random_range(1..=8),
                    3,
                    3,
                    rng.random_range(1..=8),
                ]
            };
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| (rng.random_range(-1.0f32..1.0) * levels).round() / levels)
                .collect();
            NamedTensor::new(format!("k{i}"), Tensor::new(shape, data).unwrap())
        })
        .collect()
}

/// Global unstructured oracle: fully sort every weight by
/// `(|w|, tensor, position)` and drop the first `floor(s * K)`.
fn sort_oracle(kernels: &[NamedTensor], s: f64) -> Vec<Vec<bool>> {
    let mut keyed = Vec::new();
    for (t, k) in kernels.iter().enumerate() {
        keyed.extend(k.tensor.data().iter().enumerate().map(|(p, w)| (w.abs(), t, p)));
    }
    keyed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let drop = (s * keyed.len() as f64 + 1e-9).floor() as usize;
    let mut keep: Vec<Vec<bool>> = kernels.iter().map(|k| vec![true; k.tensor.len()]).collect();
    for &(_, t, p) in keyed.iter().take(drop) {
        keep[t][p] = false;
    }
    keep
}

/// Structured oracle: rank leading-axis slices by mean `|w|`, drop in order
/// until the dropped fraction reaches `s`.
fn structured_oracle(kernels: &[NamedTensor], s: f64) -> Vec<Vec<bool>> {
    let total: usize = kernels.iter().map(|k| k.tensor.len()).sum();
    let mut slices = Vec::new();
    for (t, k) in kernels.iter().enumerate() {
        let width = k.tensor.len() / k.tensor.shape()[0];
        for (i, row) in k.tensor.data().chunks(width).enumerate() {
            let mean = row.iter().map(|w| f64::from(w.abs())).sum::<f64>() / width as f64;
            slices.push((mean, t, i, width));
        }
    }
    slices.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut keep: Vec<Vec<bool>> = kernels.iter().map(|k| vec![true; k.tensor.len()]).collect();
    let mut dropped = 0usize;
    for (_, t, i, width) in slices {
        if dropped as f64 >= s * total as f64 - 1e-9 {
            break;
        }
        keep[t][i * width..(i + 1) * width].fill(false);
        dropped += width;
    }
    keep
}

fn keeps(mask: &PruneMask) -> Vec<Vec<bool>> {
    mask.tensors().iter().map(|t| t.keep.clone()).collect()
}

fn a6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut global_bad, mut structured_bad) = (0, 0);
    for _ in 0..A6_CASES {
        let kernels = random_kernels(&mut rng);
        assert!(kernels.iter().map(|k| k.tensor.len()).sum::<usize>() <= 10_000);
        let refs: Vec<&NamedTensor> = kernels.iter().collect();
        let s = rng.random_range(0.0..0.99);
        let opts = PruneOptions::default();
        let g = prune_unstructured(&refs, s, &opts, None).unwrap();
        global_bad += usize::from(keeps(&g) != sort_oracle(&kernels, s));
        let st = prune_structured(&refs, s, &opts, None).unwrap();
        structured_bad += usize::from(keeps(&st) != structured_oracle(&kernels, s));
    }
    outcome(
        global_bad == 0 && structured_bad == 0,
        format!("{A6_CASES} cases: global mismatches {global_bad}, structured mismatches {structured_bad}"),
    )
}

fn a7() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut within = |label: String, got: f64, want: f64| {
        let rel = (got - want).abs() / want;
        ok &= rel <= A7_REL_TOLERANCE;
        lines.push(format!("{label} {got:.4} vs {want} ({:.2}%)", rel * 100.0));
    };
    within("c(89.3%)".into(), 1.0 / (1.0 - 0.893), 9.35);
    within(
        "c(89.3%) via CompressionRatio".into(),
        CompressionRatio::from_sparsity(0.893).unwrap().value(),
        9.35,
    );
    for (kernels, c, survivors) in [
        (270_896usize, 9.35, 29_000.0),
        (851_504, 22.73, 37_600.0),
        (10_954_160, 100.0, 109_500.0),
    ] {
        let got = CompressionRatio::new(c).unwrap().survivors(kernels);
        within(format!("survivors({kernels}@{c}x)"), got as f64, survivors);
    }
    let exact = CompressionRatio::new(100.0).unwrap().survivors(10_954_160);
    ok &= exact == 109_541;
    let mut iterative_ok = true;
    for p in [0.2, 0.3] {
        let mut kept = 1.0f64;
        for k in 1..=15u32 {
            kept *= 1.0 - p;
            iterative_ok &= (iterative_sparsity(p, k).unwrap() - (1.0 - kept)).abs() < 1e-12;
        }
    }
    ok &= iterative_ok;
    lines.push(format!("100x survivors exact {exact}; iterative p in {{0.2, 0.3}} ok: {iterative_ok}"));
    outcome(ok, lines.join("; "))
}

fn a8() -> Outcome {
    let (train, val) = synthetic(&SyntheticSpec {
        train: 1024,
        validation: 256,
        image_size: 8,
        seed: 88,
        ..Default::default()
    })
    .unwrap();
    let model = build(
        "cnn-small",
        &BuildOptions {
            input_shape: [8, 8, 3],
            ..BuildOptions::cifar(10, 8)
        },
    )
    .unwrap();
    let trainer = Trainer::new(
        &model.spec,
        &train,
        &val,
        TrainConfig {
            batch_size: 32,
            ..Default::default()
        },
    )
    .unwrap();
    let schedule = LrSchedule::new(0.1, vec![200, 300], vec![0.1, 0.1], 400).unwrap();
    let plan = LrPlan::Schedule {
        schedule: schedule.clone(),
        offset: 0,
    };

    // Dense run with snapshots; restore must reproduce every stored copy.
    let mut weights = model.weights.clone();
    let mut store = CheckpointStore::new("a8", 50);
    let mut copies = Vec::new();
    trainer
        .train(&mut weights, None, &plan, 400, 1, &mut |it, w| {
            if it % 50 == 0 {
                store.snapshot(it, w)?;
                copies.push((it, w.clone()));
            }
            Ok(())
        })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    store.save_dir(dir.path()).unwrap();
    let loaded = CheckpointStore::load_dir(dir.path(), &model.spec, 50).unwrap();
    let restore_ok = copies.iter().all(|(k, w)| {
        store.restore(*k).unwrap().bit_eq(w) && loaded.restore(*k).unwrap().bit_eq(w)
    });

    // Masked training: pruned positions stay exactly zero at every step.
    let mask = prune_unstructured(&model.spec.kernels(&weights), 0.8, &PruneOptions::default(), None).unwrap();
    let mut masked = weights.clone();
    let mut violations = 0usize;
    trainer
        .train(&mut masked, Some(&mask), &LrPlan::Constant(0.05), A8_MASKED_STEPS, 2, &mut |_, w| {
            for m in mask.tensors() {
                let data = w.get(&m.name).unwrap().data();
                violations += m.keep.iter().zip(data).filter(|(&k, &v)| !k && v != 0.0).count();
            }
            Ok(())
        })
        .unwrap();

    // Iterative masks only ever shrink.
    let mut current = weights.clone();
    let mut prev: Option<PruneMask> = None;
    let mut monotone = true;
    for round in 1..=5 {
        let target = iterative_sparsity(0.3, round).unwrap();
        let next = prune_unstructured(&model.spec.kernels(&current), target, &PruneOptions::default(), prev.as_ref())
            .unwrap();
        if let Some(p) = &prev {
            monotone &= next.is_subset_of(p) && next.nonzero_count() < p.nonzero_count();
        }
        trainer
            .train(&mut current, Some(&next), &LrPlan::Constant(0.05), 50, u64::from(round), &mut |_, _| Ok(()))
            .unwrap();
        prev = Some(next);
    }
    outcome(
        restore_ok && violations == 0 && monotone,
        format!(
            "{} snapshots restored bit-exact: {restore_ok}; nonzero masked values over {A8_MASKED_STEPS} steps: {violations}; iterative masks monotone: {monotone}",
            copies.len()
        ),
    )
}

fn curve_bytes(config: &ExperimentConfig) -> Vec<(String, Vec<u8>)> {
    let (_, result) = experiment::run(config, RunOptions { deterministic: true }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut out: Vec<(String, Vec<u8>)> = experiment::write_result(&result, dir.path())
        .unwrap()
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn a9() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for mode in ["one_shot", "iterative"] {
        let config = config::parse_config_value(
            serde_json::json!({ "preset": "desk-mlp-synthetic", "mode": mode, "iterative": { "step": 0.3, "rounds": 2 } }),
            &[],
        )
        .unwrap();
        let first = curve_bytes(&config);
        let second = curve_bytes(&config);
        let same = !first.is_empty() && first == second;
        ok &= same;
        let bytes: usize = first.iter().map(|(_, b)| b.len()).sum();
        details.push(format!("{mode}: {} CSV files, {bytes} bytes, identical: {same}", first.len()));
    }
    outcome(ok, details.join("; "))
}

fn medians(records: &[TrialRecord], strategy: Strategy, compression: f64) -> (f64, usize) {
    let mut accs: Vec<f64> = records
        .iter()
        .filter(|r| r.strategy == strategy && r.error.is_none() && (r.compression - compression).abs() < 0.01)
        .map(|r| r.accuracy)
        .collect();
    accs.sort_by(f64::total_cmp);
    let n = accs.len();
    let m = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => accs[n / 2],
        _ => (accs[n / 2 - 1] + accs[n / 2]) / 2.0,
    };
    (m, n)
}

fn a5(workspace: &Workspace, baseline: &Baseline, config: &ExperimentConfig) -> Outcome {
    let result = experiment::run_one_shot_with(workspace, baseline, config, RunOptions::default()).unwrap();
    let mut ok = result.failures().is_empty();
    let mut parts = vec![format!(
        "kernels {}, K={}, baseline {:.4}",
        workspace.model.spec.kernel_count(),
        config.rewind_k(),
        baseline.accuracy
    )];
    for c in [2.0, 5.0] {
        let row: Vec<(Strategy, f64, usize)> = Strategy::ALL
            .iter()
            .map(|&s| {
                let (m, n) = medians(&result.records, s, c);
                (s, m, n)
            })
            .collect();
        ok &= row.iter().all(|&(_, _, n)| n == A5_TRIALS as usize);
        parts.push(format!(
            "s={:.1}: {}",
            1.0 - 1.0 / c,
            row.iter().map(|(s, m, _)| format!("{s} {m:.4}")).collect::<Vec<_>>().join(", ")
        ));
        if c == 2.0 {
            ok &= row.iter().all(|&(_, m, _)| (m - baseline.accuracy).abs() <= A5_BASELINE_BAND);
        } else {
            let ft = row[0].1;
            ok &= row[1..].iter().all(|&(_, m, _)| ft <= m);
        }
    }
    outcome(ok, parts.join("; "))
}

fn a4(workspace: &Workspace, baseline: &Baseline, config: &ExperimentConfig) -> Outcome {
    let trainer = workspace.trainer().unwrap();
    let schedule = config.schedule();
    assert_eq!(schedule.total_iterations, A4_ITERATIONS);
    let dir = tempfile::tempdir().unwrap();
    baseline.store.save_dir(dir.path()).unwrap();
    let store = CheckpointStore::load_dir(dir.path(), &workspace.model.spec, config.snapshot_cadence).unwrap();
    let mask = prune_unstructured(
        &workspace.model.spec.kernels(&baseline.weights),
        0.8,
        &PruneOptions::default(),
        None,
    )
    .unwrap();
    let seed = experiment::retrain_seed(config.seed, 0, Strategy::LrRewind, 0);
    let a = rewind::lr_rewind(&trainer, baseline.weights.clone(), &mask, schedule, seed).unwrap();
    let b = rewind::rewind_to_end_then_reset(&trainer, &store, &mask, schedule, seed).unwrap();
    outcome(
        a.weights.bit_eq(&b.weights) && a.summary.steps == A4_ITERATIONS && b.summary.steps == A4_ITERATIONS,
        format!(
            "N={A4_ITERATIONS}: {:016x} vs {:016x}, steps {} / {}",
            a.weights.checksum(),
            b.weights.checksum(),
            a.summary.steps,
            b.summary.steps
        ),
    )
}

fn report(id: &str, title: &str, started: Instant, o: &Outcome) -> bool {
    println!(
        "{id} {} {title} ({:.1}s): {}",
        if o.passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        o.detail
    );
    std::io::stdout().flush().unwrap();
    o.passed
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut results = Vec::new();
    let mut step = |id: &str, title: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((id.to_string(), report(id, title, t, &o)));
    };
    step("A1", "architecture counts", &mut a1);
    step("A2", "gradient checks", &mut a2);
    step("A3", "learning-rate schedules", &mut a3);
    step("A6", "pruning oracles", &mut a6);
    step("A7", "accounting identities", &mut a7);
    step("A8", "mask and rewind invariants", &mut a8);
    step("A9", "deterministic curves", &mut a9);

    let config = config::parse_config_value(
        serde_json::json!({ "preset": "desk-cnn-synthetic", "trials": A5_TRIALS, "rewind_iteration": null }),
        &[],
    )
    .unwrap();
    let t = Instant::now();
    let workspace = experiment::prepare(&config).unwrap();
    let baseline = experiment::train_baseline(&workspace, &config).unwrap();
    println!("desk baseline trained in {:.1}s", t.elapsed().as_secs_f64());
    step("A4", "lr rewinding equals weight rewinding to N", &mut || a4(&workspace, &baseline, &config));
    step("A5", "fine-tuning vs rewinding trend", &mut || a5(&workspace, &baseline, &config));

    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.as_str()).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
