//! One-shot and iterative pruning drivers, trial aggregation and curve files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::config::{DatasetName, ExperimentConfig, PruneMode, Scale};
use crate::data::{self, CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{self, BuildOptions, Model, Weights};
use crate::optim::LrPlan;
use crate::prune::{self, iterative_sparsity, CompressionRatio, PruneMask};
use crate::rewind::{planned_iterations, CheckpointStore, RetrainPlan, Strategy};
use crate::train::{TrainConfig, Trainer};

/// SplitMix64 finalizer; mixes seed components into independent streams.
pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Data-order seed of a retraining run.
pub fn retrain_seed(experiment_seed: u64, trial: u32, strategy: Strategy, round: u32) -> u64 {
    derive_seed(&[experiment_seed, 1, u64::from(trial), strategy.code(), u64::from(round)])
}

/// Data-order seed of the dense baseline.
pub fn baseline_seed(experiment_seed: u64) -> u64 {
    derive_seed(&[experiment_seed, 0])
}

/// Model and data for one experiment.
pub struct Workspace {
    pub model: Model,
    pub train: Dataset,
    pub validation: Dataset,
    pub train_config: TrainConfig,
}

impl Workspace {
    pub fn trainer(&self) -> Result<Trainer<'_>> {
        Trainer::new(&self.model.spec, &self.train, &self.validation, self.train_config.clone())
    }
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, validation) = match config.dataset {
        DatasetName::Synthetic => data::synthetic(&config.data.synthetic)?,
        DatasetName::Cifar10 | DatasetName::Cifar100 => {
            let variant = if config.dataset == DatasetName::Cifar10 {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let root = data::data_root(config.data.root.as_deref());
            (
                data::load_cifar(&root, variant, Split::Train)?,
                data::load_cifar(&root, variant, Split::Validation)?,
            )
        }
    };
    Ok(match config.data.scale {
        Scale::Full => (train, validation),
        Scale::Desk => (
            train.first(config.data.train_size),
            validation.first(config.data.validation_size),
        ),
    })
}

pub fn prepare(config: &ExperimentConfig) -> Result<Workspace> {
    let (train, validation) = load_datasets(config)?;
    let options = BuildOptions {
        classes: config.dataset.classes(&config.data.synthetic),
        input_shape: train.shape(),
        seed: config.seed,
        bn_decay: config.optim.bn_decay,
        bn_epsilon: 1e-5,
    };
    let model = models::build(&config.model, &options)?;
    let train_config = TrainConfig {
        batch_size: config.optim.batch_size,
        l2: config.optim.l2,
        l2_scope: config.optim.l2_scope,
        momentum: config.optim.momentum,
        augment: config.data.augment,
        ..TrainConfig::default()
    };
    Ok(Workspace {
        model,
        train,
        validation,
        train_config,
    })
}

/// The dense run every pruning point starts from.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub weights: Weights,
    pub store: CheckpointStore,
    pub accuracy: f64,
    pub checksum: u64,
}

/// Trains the dense network for N iterations, snapshotting at 0, every
/// cadence multiple, each schedule boundary, K and N.
pub fn train_baseline(workspace: &Workspace, config: &ExperimentConfig) -> Result<Baseline> {
    let trainer = workspace.trainer()?;
    let schedule = config.schedule().clone();
    let n = schedule.total_iterations;
    let mut wanted = planned_iterations(config.snapshot_cadence, n, &schedule.boundaries);
    wanted.insert(config.rewind_k());
    wanted.insert(n);
    let run_id = format!("{}-{:016x}", config.model, derive_seed(&[config.seed, n]));
    let mut store = CheckpointStore::new(run_id, config.snapshot_cadence);
    let mut weights = workspace.model.weights.clone();
    let plan = LrPlan::Schedule {
        schedule,
        offset: 0,
    };
    trainer.train(
        &mut weights,
        None,
        &plan,
        n,
        baseline_seed(config.seed),
        &mut |it, w| {
            if it % 500 == 0 {
                log::debug!("baseline iteration {it}/{n}");
            }
            if wanted.contains(&it) {
                store.snapshot(it, w)?;
            }
            Ok(())
        },
    )?;
    let accuracy = trainer.evaluate(&weights)?;
    log::info!("baseline {}: accuracy {accuracy:.4} after {n} iterations", config.model);
    Ok(Baseline {
        checksum: weights.checksum(),
        weights,
        store,
        accuracy,
    })
}

/// Outcome of retraining one pruned network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub strategy: Strategy,
    pub trial: u32,
    /// 0 in one-shot mode, 1-based round in iterative mode.
    pub round: u32,
    pub target_sparsity: f64,
    pub compression: f64,
    pub sparsity: f64,
    pub nonzero: usize,
    pub kernel_count: usize,
    /// Validation accuracy right after pruning, before retraining.
    pub pruned_accuracy: f64,
    pub accuracy: f64,
    pub retrain_iterations: u64,
    pub rewind_iteration: u64,
    pub baseline_checksum: String,
    pub mask_checksum: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub compression: f64,
    pub sparsity: f64,
    pub median_acc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub strategy: Strategy,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: String,
    pub mode: PruneMode,
    pub total_iterations: u64,
    pub baseline_accuracy: f64,
    pub baseline_checksum: String,
    pub records: Vec<TrialRecord>,
    pub curves: Vec<Curve>,
}

impl ExperimentResult {
    pub fn failures(&self) -> Vec<&TrialRecord> {
        self.records.iter().filter(|r| r.error.is_some()).collect()
    }

    pub fn curve(&self, strategy: Strategy) -> Option<&Curve> {
        self.curves.iter().find(|c| c.strategy == strategy)
    }
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

/// FNV-1a over the encoded mask file.
fn mask_checksum(mask: &PruneMask) -> u64 {
    prune::encode_mask(mask)
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Run trials one after another on the calling thread.
    pub deterministic: bool,
}

fn map_tasks<T: Sync, R: Send>(tasks: &[T], opts: RunOptions, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if opts.deterministic {
        tasks.iter().map(f).collect()
    } else {
        tasks.par_iter().map(f).collect()
    }
}

/// Prunes with the configured criterion.
fn prune_to(
    spec: &models::ModelSpec,
    weights: &Weights,
    sparsity: f64,
    config: &ExperimentConfig,
    existing: Option<&PruneMask>,
) -> Result<PruneMask> {
    prune::prune(&spec.kernels(weights), sparsity, &config.prune, existing)
}

struct Retrain<'a> {
    trainer: &'a Trainer<'a>,
    baseline: &'a Baseline,
    config: &'a ExperimentConfig,
}

impl Retrain<'_> {
    /// Start weights for a strategy: the current pruned weights, or the
    /// original dense run's snapshot K for weight rewinding.
    fn start(&self, strategy: Strategy, current: &Weights) -> Result<Weights> {
        match strategy {
            Strategy::WeightRewind => self.baseline.store.restore(self.config.rewind_k()),
            Strategy::Finetune | Strategy::LrRewind => Ok(current.clone()),
        }
    }

    fn run(
        &self,
        strategy: Strategy,
        current: &Weights,
        mask: &PruneMask,
        seed: u64,
    ) -> Result<(Weights, RetrainPlan)> {
        let plan = RetrainPlan::new(
            strategy,
            self.config.schedule(),
            self.config.rewind_k(),
            self.config.finetune_lr,
        )?;
        let mut weights = self.start(strategy, current)?;
        prune::apply_mask(&mut weights.params, mask);
        let summary = self.trainer.train(
            &mut weights,
            Some(mask),
            &plan.lr,
            plan.retrain_iterations,
            seed,
            &mut |_, _| Ok(()),
        )?;
        debug_assert_eq!(summary.steps, plan.retrain_iterations);
        Ok((weights, plan))
    }

    fn record(
        &self,
        strategy: Strategy,
        trial: u32,
        round: u32,
        target: f64,
        outcome: Result<(PruneMask, f64, f64, RetrainPlan)>,
    ) -> TrialRecord {
        let kernel_count = self.trainer.spec().kernel_count();
        let mut r = TrialRecord {
            strategy,
            trial,
            round,
            target_sparsity: target,
            compression: CompressionRatio::from_sparsity(target).map_or(f64::NAN, |c| c.value()),
            sparsity: target,
            nonzero: 0,
            kernel_count,
            pruned_accuracy: f64::NAN,
            accuracy: f64::NAN,
            retrain_iterations: 0,
            rewind_iteration: 0,
            baseline_checksum: hex(self.baseline.checksum),
            mask_checksum: String::new(),
            error: None,
        };
        match outcome {
            Ok((mask, pruned_acc, acc, plan)) => {
                r.compression = mask.compression().map_or(f64::INFINITY, |c| c.value());
                r.sparsity = mask.sparsity();
                r.nonzero = mask.nonzero_count();
                r.pruned_accuracy = pruned_acc;
                r.accuracy = acc;
                r.retrain_iterations = plan.retrain_iterations;
                r.rewind_iteration = plan.rewind_iteration;
                r.mask_checksum = hex(mask_checksum(&mask));
            }
            Err(e) => {
                log::warn!("{strategy} trial {trial} at sparsity {target:.4}: {e}");
                r.error = Some(e.to_string());
            }
        }
        r
    }
}

fn pruned_accuracy(trainer: &Trainer<'_>, weights: &Weights, mask: &PruneMask) -> Result<f64> {
    let mut w = weights.clone();
    prune::apply_mask(&mut w.params, mask);
    trainer.evaluate(&w)
}

/// Prunes the same dense baseline to every target and retrains each
/// strategy and trial once.
pub fn run_one_shot_with(
    workspace: &Workspace,
    baseline: &Baseline,
    config: &ExperimentConfig,
    opts: RunOptions,
) -> Result<ExperimentResult> {
    let trainer = workspace.trainer()?;
    let ctx = Retrain {
        trainer: &trainer,
        baseline,
        config,
    };
    let mut targets = config.compressions.clone();
    targets.sort_by(f64::total_cmp);
    let mut tasks = Vec::new();
    for &c in &targets {
        for &strategy in &config.strategy {
            for trial in 0..config.trials {
                tasks.push((c, strategy, trial));
            }
        }
    }
    let records = map_tasks(&tasks, opts, |&(c, strategy, trial)| {
        let target = CompressionRatio::new(c).map(|c| c.sparsity()).unwrap_or(f64::NAN);
        let outcome = (|| {
            debug_assert_eq!(baseline.weights.checksum(), baseline.checksum);
            let mask = prune_to(&workspace.model.spec, &baseline.weights, target, config, None)?;
            mask.compression()?;
            let before = pruned_accuracy(&trainer, &baseline.weights, &mask)?;
            let seed = retrain_seed(config.seed, trial, strategy, 0);
            let (w, plan) = ctx.run(strategy, &baseline.weights, &mask, seed)?;
            let acc = trainer.evaluate(&w)?;
            log::info!("{strategy} c={c} trial {trial}: {before:.4} -> {acc:.4}");
            Ok((mask, before, acc, plan))
        })();
        ctx.record(strategy, trial, 0, target, outcome)
    });
    Ok(finish(config, baseline, records))
}

/// Per strategy and trial: round k prunes the previous round's retrained
/// weights to `1 - (1 - p)^k`, composing masks, then retrains.
pub fn run_iterative_with(
    workspace: &Workspace,
    baseline: &Baseline,
    config: &ExperimentConfig,
    opts: RunOptions,
) -> Result<ExperimentResult> {
    let trainer = workspace.trainer()?;
    let ctx = Retrain {
        trainer: &trainer,
        baseline,
        config,
    };
    let mut tasks = Vec::new();
    for &strategy in &config.strategy {
        for trial in 0..config.trials {
            tasks.push((strategy, trial));
        }
    }
    let per_task = map_tasks(&tasks, opts, |&(strategy, trial)| {
        let mut out = Vec::new();
        let mut current = baseline.weights.clone();
        let mut mask: Option<PruneMask> = None;
        for round in 1..=config.iterative.rounds {
            let target = iterative_sparsity(config.iterative.step, round).unwrap_or(f64::NAN);
            let outcome = (|| {
                let next = prune_to(&workspace.model.spec, &current, target, config, mask.as_ref())?;
                next.compression()?;
                let before = pruned_accuracy(&trainer, &current, &next)?;
                let seed = retrain_seed(config.seed, trial, strategy, round);
                let (w, plan) = ctx.run(strategy, &current, &next, seed)?;
                let acc = trainer.evaluate(&w)?;
                log::info!("{strategy} round {round} trial {trial}: {before:.4} -> {acc:.4}");
                Ok((next, w, before, acc, plan))
            })();
            match outcome {
                Ok((next, w, before, acc, plan)) => {
                    current = w;
                    out.push(ctx.record(strategy, trial, round, target, Ok((next.clone(), before, acc, plan))));
                    mask = Some(next);
                }
                Err(e) => {
                    out.push(ctx.record(strategy, trial, round, target, Err(e)));
                    break;
                }
            }
        }
        out
    });
    Ok(finish(config, baseline, per_task.into_iter().flatten().collect()))
}

fn finish(config: &ExperimentConfig, baseline: &Baseline, mut records: Vec<TrialRecord>) -> ExperimentResult {
    records.sort_by(|a, b| {
        a.compression
            .total_cmp(&b.compression)
            .then(a.strategy.cmp(&b.strategy))
            .then(a.round.cmp(&b.round))
            .then(a.trial.cmp(&b.trial))
    });
    let curves = config
        .strategy
        .iter()
        .map(|&s| Curve {
            strategy: s,
            points: aggregate(records.iter().filter(|r| r.strategy == s)),
        })
        .collect();
    ExperimentResult {
        model: config.model.clone(),
        mode: config.mode,
        total_iterations: config.total_iterations(),
        baseline_accuracy: baseline.accuracy,
        baseline_checksum: hex(baseline.checksum),
        records,
        curves,
    }
}

/// Trains the baseline and runs the configured mode.
pub fn run(config: &ExperimentConfig, opts: RunOptions) -> Result<(Baseline, ExperimentResult)> {
    let workspace = prepare(config)?;
    let baseline = train_baseline(&workspace, config)?;
    let result = match config.mode {
        PruneMode::OneShot => run_one_shot_with(&workspace, &baseline, config, opts)?,
        PruneMode::Iterative => run_iterative_with(&workspace, &baseline, config, opts)?,
    };
    Ok((baseline, result))
}

pub fn run_one_shot(config: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentResult> {
    let workspace = prepare(config)?;
    let baseline = train_baseline(&workspace, config)?;
    run_one_shot_with(&workspace, &baseline, config, opts)
}

pub fn run_iterative(config: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentResult> {
    let workspace = prepare(config)?;
    let baseline = train_baseline(&workspace, config)?;
    run_iterative_with(&workspace, &baseline, config, opts)
}

/// Order-statistic median.
pub fn median(values: &[f64]) -> f64 {
    percentile(values, 0.5)
}

/// Linear interpolation between closest ranks: position `q * (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        1 => v[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        }
    }
}

/// Rounds to the six decimals used in curve files, so a written curve
/// parses back to an identical value.
fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().unwrap_or(x)
}

/// One point per distinct `(round, target)`, median and 10th/90th
/// percentiles of successful trials, sorted by compression.
pub fn aggregate<'r>(records: impl IntoIterator<Item = &'r TrialRecord>) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(u32, u64), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records.into_iter().filter(|r| r.error.is_none()) {
        groups
            .entry((r.round, r.target_sparsity.to_bits()))
            .or_default()
            .push(r);
    }
    let mut points: Vec<CurvePoint> = groups
        .values()
        .map(|rs| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let comp: Vec<f64> = rs.iter().map(|r| r.compression).collect();
            let sp: Vec<f64> = rs.iter().map(|r| r.sparsity).collect();
            CurvePoint {
                compression: round6(median(&comp)),
                sparsity: round6(median(&sp)),
                median_acc: round6(median(&acc)),
                ci_low: round6(percentile(&acc, 0.1)),
                ci_high: round6(percentile(&acc, 0.9)),
                trials: rs.len(),
            }
        })
        .collect();
    points.sort_by(|a, b| a.compression.total_cmp(&b.compression));
    points
}

pub const CURVE_HEADER: &str = "compression,sparsity,median_acc,ci_low,ci_high,trials";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(
            s,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            p.compression, p.sparsity, p.median_acc, p.ci_low, p.ci_high, p.trials
        );
    }
    s
}

pub fn emit_curve(points: &[CurvePoint], path: &Path) -> Result<()> {
    binio::atomic_write(path, curve_csv(points).as_bytes())
}

pub fn parse_curve(text: &str, path: &Path) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    let bad = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: line as u64,
        message,
    };
    if lines.next() != Some(CURVE_HEADER) {
        return Err(bad(0, format!("expected header `{CURVE_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 1, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse().map_err(|_| bad(i + 1, format!("bad number `{}`", f[j])))
            };
            Ok(CurvePoint {
                compression: num(0)?,
                sparsity: num(1)?,
                median_acc: num(2)?,
                ci_low: num(3)?,
                ci_high: num(4)?,
                trials: f[5]
                    .parse()
                    .map_err(|_| bad(i + 1, format!("bad trial count `{}`", f[5])))?,
            })
        })
        .collect()
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curve(&text, path)
}

/// Writes `curve-<strategy>.csv`, `curve-<strategy>.json` and
/// `result.json` into `dir`; returns the CSV paths.
pub fn write_result(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for c in &result.curves {
        let csv = dir.join(format!("curve-{}.csv", c.strategy));
        emit_curve(&c.points, &csv)?;
        let json = dir.join(format!("curve-{}.json", c.strategy));
        binio::atomic_write(&json, serde_json::to_string_pretty(&c.points)?.as_bytes())?;
        paths.push(csv);
    }
    binio::atomic_write(
        &dir.join("result.json"),
        serde_json::to_string_pretty(result)?.as_bytes(),
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(acc: f64, trial: u32) -> TrialRecord {
        TrialRecord {
            strategy: Strategy::Finetune,
            trial,
            round: 0,
            target_sparsity: 0.5,
            compression: 2.0,
            sparsity: 0.5,
            nonzero: 5,
            kernel_count: 10,
            pruned_accuracy: 0.0,
            accuracy: acc,
            retrain_iterations: 1,
            rewind_iteration: 0,
            baseline_checksum: String::new(),
            mask_checksum: String::new(),
            error: None,
        }
    }

    #[test]
    fn median_and_interval() {
        assert_eq!(median(&[0.91, 0.93, 0.92]), 0.92);
        let pts = aggregate(&[rec(0.90, 0), rec(0.94, 1)]);
        assert_eq!(pts.len(), 1);
        assert!((pts[0].median_acc - 0.92).abs() < 1e-12);
        assert!((pts[0].ci_low - 0.904).abs() < 1e-12);
        assert!((pts[0].ci_high - 0.936).abs() < 1e-12);
        let same = aggregate(&[rec(0.5, 0), rec(0.5, 1), rec(0.5, 2)]);
        assert_eq!((same[0].ci_low, same[0].ci_high), (0.5, 0.5));
        let single = aggregate(&[rec(0.7, 0)]);
        assert_eq!((single[0].ci_low, single[0].median_acc, single[0].ci_high), (0.7, 0.7, 0.7));
    }

    #[test]
    fn failed_trials_are_not_aggregated() {
        let mut bad = rec(0.1, 1);
        bad.error = Some("boom".into());
        let pts = aggregate(&[rec(0.8, 0), bad]);
        assert_eq!(pts[0].trials, 1);
    }

    #[test]
    fn empty_curve_is_header_only() {
        assert_eq!(curve_csv(&[]), format!("{CURVE_HEADER}\n"));
    }

    #[test]
    fn curve_round_trip() {
        let pts = aggregate(&[rec(0.901234567, 0), rec(0.9387, 1), rec(0.95, 2)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        emit_curve(&pts, &path).unwrap();
        assert_eq!(read_curve(&path).unwrap(), pts);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("2.000000,0.500000,0.938700"));
    }

    #[test]
    fn seeds_are_distinct_per_component() {
        let a = retrain_seed(0, 0, Strategy::Finetune, 0);
        assert_ne!(a, retrain_seed(0, 1, Strategy::Finetune, 0));
        assert_ne!(a, retrain_seed(0, 0, Strategy::LrRewind, 0));
        assert_ne!(a, retrain_seed(0, 0, Strategy::Finetune, 1));
        assert_eq!(a, retrain_seed(0, 0, Strategy::Finetune, 0));
    }
}
