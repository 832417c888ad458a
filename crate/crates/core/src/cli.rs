//! Command-line front end. Every verb prints the effective configuration to
//! stdout and writes it to `<out>/effective-config.json` before running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::binio::atomic_write;
use crate::config::{self, ExperimentConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, RunOptions};
use crate::prune::{self, CompressionRatio};
use crate::rewind::{self, CheckpointStore, Strategy};
use crate::verify;

pub const EXIT_POINT_FAILURES: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "rewindlab", version, about = "Prune, rewind and retrain image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the dense network and store its snapshots.
    TrainBaseline(Common),
    /// Prune the final baseline weights to a compression ratio.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Target compression ratio, e.g. 5 for 80% sparsity.
        #[arg(long)]
        compression: f64,
    },
    /// Retrain a pruned baseline with one strategy.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Mask file written by `prune`.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        trial: u32,
    },
    /// Full experiment: baseline, pruning, retraining and curves.
    Experiment(Common),
    /// Built-in self-checks.
    Verify {
        /// Fewer random cases.
        #[arg(long)]
        quick: bool,
    },
    /// List the bundled presets.
    Presets,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Bundled preset to use instead of a config file.
    #[arg(long)]
    pub preset: Option<String>,
    /// Dotted-key override, e.g. `--set optim.batch_size=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Experiment seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run trials sequentially on one thread.
    #[arg(long)]
    pub deterministic: bool,
}

impl Common {
    /// Loads, overrides and validates the config, then echoes it.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            let out = serde_json::to_string(&out.to_string_lossy())?;
            overrides.push(format!("output.dir={out}"));
        }
        let config = match (&self.config, &self.preset) {
            (Some(path), _) => config::parse_config(path, &overrides)?,
            (None, Some(name)) => config::parse_config_value(json!({ "preset": name }), &overrides)?,
            (None, None) => {
                return Err(Error::InvalidArgument("one of --config or --preset is required".into()))
            }
        };
        let text = config::echo(&config)?;
        println!("{text}");
        let dir = &config.output.dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        atomic_write(&dir.join("effective-config.json"), text.as_bytes())?;
        Ok(config)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            deterministic: self.deterministic,
        }
    }
}

pub fn checkpoint_dir(config: &ExperimentConfig) -> PathBuf {
    config.output.dir.join("checkpoints")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Loads the stored baseline for `prune` and `retrain`.
fn load_store(config: &ExperimentConfig, workspace: &experiment::Workspace) -> Result<CheckpointStore> {
    CheckpointStore::load_dir(&checkpoint_dir(config), &workspace.model.spec, config.snapshot_cadence)
}

fn train_baseline(common: &Common) -> Result<ExitCode> {
    let config = common.load()?;
    let workspace = experiment::prepare(&config)?;
    let baseline = experiment::train_baseline(&workspace, &config)?;
    let files = baseline.store.save_dir(&checkpoint_dir(&config))?;
    let summary = json!({
        "model": config.model,
        "iterations": config.total_iterations(),
        "accuracy": baseline.accuracy,
        "checksum": format!("{:016x}", baseline.checksum),
        "checkpoints": files.len(),
    });
    write_json(&config.output.dir.join("baseline.json"), &summary)?;
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn prune_cmd(common: &Common, compression: f64) -> Result<ExitCode> {
    let config = common.load()?;
    let workspace = experiment::prepare(&config)?;
    let store = load_store(&config, &workspace)?;
    let weights = store.restore(config.total_iterations())?;
    let target = CompressionRatio::new(compression)?.sparsity();
    let mask = prune::prune(&workspace.model.spec.kernels(&weights), target, &config.prune, None)?;
    let path = config.output.dir.join(format!("mask-{compression}.rwlm"));
    prune::write_mask(&path, &mask)?;
    let summary = json!({
        "mask": path,
        "target_sparsity": target,
        "sparsity": mask.sparsity(),
        "compression": mask.compression()?.value(),
        "nonzero": mask.nonzero_count(),
        "kernel_count": mask.kernel_count(),
    });
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn retrain_cmd(common: &Common, mask: &Path, strategy: Strategy, trial: u32) -> Result<ExitCode> {
    let config = common.load()?;
    let workspace = experiment::prepare(&config)?;
    let store = load_store(&config, &workspace)?;
    let mask = prune::read_mask(mask)?;
    let trainer = workspace.trainer()?;
    let schedule = config.schedule();
    let n = config.total_iterations();
    let seed = experiment::retrain_seed(config.seed, trial, strategy, 0);
    let out = match strategy {
        Strategy::Finetune => {
            rewind::finetune(&trainer, store.restore(n)?, &mask, schedule, config.finetune_lr, seed)?
        }
        Strategy::WeightRewind => {
            rewind::weight_rewind(&trainer, &store, config.rewind_k(), &mask, schedule, seed)?
        }
        Strategy::LrRewind => rewind::lr_rewind(&trainer, store.restore(n)?, &mask, schedule, seed)?,
    };
    let accuracy = trainer.evaluate(&out.weights)?;
    let path = config.output.dir.join(format!("retrained-{strategy}-{trial}.rwlc"));
    rewind::write_checkpoint(&path, store.run_id(), n, &out.weights)?;
    let summary = json!({
        "strategy": strategy,
        "trial": trial,
        "steps": out.summary.steps,
        "sparsity": mask.sparsity(),
        "accuracy": accuracy,
        "checkpoint": path,
    });
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn experiment_cmd(common: &Common) -> Result<ExitCode> {
    let config = common.load()?;
    let (baseline, result) = experiment::run(&config, common.options())?;
    if config.output.save_checkpoints {
        baseline.store.save_dir(&checkpoint_dir(&config))?;
    }
    for path in experiment::write_result(&result, &config.output.dir)? {
        println!("wrote {}", path.display());
    }
    println!("baseline accuracy {:.4}", result.baseline_accuracy);
    for curve in &result.curves {
        for p in &curve.points {
            println!(
                "{} c={:.2} median={:.4} [{:.4}, {:.4}] n={}",
                curve.strategy, p.compression, p.median_acc, p.ci_low, p.ci_high, p.trials
            );
        }
    }
    let failures = result.failures();
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &failures {
            eprintln!(
                "failed: {} trial {} sparsity {:.4}: {}",
                f.strategy,
                f.trial,
                f.target_sparsity,
                f.error.as_deref().unwrap_or("")
            );
        }
        Ok(ExitCode::from(EXIT_POINT_FAILURES))
    }
}

fn verify_cmd(quick: bool) -> Result<ExitCode> {
    let checks = verify::run_all(quick)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::TrainBaseline(common) => train_baseline(common),
        Command::Prune { common, compression } => prune_cmd(common, *compression),
        Command::Retrain {
            common,
            mask,
            strategy,
            trial,
        } => retrain_cmd(common, mask, *strategy, *trial),
        Command::Experiment(common) => experiment_cmd(common),
        Command::Verify { quick } => verify_cmd(*quick),
        Command::Presets => {
            for (name, _) in config::PRESETS {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
