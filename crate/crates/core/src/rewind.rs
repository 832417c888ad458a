//! Checkpoint history and the three retraining strategies.
//!
//! Snapshots hold trainable weights and batch-norm moving statistics, so a
//! rewind restores both. Optimizer velocity is never stored; every retrain
//! starts from zero velocity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::engine::{NamedTensor, Tensor};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Weights};
use crate::optim::{LrPlan, LrSchedule};
use crate::prune::{apply_mask, PruneMask};
use crate::train::{TrainSummary, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RWLC";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const DEFAULT_CADENCE: u64 = 1000;

#[derive(Clone, Debug)]
pub struct CheckpointStore {
    run_id: String,
    cadence: u64,
    snapshots: BTreeMap<u64, Weights>,
}

impl CheckpointStore {
    pub fn new(run_id: impl Into<String>, cadence: u64) -> Self {
        Self {
            run_id: run_id.into(),
            cadence: cadence.max(1),
            snapshots: BTreeMap::new(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn cadence(&self) -> u64 {
        self.cadence
    }

    pub fn snapshot(&mut self, iteration: u64, weights: &Weights) -> Result<()> {
        if self.snapshots.contains_key(&iteration) {
            return Err(Error::DuplicateSnapshot(iteration));
        }
        self.snapshots.insert(iteration, weights.clone());
        Ok(())
    }

    pub fn get(&self, iteration: u64) -> Result<&Weights> {
        self.snapshots
            .get(&iteration)
            .ok_or_else(|| Error::MissingSnapshot {
                iteration,
                available: self.iterations(),
            })
    }

    /// A copy of the snapshot at `iteration`.
    pub fn restore(&self, iteration: u64) -> Result<Weights> {
        self.get(iteration).cloned()
    }

    pub fn contains(&self, iteration: u64) -> bool {
        self.snapshots.contains_key(&iteration)
    }

    pub fn iterations(&self) -> Vec<u64> {
        self.snapshots.keys().copied().collect()
    }

    /// One `RWLC` file per snapshot, named `ckpt-<iteration>.rwlc`.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.snapshots
            .iter()
            .map(|(&it, w)| {
                let path = dir.join(checkpoint_file_name(it));
                write_checkpoint(&path, &self.run_id, it, w)?;
                Ok(path)
            })
            .collect()
    }

    /// Loads every `*.rwlc` in `dir`; all files must share one run id.
    pub fn load_dir(dir: &Path, spec: &ModelSpec, cadence: u64) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "rwlc"))
            .collect();
        paths.sort();
        let mut store: Option<CheckpointStore> = None;
        for path in paths {
            let ck = read_checkpoint(&path)?;
            let s = store.get_or_insert_with(|| CheckpointStore::new(ck.run_id.clone(), cadence));
            if s.run_id != ck.run_id {
                return Err(Error::InvalidArgument(format!(
                    "{} belongs to run `{}`, not `{}`",
                    path.display(),
                    ck.run_id,
                    s.run_id
                )));
            }
            let weights = ck.into_weights(spec)?;
            s.snapshot(ck.iteration, &weights)?;
        }
        store.ok_or_else(|| {
            Error::InvalidArgument(format!("no checkpoints found in {}", dir.display()))
        })
    }
}

pub fn checkpoint_file_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}.rwlc")
}

/// `{0} ∪ {multiples of cadence below N} ∪ boundaries`.
pub fn planned_iterations(cadence: u64, total: u64, boundaries: &[u64]) -> BTreeSet<u64> {
    let cadence = cadence.max(1);
    let mut out: BTreeSet<u64> = (0..total).step_by(cadence as usize).collect();
    out.insert(0);
    out.extend(boundaries.iter().copied().filter(|&b| b < total));
    out
}

/// Contents of one checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run_id: String,
    pub iteration: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Splits the records into parameters and buffers following `spec`.
    pub fn into_weights(&self, spec: &ModelSpec) -> Result<Weights> {
        let np = spec.params.len();
        if self.tensors.len() < np {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, model {} needs {}",
                self.tensors.len(),
                spec.name,
                np + spec.buffers.len()
            )));
        }
        let mut params = self.tensors[..np].to_vec();
        for p in &mut params {
            p.tensor.set_requires_grad(true);
        }
        let weights = Weights {
            params,
            buffers: self.tensors[np..].to_vec(),
        };
        spec.check_weights(&weights)?;
        Ok(weights)
    }
}

/// `RWLC`, version byte, run id (u32 length + UTF-8), iteration (u64), then
/// records to end of file: name length (u32), name, rank (u32), dims (u32
/// each), raw f32 values. All little-endian.
pub fn encode_checkpoint(run_id: &str, iteration: u64, weights: &Weights) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    binio::put_str(&mut buf, run_id);
    buf.extend_from_slice(&iteration.to_le_bytes());
    for t in weights.iter() {
        binio::put_str(&mut buf, &t.name);
        binio::put_dims(&mut buf, t.tensor.shape());
        for v in t.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes, path);
    if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "missing RWLC magic".into(),
        });
    }
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let run_id = r.string("run id")?;
    let iteration = r.u64("iteration")?;
    let mut tensors = Vec::new();
    while !r.at_end() {
        let name = r.string("tensor name")?;
        let shape = r.dims()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| r.error(e.to_string()))?;
        tensors.push(NamedTensor::new(name, tensor));
    }
    Ok(Checkpoint {
        run_id,
        iteration,
        tensors,
    })
}

pub fn write_checkpoint(path: &Path, run_id: &str, iteration: u64, weights: &Weights) -> Result<()> {
    binio::atomic_write(path, &encode_checkpoint(run_id, iteration, weights))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&binio::read_file(path)?, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    WeightRewind,
    LrRewind,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Finetune, Strategy::WeightRewind, Strategy::LrRewind];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::WeightRewind => "weight_rewind",
            Strategy::LrRewind => "lr_rewind",
        }
    }

    /// Stable small integer used when deriving seeds.
    pub fn code(self) -> u64 {
        match self {
            Strategy::Finetune => 1,
            Strategy::WeightRewind => 2,
            Strategy::LrRewind => 3,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown strategy `{s}`, expected finetune, weight_rewind or lr_rewind"
                ))
            })
    }
}

/// Step count and learning rates of one retraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrainPlan {
    pub strategy: Strategy,
    pub rewind_iteration: u64,
    pub retrain_iterations: u64,
    pub lr: LrPlan,
}

impl RetrainPlan {
    /// Fine-tuning: N steps at `finetune_lr`. Weight rewinding: N - K steps
    /// on the schedule tail from K. LR rewinding: N steps from iteration 0.
    pub fn new(strategy: Strategy, schedule: &LrSchedule, k: u64, finetune_lr: f64) -> Result<Self> {
        let n = schedule.total_iterations;
        Ok(match strategy {
            Strategy::Finetune => {
                if !(finetune_lr >= 0.0 && finetune_lr.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "fine-tuning learning rate must be non-negative, got {finetune_lr}"
                    )));
                }
                Self {
                    strategy,
                    rewind_iteration: n,
                    retrain_iterations: n,
                    lr: LrPlan::Constant(finetune_lr),
                }
            }
            Strategy::WeightRewind => {
                if k > n {
                    return Err(Error::IterationOutOfRange {
                        iteration: k,
                        total: n,
                    });
                }
                Self {
                    strategy,
                    rewind_iteration: k,
                    retrain_iterations: n - k,
                    lr: LrPlan::Schedule {
                        schedule: schedule.clone(),
                        offset: k,
                    },
                }
            }
            Strategy::LrRewind => Self {
                strategy,
                rewind_iteration: n,
                retrain_iterations: n,
                lr: LrPlan::Schedule {
                    schedule: schedule.clone(),
                    offset: 0,
                },
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct Retrained {
    pub weights: Weights,
    pub summary: TrainSummary,
}

fn run(
    trainer: &Trainer<'_>,
    mut weights: Weights,
    mask: &PruneMask,
    plan: &RetrainPlan,
    seed: u64,
) -> Result<Retrained> {
    apply_mask(&mut weights.params, mask);
    let summary = trainer.train(
        &mut weights,
        Some(mask),
        &plan.lr,
        plan.retrain_iterations,
        seed,
        &mut |_, _| Ok(()),
    )?;
    Ok(Retrained { weights, summary })
}

/// Retrains the pruned final weights for N steps at a constant rate.
pub fn finetune(
    trainer: &Trainer<'_>,
    weights: Weights,
    mask: &PruneMask,
    schedule: &LrSchedule,
    finetune_lr: f64,
    seed: u64,
) -> Result<Retrained> {
    let plan = RetrainPlan::new(Strategy::Finetune, schedule, 0, finetune_lr)?;
    run(trainer, weights, mask, &plan, seed)
}

/// Restores snapshot K, masks it, and trains on the schedule tail.
pub fn weight_rewind(
    trainer: &Trainer<'_>,
    store: &CheckpointStore,
    k: u64,
    mask: &PruneMask,
    schedule: &LrSchedule,
    seed: u64,
) -> Result<Retrained> {
    let plan = RetrainPlan::new(Strategy::WeightRewind, schedule, k, 0.0)?;
    let start = store.restore(k)?;
    run(trainer, start, mask, &plan, seed)
}

/// Keeps the converged pruned weights and replays the whole schedule.
pub fn lr_rewind(
    trainer: &Trainer<'_>,
    weights: Weights,
    mask: &PruneMask,
    schedule: &LrSchedule,
    seed: u64,
) -> Result<Retrained> {
    let plan = RetrainPlan::new(Strategy::LrRewind, schedule, 0, 0.0)?;
    run(trainer, weights, mask, &plan, seed)
}

/// Weight rewinding to K = N followed by a full schedule-reset retrain of N
/// steps. Matches [`lr_rewind`] bit for bit given the same seed.
pub fn rewind_to_end_then_reset(
    trainer: &Trainer<'_>,
    store: &CheckpointStore,
    mask: &PruneMask,
    schedule: &LrSchedule,
    seed: u64,
) -> Result<Retrained> {
    let n = schedule.total_iterations;
    let rewound = weight_rewind(trainer, store, n, mask, schedule, seed)?;
    debug_assert_eq!(rewound.summary.steps, 0);
    let reset = RetrainPlan {
        strategy: Strategy::LrRewind,
        rewind_iteration: n,
        retrain_iterations: n,
        lr: LrPlan::Schedule {
            schedule: schedule.clone(),
            offset: 0,
        },
    };
    run(trainer, rewound.weights, mask, &reset, seed)
}
