//! Strict JSON experiment configuration with presets and dotted overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::models::{self, ZOO};
use crate::optim::{L2Scope, LrSchedule, MOMENTUM};
use crate::prune::{CompressionRatio, PruneOptions};
use crate::rewind::{Strategy, DEFAULT_CADENCE};

/// Bundled presets, `name -> JSON`.
pub const PRESETS: &[(&str, &str)] = &[
    ("resnet20-cifar10", include_str!("../presets/resnet20-cifar10.json")),
    ("resnet56-cifar10", include_str!("../presets/resnet56-cifar10.json")),
    ("resnet110-cifar10", include_str!("../presets/resnet110-cifar10.json")),
    ("resnet56-cifar100", include_str!("../presets/resnet56-cifar100.json")),
    ("wrn16-8-cifar10", include_str!("../presets/wrn16-8-cifar10.json")),
    ("desk-cnn-synthetic", include_str!("../presets/desk-cnn-synthetic.json")),
    ("desk-mlp-synthetic", include_str!("../presets/desk-mlp-synthetic.json")),
    ("desk-cnn-iterative", include_str!("../presets/desk-cnn-iterative.json")),
];

/// JSON Schema of the config file.
pub const SCHEMA: &str = include_str!("../schema/experiment-config.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub fn classes(self, synthetic: &SyntheticSpec) -> usize {
        match self {
            DatasetName::Synthetic => synthetic.classes,
            DatasetName::Cifar10 => 10,
            DatasetName::Cifar100 => 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    /// First `train_size` / `validation_size` examples by index.
    #[default]
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scale: Scale,
    pub train_size: usize,
    pub validation_size: usize,
    /// Dataset root; falls back to `REWINDLAB_DATA_DIR`.
    pub root: Option<PathBuf>,
    pub augment: bool,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Desk,
            train_size: 8000,
            validation_size: 2000,
            root: None,
            augment: true,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    OneShot,
    Iterative,
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMode::OneShot => "one_shot",
            PruneMode::Iterative => "iterative",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeConfig {
    /// Fraction of surviving weights removed per round.
    pub step: f64,
    pub rounds: u32,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self { step: 0.3, rounds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// `null` picks the model's recipe: the ResNet schedule for ResNets and
    /// desk models (rescaled to 2000 iterations for the latter), the WRN
    /// schedule for WRN-16-8.
    pub schedule: Option<LrSchedule>,
    pub l2: f64,
    pub l2_scope: L2Scope,
    pub momentum: f64,
    pub batch_size: usize,
    /// `null` keeps the model's default batch-norm decay.
    pub bn_decay: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            schedule: None,
            l2: 1e-4,
            l2_scope: L2Scope::AllTrainable,
            momentum: MOMENTUM,
            batch_size: 128,
            bn_decay: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write every stored baseline snapshot to `<dir>/checkpoints`.
    pub save_checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            save_checkpoints: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset this config was layered on, kept for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub model: String,
    pub dataset: DatasetName,
    #[serde(deserialize_with = "one_or_many")]
    pub strategy: Vec<Strategy>,
    #[serde(default)]
    pub mode: PruneMode,
    /// One-shot compression targets.
    #[serde(default = "default_compressions")]
    pub compressions: Vec<f64>,
    #[serde(default)]
    pub iterative: IterativeConfig,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed: u64,
    /// Rewind point K; `null` resolves to N/4.
    #[serde(default)]
    pub rewind_iteration: Option<u64>,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default = "default_cadence")]
    pub snapshot_cadence: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub prune: PruneOptions,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_compressions() -> Vec<f64> {
    vec![2.0, 5.0]
}

fn default_trials() -> u32 {
    2
}

fn default_finetune_lr() -> f64 {
    0.001
}

fn default_cadence() -> u64 {
    DEFAULT_CADENCE
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Strategy>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Strategy),
        Many(Vec<Strategy>),
    }
    match OneOrMany::deserialize(d) {
        Ok(OneOrMany::One(s)) => Ok(vec![s]),
        Ok(OneOrMany::Many(v)) => Ok(v),
        Err(_) => Err(serde::de::Error::custom(
            "expected finetune, weight_rewind, lr_rewind or a list of them",
        )),
    }
}

/// Desk models train on the ResNet schedule shape compressed to this many
/// iterations unless a schedule is given.
pub const DESK_ITERATIONS: u64 = 2000;

impl ExperimentConfig {
    pub fn schedule(&self) -> &LrSchedule {
        self.optim
            .schedule
            .as_ref()
            .expect("schedule resolved by parse_config")
    }

    pub fn total_iterations(&self) -> u64 {
        self.schedule().total_iterations
    }

    pub fn rewind_k(&self) -> u64 {
        self.rewind_iteration
            .unwrap_or(self.total_iterations() / 4)
    }

    /// Fills model-dependent defaults and checks ranges, naming the key.
    pub fn resolve(mut self) -> Result<Self> {
        if !ZOO.contains(&self.model.as_str()) {
            return Err(Error::config(
                "model",
                format!("unknown model `{}`; the zoo contains: {}", self.model, ZOO.join(", ")),
            ));
        }
        if self.optim.schedule.is_none() {
            self.optim.schedule = Some(match self.model.as_str() {
                "wrn16-8" => LrSchedule::wide_resnet(),
                "resnet20" | "resnet56" | "resnet110" => LrSchedule::resnet(),
                _ => LrSchedule::resnet().rescaled(DESK_ITERATIONS)?,
            });
        }
        self.schedule().validate()?;
        let n = self.total_iterations();
        let k = self.rewind_iteration.unwrap_or(n / 4);
        if k > n {
            return Err(Error::config(
                "rewind_iteration",
                format!("K = {k} exceeds the {n} training iterations"),
            ));
        }
        self.rewind_iteration = Some(k);
        if self.strategy.is_empty() {
            return Err(Error::config("strategy", "at least one strategy is required"));
        }
        if !(1..=12).contains(&self.trials) {
            return Err(Error::config("trials", format!("must lie in 1..=12, got {}", self.trials)));
        }
        for (i, &c) in self.compressions.iter().enumerate() {
            CompressionRatio::new(c)
                .map_err(|e| Error::config(format!("compressions[{i}]"), e.to_string()))?;
        }
        if self.mode == PruneMode::OneShot && self.compressions.is_empty() {
            return Err(Error::config("compressions", "one-shot mode needs at least one target"));
        }
        if !(self.iterative.step > 0.0 && self.iterative.step < 1.0) {
            return Err(Error::config(
                "iterative.step",
                format!("must lie in (0, 1), got {}", self.iterative.step),
            ));
        }
        if self.mode == PruneMode::Iterative && self.iterative.rounds == 0 {
            return Err(Error::config("iterative.rounds", "must be at least 1"));
        }
        if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::config("finetune_lr", "must be a non-negative number"));
        }
        if self.snapshot_cadence == 0 {
            return Err(Error::config("snapshot_cadence", "must be positive"));
        }
        if !(self.optim.l2 >= 0.0 && self.optim.l2.is_finite()) {
            return Err(Error::config("optim.l2", "must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if let Some(d) = self.optim.bn_decay {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config("optim.bn_decay", "must lie in (0, 1)"));
            }
        }
        let classes = self.dataset.classes(&self.data.synthetic);
        let full_scale_model = !matches!(self.model.as_str(), "mlp-small" | "cnn-small");
        if full_scale_model && !matches!(classes, 10 | 100) {
            return Err(Error::config(
                "data.synthetic.classes",
                format!("{} needs 10 or 100 classes", self.model),
            ));
        }
        if self.data.scale == Scale::Desk && (self.data.train_size == 0 || self.data.validation_size == 0) {
            return Err(Error::config("data.train_size", "desk subsets must be non-empty"));
        }
        models::default_bn_decay(&self.model)?;
        Ok(self)
    }
}

/// Recursively overlays `top` onto `base`; objects merge, everything else
/// replaces.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::config(assignment, "override must look like key=value")
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "empty path segment in override"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = match node {
            Value::Object(m) => m,
            other => {
                *other = Value::Object(Map::new());
                other.as_object_mut().expect("just replaced")
            }
        };
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

pub fn preset(name: &str) -> Result<Value> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        Error::config("preset", format!("unknown preset `{name}`; available: {}", names.join(", ")))
    })?;
    Ok(serde_json::from_str(text)?)
}

/// Merges a preset (if named), then the overrides, then validates.
pub fn parse_config_value(mut value: Value, overrides: &[String]) -> Result<ExperimentConfig> {
    if !value.is_object() {
        return Err(Error::config("<root>", "config must be a JSON object"));
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(name) = value.get("preset").cloned() {
        let name = name
            .as_str()
            .ok_or_else(|| Error::config("preset", "must be a string"))?
            .to_string();
        let mut base = preset(&name)?;
        deep_merge(&mut base, value);
        value = base;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { "<root>".to_string() } else { key }, e.inner().to_string())
    })?;
    config.resolve()
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::config("<root>", format!("invalid JSON: {e}")))?;
    parse_config_value(value, overrides)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, overrides)
}

/// Pretty JSON of the effective config; parses back to an equal config.
pub fn echo(config: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(config)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(
            r#"{"model": "mlp-small", "dataset": "synthetic", "strategy": "finetune"}"#,
            &[],
        )
        .unwrap();
        assert_eq!(c.trials, 2);
        assert_eq!(c.iterative.step, 0.3);
        assert_eq!(c.strategy, vec![Strategy::Finetune]);
        assert_eq!(c.rewind_iteration, Some(c.total_iterations() / 4));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str(
            r#"{"model": "mlp-small", "dataset": "synthetic", "strategy": "finetune", "foo": 1}"#,
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = parse_config_str(
            r#"{"model": "mlp-small", "dataset": "synthetic", "strategy": "finetune",
                "optim": {"l2": "big"}}"#,
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("optim.l2"), "{err}");
    }

    #[test]
    fn override_on_wide_preset() {
        let c = parse_config_str(r#"{"preset": "wrn16-8-cifar10"}"#, &["optim.l2=2e-4".into()]).unwrap();
        assert_eq!(c.optim.l2, 2e-4);
        assert_eq!(c.optim.bn_decay, Some(0.9));
        assert_eq!(c.schedule(), &LrSchedule::wide_resnet());
    }

    #[test]
    fn echo_round_trips() {
        for (name, _) in PRESETS {
            let c = parse_config_str(&format!(r#"{{"preset": "{name}"}}"#), &[]).unwrap();
            let again = parse_config_str(&echo(&c).unwrap(), &[]).unwrap();
            assert_eq!(c, again, "{name}");
        }
    }

    #[test]
    fn range_errors_name_the_key() {
        let base = r#"{"model": "cnn-small", "dataset": "synthetic", "strategy": ["finetune"]}"#;
        for (o, key) in [
            ("trials=13", "trials"),
            ("rewind_iteration=999999", "rewind_iteration"),
            ("compressions=[0.5]", "compressions[0]"),
            ("iterative.step=1.5", "iterative.step"),
        ] {
            let err = parse_config_str(base, &[o.to_string()]).unwrap_err();
            assert!(err.to_string().contains(key), "{o}: {err}");
        }
    }
}
