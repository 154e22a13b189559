//! Run configuration: one TOML tree with a section per subcommand.
//!
//! Resolution order is defaults, then the `--config` file, then positional
//! `key=value` overrides, then the `--seed`/`--workers` flags. The result is
//! validated as a whole before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokenflip_core::batching::TrainConfig;
use tokenflip_core::coupling::MaskingConfig;
use tokenflip_core::grpo::{Polarity, PROBE_LR};
use tokenflip_core::policy::ModelConfig;
use tokenflip_core::pretrain::WarmStartConfig;
use tokenflip_core::task::SuiteSpec;
use tokenflip_core::value::ValueConfig;
use toml::{Table, Value};

use crate::error::{invalid, CliError, CliResult};

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 3] = ["seed", "policy.checkpoint", "train.rb_tau"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Worker threads; 0 lets the pool pick one per core.
    pub workers: usize,
    pub model: ModelConfig,
    pub suite: SuiteSpec,
    pub policy: PolicyConfig,
    pub batch: ProbeBatch,
    pub flip: FlipParams,
    pub coupling: CouplingParams,
    pub cancel: CancelParams,
    pub value: ValueParams,
    pub train: TrainConfig,
    pub ablate: AblateParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    #[default]
    Warm,
    Fresh,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub source: PolicySource,
    pub checkpoint: Option<PathBuf>,
    pub warm_start: WarmStartConfig,
}

/// The rollout batch every probe measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeBatch {
    pub n_tasks: usize,
    pub group_size: usize,
    pub max_len: usize,
    pub temperature: f64,
    /// Redraws allowed when a probe needs a mixed-sign group.
    pub max_attempts: usize,
}

impl Default for ProbeBatch {
    fn default() -> Self {
        Self {
            n_tasks: 8,
            group_size: 8,
            max_len: 6,
            temperature: 1.0,
            max_attempts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipParams {
    pub eta: f64,
    pub eps: f64,
    pub polarity: Polarity,
    pub clip: bool,
}

impl Default for FlipParams {
    fn default() -> Self {
        Self {
            eta: PROBE_LR,
            eps: tokenflip_core::displacement::DEFAULT_EPS,
            polarity: Polarity::Joint,
            clip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingParams {
    pub masking: MaskingConfig,
    pub quantile_buckets: usize,
}

impl Default for CouplingParams {
    fn default() -> Self {
        Self {
            masking: MaskingConfig::default(),
            quantile_buckets: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CancelParams {
    pub eta: f64,
    pub eps: f64,
}

impl Default for CancelParams {
    fn default() -> Self {
        Self {
            eta: PROBE_LR,
            eps: tokenflip_core::displacement::DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    #[default]
    Gap,
    Calibration,
    Budget,
    Repeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationParams {
    pub p_correct: f64,
    pub vocab: usize,
    pub trials: usize,
    pub m: usize,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            p_correct: 0.4,
            vocab: ModelConfig::default().vocab_size,
            trials: 40,
            m: tokenflip_core::value::DEFAULT_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueParams {
    pub mode: ValueMode,
    pub estimator: ValueConfig,
    pub calibration: CalibrationParams,
    /// `[batch_size, group_size]` cells.
    pub budget_grid: Vec<[usize; 2]>,
    pub repeat_steps: usize,
}

impl Default for ValueParams {
    fn default() -> Self {
        Self {
            mode: ValueMode::Gap,
            estimator: ValueConfig::default(),
            calibration: CalibrationParams::default(),
            budget_grid: vec![[8, 2], [8, 4], [8, 8], [16, 8]],
            repeat_steps: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "sign_partition")]
    SignPartition,
    #[serde(rename = "qb")]
    QueryPreserved,
    #[serde(rename = "rb")]
    RewardBalanced,
    #[serde(rename = "qb+rb")]
    QueryPreservedRewardBalanced,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Random => "random",
            Variant::SignPartition => "sign_partition",
            Variant::QueryPreserved => "qb",
            Variant::RewardBalanced => "rb",
            Variant::QueryPreservedRewardBalanced => "qb+rb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateParams {
    pub seeds: usize,
    pub tau: f64,
    pub variants: Vec<Variant>,
}

impl Default for AblateParams {
    fn default() -> Self {
        Self {
            seeds: 5,
            tau: tokenflip_core::batching::TAU_PRESET_LOOSE,
            variants: vec![
                Variant::Random,
                Variant::SignPartition,
                Variant::QueryPreserved,
                Variant::RewardBalanced,
                Variant::QueryPreservedRewardBalanced,
            ],
        }
    }
}

/// Inputs to [`resolve`], as gathered from the command line.
#[derive(Debug, Default)]
pub struct Sources<'a> {
    pub file: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// Fully resolved configuration plus its canonical TOML text.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub toml: String,
}

pub fn resolve(src: &Sources) -> CliResult<Resolved> {
    let defaults = Value::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut tree = Table::new();
    if let Some(path) = src.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        tree = text
            .parse::<Table>()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        check_keys(&tree, &defaults, "")?;
    }
    for raw in src.overrides {
        let (key, value) = parse_override(raw)?;
        check_path(&key, &defaults)?;
        set_path(&mut tree, &key, value)?;
    }
    if let Some(seed) = src.seed {
        set_path(&mut tree, "seed", Value::Integer(seed as i64))?;
    }
    if let Some(workers) = src.workers {
        set_path(&mut tree, "workers", Value::Integer(workers as i64))?;
    }
    let config: RunConfig = Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
    let seed = config
        .seed
        .ok_or_else(|| CliError::Config("missing required field `seed` (pass --seed <n> or seed=<n>)".into()))?;
    validate(&config)?;
    let toml = toml::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Resolved { config, seed, toml })
}

fn parse_override(raw: &str) -> CliResult<(String, Value)> {
    let (key, text) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{raw}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override `{raw}` has an empty key")));
    }
    let value = format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()));
    Ok((key.to_string(), value))
}

fn lookup<'a>(tree: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(tree, |node, part| node.as_table()?.get(part))
}

fn check_path(path: &str, defaults: &Value) -> CliResult<()> {
    if lookup(defaults, path).is_some() || OPTIONAL_KEYS.contains(&path) {
        Ok(())
    } else {
        Err(CliError::Config(format!("unknown config field `{path}`")))
    }
}

fn check_keys(table: &Table, defaults: &Value, prefix: &str) -> CliResult<()> {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        check_path(&path, defaults)?;
        if let (Value::Table(sub), Some(Value::Table(_))) = (v, lookup(defaults, &path)) {
            check_keys(sub, defaults, &path)?;
        }
    }
    Ok(())
}

fn set_path(tree: &mut Table, path: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = tree;
    for (i, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("`{}` is not a section", parts[..=i].join(".")))
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn field(path: &str, why: &str) -> CliError {
    CliError::Config(format!("{path}: {why}"))
}

fn positive_finite(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

fn validate(c: &RunConfig) -> CliResult<()> {
    c.model.validate().map_err(invalid)?;
    c.suite.validate().map_err(invalid)?;
    c.policy.warm_start.validate().map_err(invalid)?;
    c.train.validate().map_err(invalid)?;
    match (c.policy.source, &c.policy.checkpoint) {
        (PolicySource::Checkpoint, None) => {
            return Err(field("policy.checkpoint", "required when policy.source = \"checkpoint\""))
        }
        (PolicySource::Warm | PolicySource::Fresh, Some(_)) => {
            return Err(field("policy.checkpoint", "only used when policy.source = \"checkpoint\""))
        }
        _ => {}
    }
    let b = &c.batch;
    if b.n_tasks == 0 || b.n_tasks > c.suite.size {
        return Err(field("batch.n_tasks", "must lie in 1..=suite.size"));
    }
    if b.group_size == 0 {
        return Err(field("batch.group_size", "must be >= 1"));
    }
    if b.max_len == 0 {
        return Err(field("batch.max_len", "must be >= 1"));
    }
    if !positive_finite(b.temperature) {
        return Err(field("batch.temperature", "must be > 0"));
    }
    if b.max_attempts == 0 {
        return Err(field("batch.max_attempts", "must be >= 1"));
    }
    for (path, eta) in [
        ("flip.eta", c.flip.eta),
        ("cancel.eta", c.cancel.eta),
        ("coupling.masking.eta", c.coupling.masking.eta),
        ("value.estimator.eta", c.value.estimator.eta),
    ] {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(field(path, "must be finite and >= 0"));
        }
    }
    for (path, eps) in [
        ("flip.eps", c.flip.eps),
        ("cancel.eps", c.cancel.eps),
        ("value.estimator.eps", c.value.estimator.eps),
    ] {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(field(path, "must be finite and >= 0"));
        }
    }
    let m = &c.coupling.masking;
    if m.rules.is_empty() {
        return Err(field("coupling.masking.rules", "must not be empty"));
    }
    if m.paradigms.is_empty() {
        return Err(field("coupling.masking.paradigms", "must not be empty"));
    }
    if m.n_candidates == 0 {
        return Err(field("coupling.masking.n_candidates", "must be >= 1"));
    }
    if c.coupling.quantile_buckets == 0 {
        return Err(field("coupling.quantile_buckets", "must be >= 1"));
    }
    let v = &c.value;
    if v.estimator.n_per_class == 0 {
        return Err(field("value.estimator.n_per_class", "must be >= 1"));
    }
    if v.estimator.m == 0 {
        return Err(field("value.estimator.m", "must be >= 1"));
    }
    if !(v.estimator.p_guard > 0.0 && v.estimator.p_guard < 1.0) {
        return Err(field("value.estimator.p_guard", "must lie in (0, 1)"));
    }
    if v.estimator.buckets.iter().any(|&k| k == 0 || k > 100) {
        return Err(field("value.estimator.buckets", "entries must lie in 1..=100"));
    }
    if v.budget_grid.iter().any(|cell| cell.contains(&0)) {
        return Err(field("value.budget_grid", "cells must be >= 1"));
    }
    if v.repeat_steps == 0 {
        return Err(field("value.repeat_steps", "must be >= 1"));
    }
    let cal = &v.calibration;
    if !(0.0..1.0).contains(&cal.p_correct) {
        return Err(field("value.calibration.p_correct", "must lie in [0, 1)"));
    }
    if cal.vocab < 2 {
        return Err(field("value.calibration.vocab", "must be >= 2"));
    }
    if cal.trials == 0 || cal.m == 0 {
        return Err(field("value.calibration", "trials and m must be >= 1"));
    }
    let a = &c.ablate;
    if a.seeds == 0 {
        return Err(field("ablate.seeds", "must be >= 1"));
    }
    if !(0.0..=0.5).contains(&a.tau) {
        return Err(field("ablate.tau", "must lie in [0, 0.5]"));
    }
    if a.variants.is_empty() {
        return Err(field("ablate.variants", "must not be empty"));
    }
    Ok(())
}
