//! Run configuration: a TOML file whose sections mirror the module configs.
//!
//! Loading merges the user file over the defaults for the chosen experiment,
//! then applies `--set section.key=value` overrides. Keys that the defaults
//! do not know are collected and reported together.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rfprior::distill::DistillConfig;
use rfprior::{NetArch, Schedule, ScheduleKind, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataset::{ring_mixture, Dataset, DatasetKind};

/// Environment variable naming the root directory for run outputs.
pub const RUNS_ENV: &str = "RFPRIOR_RUNS";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    Reflow,
    Sample,
    Invert,
    Rfds,
    RfdsRev,
    IrfdsEdit,
    BridgeCheck,
    BenchCost,
    JacobianAblation,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::Reflow => "reflow",
            Experiment::Sample => "sample",
            Experiment::Invert => "invert",
            Experiment::Rfds => "rfds",
            Experiment::RfdsRev => "rfds-rev",
            Experiment::IrfdsEdit => "irfds-edit",
            Experiment::BridgeCheck => "bridge-check",
            Experiment::BenchCost => "bench-cost",
            Experiment::JacobianAblation => "jacobian-ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl ScheduleSection {
    pub fn build(&self) -> Result<Schedule, ConfigError> {
        Schedule::new(self.kind, self.t_min, self.t_max).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    GaussianRing8,
    TwoMoons,
    Checkerboard,
    SingleGaussian,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub kind: DatasetName,
    /// Component means for `kind = "mixture"`, equal weights.
    pub mixture_means: Vec<Vec<f64>>,
    pub mixture_std: f64,
    /// Size of the held-out sample used by distance metrics.
    pub n_eval: usize,
}

impl DatasetSection {
    pub fn build(&self) -> Result<Dataset, ConfigError> {
        let kind = match self.kind {
            DatasetName::GaussianRing8 => DatasetKind::GaussianRing8,
            DatasetName::TwoMoons => DatasetKind::TwoMoons,
            DatasetName::Checkerboard => DatasetKind::Checkerboard,
            DatasetName::SingleGaussian => DatasetKind::SingleGaussian,
            DatasetName::Mixture => DatasetKind::Mixture {
                mixture: rfprior::GaussianMixture::isotropic(self.mixture_means.clone(), self.mixture_std)
                    .map_err(|e| ConfigError::Invalid(format!("dataset.mixture_means: {e}")))?,
            },
        };
        Ok(Dataset::new(kind))
    }

    /// The dataset as an exact mixture, when it is one.
    pub fn mixture(&self) -> Result<rfprior::GaussianMixture, ConfigError> {
        match self.build()?.kind {
            DatasetKind::GaussianRing8 => Ok(ring_mixture()),
            DatasetKind::SingleGaussian => {
                rfprior::GaussianMixture::gaussian(vec![0.0, 0.0], 1.0).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            DatasetKind::Mixture { mixture } => Ok(mixture),
            other => Err(ConfigError::Invalid(format!("dataset {} has no exact oracle", other.name()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    /// Exact velocity of the dataset mixture.
    Oracle,
    /// A trained network loaded from `field.checkpoint`.
    Checkpoint,
    /// Monotone straight flow onto a symmetric two-mode product mixture.
    StraightBimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSection {
    pub source: FieldSource,
    pub checkpoint: String,
    /// Half distance between the two modes of `straight_bimodal`.
    pub bimodal_offset: f64,
    pub bimodal_std: f64,
    /// Condition label for distillation runs; `-1` draws one per seed,
    /// lower values mean unconditional.
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflowSection {
    pub n_pairs: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSection {
    pub steps: usize,
    pub cfg_scale: f64,
    pub n_samples: usize,
    /// Trajectories kept for the overlay plot.
    pub n_trajectories: usize,
    /// Condition label; `-1` draws one per sample, lower values mean unconditional.
    pub label: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Identity,
    Rotation,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    pub param_dim: usize,
    pub max_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsSection {
    pub n_seeds: usize,
    /// Fixed initial parameters; empty draws them uniformly in `[init_low, init_high]`.
    pub init: Vec<f64>,
    pub init_low: f64,
    pub init_high: f64,
    /// Radius around a mode that counts as reaching it.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSection {
    pub fraction: f64,
    pub steps: usize,
    pub cfg_scale: f64,
    pub source_label: i64,
    pub target_label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Run directory name under the runs root; empty derives `<experiment>-seed<seed>`.
    pub run_id: String,
    pub schedule: ScheduleSection,
    pub dataset: DatasetSection,
    pub net: NetArch,
    pub train: TrainConfig,
    pub reflow: ReflowSection,
    pub sampler: SamplerSection,
    pub field: FieldSection,
    pub distill: DistillConfig,
    pub generator: GeneratorSection,
    pub runs: RunsSection,
    pub edit: EditSection,
    pub bench: BenchSection,
}

impl RunConfig {
    /// Defaults for `experiment` under schedule `kind`.
    pub fn defaults(experiment: Experiment, kind: ScheduleKind) -> Self {
        let sched = Schedule::of_kind(kind);
        let distill = match experiment {
            Experiment::Invert | Experiment::IrfdsEdit => DistillConfig::inversion(&sched),
            _ => DistillConfig::generation(&sched),
        };
        let field_source = match experiment {
            Experiment::Rfds | Experiment::RfdsRev => FieldSource::Oracle,
            _ => FieldSource::Checkpoint,
        };
        Self {
            experiment,
            seed: 0,
            run_id: String::new(),
            schedule: ScheduleSection { kind, t_min: sched.t_min, t_max: sched.t_max },
            dataset: DatasetSection {
                kind: DatasetName::GaussianRing8,
                mixture_means: vec![],
                mixture_std: 0.2,
                n_eval: 2000,
            },
            net: NetArch::default(),
            train: TrainConfig::default(),
            reflow: ReflowSection { n_pairs: 20_000, sample_steps: 100, cfg_scale: 1.0, steps: 10_000, lr: 1e-3 },
            sampler: SamplerSection { steps: 50, cfg_scale: 1.0, n_samples: 2000, n_trajectories: 32, label: -1 },
            field: FieldSection {
                source: field_source,
                checkpoint: String::new(),
                bimodal_offset: 1.0,
                bimodal_std: 0.2,
                label: -1,
            },
            distill,
            generator: GeneratorSection { kind: GeneratorKind::Identity, param_dim: 2, max_angle: 0.5 },
            runs: RunsSection { n_seeds: 8, init: vec![], init_low: -5.0, init_high: 5.0, delta: 0.6 },
            edit: EditSection { fraction: 1.0, steps: 5, cfg_scale: 1.5, source_label: 0, target_label: 1 },
            bench: BenchSection { iters: 10 },
        }
    }

    /// Parses `text`, merges it over the experiment defaults and applies
    /// `key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut user: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse(format!("override {o:?} is not key=value")))?;
            set_path(&mut user, key.trim(), parse_scalar(raw.trim()))?;
        }
        let experiment: Experiment = match user.get("experiment") {
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(format!("experiment: {e}")))?,
            None => return Err(ConfigError::Invalid("missing key: experiment".into())),
        };
        let kind: ScheduleKind = match user.get("schedule").and_then(|s| s.get("kind")) {
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(format!("schedule.kind: {e}")))?,
            None => ScheduleKind::RectifiedFlow,
        };
        let defaults = Self::defaults(experiment, kind);
        let mut tree = Table::try_from(&defaults).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut unknown = BTreeSet::new();
        collect_unknown(&tree, &user, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown.into_iter().collect()));
        }
        merge(&mut tree, user);
        let cfg: Self = Value::Table(tree).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: rfprior::Error| ConfigError::Invalid(e.to_string());
        self.schedule.build()?;
        self.dataset.build()?;
        self.net.validate().map_err(inv)?;
        self.train.validate().map_err(inv)?;
        self.distill.validate().map_err(inv)?;
        if self.sampler.steps == 0 || self.sampler.n_samples == 0 {
            return Err(ConfigError::Invalid("sampler.steps and sampler.n_samples must be >= 1".into()));
        }
        if self.runs.n_seeds == 0 {
            return Err(ConfigError::Invalid("runs.n_seeds must be >= 1".into()));
        }
        if !(self.edit.fraction > 0.0 && self.edit.fraction <= 1.0) {
            return Err(ConfigError::Invalid("edit.fraction must lie in (0, 1]".into()));
        }
        if self.field.source == FieldSource::Checkpoint
            && self.field.checkpoint.is_empty()
            && matches!(self.experiment, Experiment::Sample | Experiment::Invert | Experiment::IrfdsEdit)
        {
            return Err(ConfigError::Invalid(format!(
                "{} with field.source = \"checkpoint\" needs field.checkpoint",
                self.experiment.as_str()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn run_name(&self) -> String {
        if self.run_id.is_empty() {
            format!("{}-seed{}", self.experiment.as_str(), self.seed)
        } else {
            self.run_id.clone()
        }
    }

    /// `$RFPRIOR_RUNS/<run name>`, with `runs` as the default root.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.run_name())
    }
}

fn parse_scalar(raw: &str) -> Value {
    // reuse the TOML grammar for numbers, booleans, arrays and quoted strings
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Parse(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn collect_unknown(known: &Table, user: &Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => {
                out.insert(path);
            }
            (Some(Value::Table(kt)), Value::Table(ut)) => collect_unknown(kt, ut, &path, out),
            _ => {}
        }
    }
}

fn merge(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(bt)), Value::Table(ut)) => merge(bt, ut),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
