//! Experiment configuration, parsed from JSON.
//!
//! Every section has defaults, so `{}` is a complete config: 5-way 1-shot
//! episodes with 15 queries per class on a 100-class synthetic dataset,
//! cyclical β with the MMD regularizer, Adam at 1e-4 with 16 tasks per batch
//! for 2000 steps. Step count, feature size and sample count are
//! assumptions, not tuned values. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::{self, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::ObjectiveConfig;
use crate::schedules::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Fsds { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    /// Relative FSDS paths resolve against `base` when given.
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(spec) => episodes::generate_synthetic_dataset(spec),
            DatasetSource::Fsds { path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                episodes::load_dataset(&full)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    #[serde(default = "defaults::ways")]
    pub ways: usize,
    #[serde(default = "defaults::shots")]
    pub shots: usize,
    /// Query examples per class.
    #[serde(default = "defaults::queries")]
    pub queries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            ways: defaults::ways(),
            shots: defaults::shots(),
            queries: defaults::queries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::tasks_per_batch")]
    pub tasks_per_batch: usize,
    #[serde(default = "defaults::steps")]
    pub steps: u64,
    /// Validate on meta-val every this many steps; 0 disables.
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "defaults::eval_tasks")]
    pub eval_tasks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: defaults::lr(),
            tasks_per_batch: defaults::tasks_per_batch(),
            steps: defaults::steps(),
            eval_interval: defaults::eval_interval(),
            eval_tasks: defaults::eval_tasks(),
        }
    }
}

mod defaults {
    use crate::schedules::ScheduleConfig;

    pub fn ways() -> usize {
        5
    }
    pub fn shots() -> usize {
        1
    }
    pub fn queries() -> usize {
        15
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn tasks_per_batch() -> usize {
        16
    }
    pub fn steps() -> u64 {
        2000
    }
    pub fn eval_interval() -> u64 {
        500
    }
    pub fn eval_tasks() -> usize {
        100
    }
    pub fn schedule() -> ScheduleConfig {
        ScheduleConfig::cyclical(steps())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default = "defaults::schedule")]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            episode: EpisodeConfig::default(),
            objective: ObjectiveConfig::default(),
            schedule: defaults::schedule(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.schedule.validate()?;
        let ep = &self.episode;
        if ep.ways == 0 || ep.shots == 0 || ep.queries == 0 {
            return Err(Error::config(
                "episode.ways, shots and queries must be positive",
            ));
        }
        let opt = &self.optimizer;
        if !(opt.lr > 0.0 && opt.lr.is_finite()) {
            return Err(Error::config("optimizer.lr must be positive"));
        }
        if opt.tasks_per_batch == 0 || opt.eval_tasks == 0 {
            return Err(Error::config(
                "optimizer.tasks_per_batch and eval_tasks must be positive",
            ));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if spec.input_dim != self.model.input_dim {
                return Err(Error::config(format!(
                    "model.input_dim {} does not match dataset input_dim {}",
                    self.model.input_dim, spec.input_dim
                )));
            }
            if spec.per_class < ep.shots + ep.queries {
                return Err(Error::config(format!(
                    "synthetic per_class {} is below shots + queries = {}",
                    spec.per_class,
                    ep.shots + ep.queries
                )));
            }
            let tags = episodes::default_splits(spec.num_classes);
            let train = tags.iter().filter(|&&s| s == Split::MetaTrain).count();
            if train < ep.ways {
                return Err(Error::config(format!(
                    "meta-train split has {train} classes, fewer than {} ways",
                    ep.ways
                )));
            }
        }
        Ok(())
    }

    /// Checks a loaded dataset against the model and episode shape.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.input_dim() != self.model.input_dim {
            return Err(Error::config(format!(
                "model.input_dim {} does not match dataset input dimension {}",
                self.model.input_dim,
                ds.input_dim()
            )));
        }
        Ok(())
    }
}
