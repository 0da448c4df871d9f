use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::models::{Capacity, ModelFamily, ModelSpec};
use crate::plasm::{FilterMethod, PlasmConfig};
use crate::strategies::{Strategy, MAX_MD_DIM};
use crate::synthetic::{EntityCorpusConfig, TopicCorpusConfig};
use crate::ups::UpsConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    SyntheticTopics {
        #[serde(default = "default_test_size")]
        test_size: usize,
        #[serde(default)]
        generator: TopicCorpusConfig,
    },
    SyntheticEntities {
        #[serde(default = "default_test_size")]
        test_size: usize,
        #[serde(default)]
        generator: EntityCorpusConfig,
    },
    /// One JSON object per line with `id`, `text` and `label`.
    Jsonl { train: PathBuf, test: PathBuf },
    /// Whitespace-separated token/tag columns, blank line between sentences.
    Conll { train: PathBuf, test: PathBuf },
}

fn default_test_size() -> usize {
    1000
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::SyntheticTopics {
            test_size: default_test_size(),
            generator: TopicCorpusConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn task(&self) -> Task {
        match self {
            DatasetConfig::SyntheticTopics { .. } | DatasetConfig::Jsonl { .. } => {
                Task::Classification
            }
            DatasetConfig::SyntheticEntities { .. } | DatasetConfig::Conll { .. } => Task::Tagging,
        }
    }

    /// Resolves relative file paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        if let DatasetConfig::Jsonl { train, test } | DatasetConfig::Conll { train, test } = self {
            for p in [train, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

/// A model preset plus optional overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelChoice {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<ModelFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<Capacity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

impl ModelChoice {
    pub fn preset(family: ModelFamily, capacity: Capacity) -> Self {
        ModelChoice {
            family: Some(family),
            capacity: Some(capacity),
            ..Default::default()
        }
    }

    pub fn resolve(&self, default_family: ModelFamily, default_capacity: Capacity) -> ModelSpec {
        let base = ModelSpec::preset(
            self.family.unwrap_or(default_family),
            self.capacity.unwrap_or(default_capacity),
        );
        ModelSpec {
            feature_dim: self.feature_dim.unwrap_or(base.feature_dim),
            hidden_dim: self.hidden_dim.unwrap_or(base.hidden_dim),
            epochs: self.epochs.unwrap_or(base.epochs),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            l2: self.l2.unwrap_or(base.l2),
            rng_seed: self.rng_seed.unwrap_or(base.rng_seed),
            ..base
        }
    }

    fn from_spec(s: &ModelSpec) -> Self {
        ModelChoice {
            family: Some(s.family),
            capacity: Some(s.capacity),
            feature_dim: Some(s.feature_dim),
            hidden_dim: Some(s.hidden_dim),
            epochs: Some(s.epochs),
            learning_rate: Some(s.learning_rate),
            l2: Some(s.l2),
            rng_seed: Some(s.rng_seed),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SuccessorConfig {
    /// The successor is the acquisition model retrained on the new labels.
    #[default]
    Same,
    Mismatched { model: ModelChoice },
    Plasm {
        /// Defaults to the acquisition family at large capacity.
        #[serde(default)]
        teacher: ModelChoice,
        model: ModelChoice,
        #[serde(default = "default_filter")]
        filter_method: FilterMethod,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        filter_fraction: Option<f64>,
        #[serde(default = "yes")]
        same_family: bool,
    },
}

fn default_filter() -> FilterMethod {
    FilterMethod::Tracin
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Option<Task>,
    pub strategy: Strategy,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    /// Share of instances (classification) or tokens (tagging) in the seed set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_fraction: Option<f64>,
    /// Share of instances (classification) or tokens (tagging) per query.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_fraction: Option<f64>,
    /// Share of the training corpus held out for the PLASM filter rule.
    pub held_out_fraction: f64,
    pub md_regularization: f64,
    pub dataset: DatasetConfig,
    pub acquisition: ModelChoice,
    pub successor: SuccessorConfig,
    pub ups: UpsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: None,
            strategy: Strategy::Lc,
            iterations: 10,
            seeds: vec![0, 1, 2, 3, 4],
            seed_fraction: None,
            query_fraction: None,
            held_out_fraction: 0.1,
            md_regularization: 1e-6,
            dataset: DatasetConfig::default(),
            acquisition: ModelChoice::default(),
            successor: SuccessorConfig::default(),
            ups: UpsConfig::default(),
        }
    }
}

/// What a configured successor resolves to.
#[derive(Clone, Debug, PartialEq)]
pub enum SuccessorPlan {
    Same,
    Mismatched(ModelSpec),
    Plasm(PlasmConfig),
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative dataset paths are taken
    /// relative to the invocation directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn resolved_task(&self) -> Task {
        self.task.unwrap_or_else(|| self.dataset.task())
    }

    fn default_fraction(&self) -> f64 {
        match self.resolved_task() {
            Task::Classification => 0.01,
            Task::Tagging => 0.02,
        }
    }

    pub fn resolved_seed_fraction(&self) -> f64 {
        self.seed_fraction.unwrap_or_else(|| self.default_fraction())
    }

    pub fn resolved_query_fraction(&self) -> f64 {
        self.query_fraction.unwrap_or_else(|| self.default_fraction())
    }

    /// Tagging experiments size seeds and queries in tokens.
    pub fn token_budget_mode(&self) -> bool {
        self.resolved_task() == Task::Tagging
    }

    fn default_family(&self) -> ModelFamily {
        match self.resolved_task() {
            Task::Classification => ModelFamily::LinearNgram,
            Task::Tagging => ModelFamily::WindowTagger,
        }
    }

    pub fn acquisition_spec(&self) -> ModelSpec {
        self.acquisition.resolve(self.default_family(), Capacity::Small)
    }

    pub fn successor_plan(&self) -> SuccessorPlan {
        let acq = self.acquisition_spec();
        match &self.successor {
            SuccessorConfig::Same => SuccessorPlan::Same,
            SuccessorConfig::Mismatched { model } => {
                SuccessorPlan::Mismatched(model.resolve(acq.family, Capacity::Large))
            }
            SuccessorConfig::Plasm {
                teacher,
                model,
                filter_method,
                filter_fraction,
                same_family,
            } => SuccessorPlan::Plasm(PlasmConfig {
                teacher: teacher.resolve(acq.family, Capacity::Large),
                successor: model.resolve(acq.family, Capacity::Large),
                acquisition: acq,
                filter_method: *filter_method,
                filter_fraction: *filter_fraction,
                same_family: *same_family,
            }),
        }
    }

    /// Every violated constraint, each naming its field.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let task = self.resolved_task();
        if task != self.dataset.task() {
            out.push(format!(
                "task: {task:?} does not match the dataset, which is {:?}",
                self.dataset.task()
            ));
        }
        if self.iterations == 0 {
            out.push("iterations must be at least 1".into());
        }
        if self.seeds.is_empty() {
            out.push("seeds must not be empty".into());
        }
        for (name, v) in [
            ("seed_fraction", self.seed_fraction),
            ("query_fraction", self.query_fraction),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v < 1.0) {
                    out.push(format!("{name} must be in (0, 1), got {v}"));
                }
            }
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            out.push(format!(
                "held_out_fraction must be in (0, 1), got {}",
                self.held_out_fraction
            ));
        }
        if !(self.md_regularization >= 0.0) {
            out.push("md_regularization must be non-negative".into());
        }
        let acq = self.acquisition_spec();
        out.extend(acq.violations("acquisition"));
        if acq.task() != task {
            out.push(format!("acquisition.family {} does not solve {task:?}", acq.family));
        }
        match (self.strategy, task) {
            (Strategy::Lc | Strategy::Md, Task::Tagging) => out.push(format!(
                "strategy {} needs a classification task",
                self.strategy
            )),
            (Strategy::Mnlp, Task::Classification) => {
                out.push("strategy mnlp needs a tagging task".into())
            }
            _ => {}
        }
        if self.strategy == Strategy::Md && (acq.hidden_dim == 0 || acq.hidden_dim > MAX_MD_DIM) {
            out.push(format!(
                "strategy md needs an acquisition model with a dense hidden layer of at most {MAX_MD_DIM} units (family feedforward)"
            ));
        }
        match self.successor_plan() {
            SuccessorPlan::Same => {}
            SuccessorPlan::Mismatched(spec) => {
                out.extend(spec.violations("successor.model"));
                if spec.task() != task {
                    out.push(format!("successor.model family {} does not solve {task:?}", spec.family));
                }
            }
            SuccessorPlan::Plasm(p) => {
                out.extend(p.violations("successor"));
                if p.teacher.task() != task {
                    out.push(format!("successor.teacher family {} does not solve {task:?}", p.teacher.family));
                }
            }
        }
        out.extend(self.ups.violations("ups"));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// The config with every default spelled out.
    pub fn normalized(&self) -> ExperimentConfig {
        let mut n = self.clone();
        n.task = Some(self.resolved_task());
        n.seed_fraction = Some(self.resolved_seed_fraction());
        n.query_fraction = Some(self.resolved_query_fraction());
        let acq = self.acquisition_spec();
        n.acquisition = ModelChoice::from_spec(&acq);
        n.successor = match self.successor_plan() {
            SuccessorPlan::Same => SuccessorConfig::Same,
            SuccessorPlan::Mismatched(s) => SuccessorConfig::Mismatched {
                model: ModelChoice::from_spec(&s),
            },
            SuccessorPlan::Plasm(p) => SuccessorConfig::Plasm {
                teacher: ModelChoice::from_spec(&p.teacher),
                model: ModelChoice::from_spec(&p.successor),
                filter_method: p.filter_method,
                filter_fraction: p.filter_fraction,
                same_family: p.same_family,
            },
        };
        n
    }
}
