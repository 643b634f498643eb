//! Experiment configuration files.
//!
//! A config is a single TOML document. Every tunable of the protocol has a
//! documented default except the learning rate and the seed, which must be
//! given explicitly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cdafed::data::{BenchmarkSpec, DatasetSchema, DriftSchedule, StreamOrder};
use cdafed::drift::DetectorConfig;
use cdafed::fed::{Algorithm, DataWindow};
use cdafed::model::{Activation, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Reference values the desk-scale presets are scaled from.
pub const REFERENCE_SENSITIVITY: f64 = 0.05;
pub const REFERENCE_PADDING: usize = 100;
pub const REFERENCE_MAX_WINDOW: usize = 1000;
pub const REFERENCE_MIN_TRAIN_DATA: usize = 1400;
pub const REFERENCE_ROUNDS_PER_CONCEPT: usize = 5;
pub const REFERENCE_BATCH_SIZE: usize = 100;
pub const REFERENCE_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub client_count: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Ticks simulated per fold; defaults to the longest client stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick_budget: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// How each client's stream is ordered.
    pub order: StreamOrder,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub fedavg: FedAvgSection,
    #[serde(default)]
    pub cda: CdaSection,
    pub data: DataSource,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_folds() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; input and output sizes come from the data.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: Activation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_rounds_per_concept")]
    pub rounds_per_concept: usize,
    #[serde(default = "default_min_train_data")]
    pub min_train_data: usize,
}

fn default_batch() -> usize {
    REFERENCE_BATCH_SIZE
}

fn default_epochs() -> usize {
    REFERENCE_EPOCHS
}

fn default_rounds_per_concept() -> usize {
    REFERENCE_ROUNDS_PER_CONCEPT
}

fn default_min_train_data() -> usize {
    REFERENCE_MIN_TRAIN_DATA
}

impl From<&TrainSection> for TrainConfig {
    fn from(t: &TrainSection) -> Self {
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            rounds_per_concept: t.rounds_per_concept,
            min_train_data: t.min_train_data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default = "default_sensitivity")]
    pub sensitivity: f64,
    #[serde(default = "default_padding")]
    pub padding: usize,
    #[serde(default = "default_max_window")]
    pub max_window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_every: Option<usize>,
}

fn default_sensitivity() -> f64 {
    REFERENCE_SENSITIVITY
}

fn default_padding() -> usize {
    REFERENCE_PADDING
}

fn default_max_window() -> usize {
    REFERENCE_MAX_WINDOW
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            sensitivity: default_sensitivity(),
            padding: default_padding(),
            max_window: default_max_window(),
            check_every: None,
        }
    }
}

impl From<&DetectorSection> for DetectorConfig {
    fn from(d: &DetectorSection) -> Self {
        DetectorConfig {
            sensitivity: d.sensitivity,
            padding: d.padding,
            max_window: d.max_window,
            check_every: d.check_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgSection {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub window: DataWindow,
}

fn default_rounds() -> usize {
    25
}

impl Default for FedAvgSection {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            window: DataWindow::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdaSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_collect: Option<usize>,
}

/// Where the per-user streams come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Built-in planar ring benchmark with sudden drifts.
    Benchmark {
        #[serde(flatten)]
        spec: BenchmarkSpec,
        /// Simulated users; defaults to `client_count + 1`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        users: Option<usize>,
    },
    /// Explicit drift schedule shared by every user.
    Schedule {
        schedule: DriftSchedule,
        /// Stream length per user.
        length: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        users: Option<usize>,
    },
    /// Delimited file; each distinct source value is one user.
    Dataset { path: PathBuf, schema: DatasetSchema },
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative dataset paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DataSource::Dataset { path: data, .. } = &mut cfg.data {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical serialisation; reparsing it gives back an equal config.
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn train_config(&self) -> TrainConfig {
        (&self.train).into()
    }

    pub fn detector_config(&self) -> DetectorConfig {
        (&self.detector).into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.client_count == 0 {
            return bad("client_count must be at least 1".into());
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if self.tick_budget == Some(0) {
            return bad("tick_budget must be positive".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        let classes = self.class_count();
        self.train_config().validate(classes)?;
        match self.algorithm {
            Algorithm::Fedavg if self.fedavg.rounds == 0 => return bad("fedavg.rounds must be positive".into()),
            Algorithm::CdaFedavg => self.detector_config().validate()?,
            _ => {}
        }
        if self.cda.eval_every == Some(0) || self.cda.max_collect == Some(0) {
            return bad("cda.eval_every and cda.max_collect must be positive when set".into());
        }
        match &self.data {
            DataSource::Benchmark { spec, users } => {
                cdafed::data::planar_benchmark(spec)?;
                self.check_users(*users)?;
            }
            DataSource::Schedule { schedule, length, users } => {
                schedule.validate()?;
                if *length == 0 {
                    return bad("data.length must be positive".into());
                }
                self.check_users(*users)?;
            }
            DataSource::Dataset { schema, .. } => {
                if schema.class_count < 2 {
                    return bad("dataset schema needs at least two classes".into());
                }
                if schema.source_column.is_none() {
                    return bad("dataset schema needs a source column to split users".into());
                }
            }
        }
        Ok(())
    }

    fn check_users(&self, users: Option<usize>) -> Result<()> {
        if let Some(u) = users {
            if u < self.client_count + 1 {
                return Err(HarnessError::Config(format!(
                    "{u} users cannot provide {} clients plus a test user",
                    self.client_count
                )));
            }
        }
        Ok(())
    }

    /// Number of simulated or loaded users.
    pub fn user_count(&self) -> Option<usize> {
        match &self.data {
            DataSource::Benchmark { users, .. } | DataSource::Schedule { users, .. } => {
                Some(users.unwrap_or(self.client_count + 1))
            }
            DataSource::Dataset { .. } => None,
        }
    }

    pub fn class_count(&self) -> usize {
        match &self.data {
            DataSource::Benchmark { spec, .. } => spec.classes,
            DataSource::Schedule { schedule, .. } => schedule.class_count(),
            DataSource::Dataset { schema, .. } => schema.class_count,
        }
    }

    /// Ratio of every scaled hyperparameter to its reference value.
    pub fn scaling_factors(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: usize, r: usize| {
            m.insert(k.to_string(), v as f64 / r as f64);
        };
        put("batch_size", self.train.batch_size, REFERENCE_BATCH_SIZE);
        put("epochs", self.train.epochs, REFERENCE_EPOCHS);
        put("rounds_per_concept", self.train.rounds_per_concept, REFERENCE_ROUNDS_PER_CONCEPT);
        put("min_train_data", self.train.min_train_data, REFERENCE_MIN_TRAIN_DATA);
        if self.algorithm == Algorithm::CdaFedavg {
            put("padding", self.detector.padding, REFERENCE_PADDING);
            put("max_window", self.detector.max_window, REFERENCE_MAX_WINDOW);
            m.insert(
                "sensitivity".into(),
                self.detector.sensitivity / REFERENCE_SENSITIVITY,
            );
        }
        m
    }
}
