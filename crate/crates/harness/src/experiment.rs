//! Cross-validated experiment execution.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdafed::data::{
    load_delimited, partition, planar_benchmark, sample_stream, strip_tags, DriftSchedule,
    TaggedInstance,
};
use cdafed::fed::{
    run_cda, run_fedavg, Algorithm, CdaConfig, ConceptScope, FedAvgConfig, MetricsLog, RunReport,
    TestSet,
};
use cdafed::model::ModelArch;
use cdafed::seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{HarnessError, Result};

const FOLD_LABEL: u64 = 0xF01D;
const USER_LABEL: u64 = 0x05E4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_source: String,
    /// Final pooled test accuracy of the global model.
    pub overall: f64,
    pub per_concept: BTreeMap<usize, f64>,
    pub comms_sent: u64,
    pub comms_received: u64,
    pub updates: usize,
    pub detections: Vec<Vec<usize>>,
    pub trigger_fractions: Vec<f64>,
    /// Set when the fold failed; the accuracy fields are then meaningless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub folds: Vec<FoldSummary>,
    /// Means over the folds that completed.
    pub mean_overall: f64,
    pub mean_per_concept: BTreeMap<usize, f64>,
    pub mean_comms: f64,
    pub scaling_factors: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
}

impl RunSummary {
    pub fn failed_folds(&self) -> Vec<usize> {
        self.folds.iter().filter(|f| f.error.is_some()).map(|f| f.fold).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Input(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Input(format!("{} is not a run summary: {e}", path.display())))
    }

    /// Plain-text table, one row per fold plus the mean.
    pub fn table(&self) -> String {
        let concepts: Vec<usize> = self.mean_per_concept.keys().copied().collect();
        let mut out = String::from("fold,test_source,overall");
        for c in &concepts {
            out.push_str(&format!(",concept_{c}"));
        }
        out.push_str(",comms,detections\n");
        for f in &self.folds {
            if let Some(e) = &f.error {
                out.push_str(&format!("{},{},failed: {}\n", f.fold, f.test_source, e.replace(',', ";")));
                continue;
            }
            out.push_str(&format!("{},{},{:.4}", f.fold, f.test_source, f.overall));
            for c in &concepts {
                match f.per_concept.get(c) {
                    Some(a) => out.push_str(&format!(",{a:.4}")),
                    None => out.push(','),
                }
            }
            let detections: usize = f.detections.iter().map(Vec::len).sum();
            out.push_str(&format!(",{},{}\n", f.comms_sent + f.comms_received, detections));
        }
        out.push_str(&format!("mean,,{:.4}", self.mean_overall));
        for c in &concepts {
            out.push_str(&format!(",{:.4}", self.mean_per_concept[c]));
        }
        out.push_str(&format!(",{:.1},\n", self.mean_comms));
        out
    }
}

/// Data of one cross-validation fold.
pub struct FoldData {
    pub test_source: String,
    pub streams: Vec<Vec<TaggedInstance>>,
    pub test: Vec<TaggedInstance>,
    pub input_dim: usize,
}

enum Population {
    Generated { schedule: DriftSchedule, length: usize, users: usize },
    Loaded { sources: Vec<(String, Vec<TaggedInstance>)>, dim: usize },
}

fn population(cfg: &ExperimentConfig) -> Result<Population> {
    Ok(match &cfg.data {
        DataSource::Benchmark { spec, users } => Population::Generated {
            schedule: planar_benchmark(spec)?,
            length: spec.concepts * spec.segment_length,
            users: users.unwrap_or(cfg.client_count + 1),
        },
        DataSource::Schedule { schedule, length, users } => Population::Generated {
            schedule: schedule.clone(),
            length: *length,
            users: users.unwrap_or(cfg.client_count + 1),
        },
        DataSource::Dataset { path, schema } => {
            let loaded = load_delimited(path, schema)?;
            let dim = loaded.feature_names.len();
            let sources = loaded.by_source()?;
            if sources.len() < cfg.client_count + 1 {
                return Err(HarnessError::Config(format!(
                    "dataset has {} sources, {} clients need {}",
                    sources.len(),
                    cfg.client_count,
                    cfg.client_count + 1
                )));
            }
            Population::Loaded { sources, dim }
        }
    })
}

impl Population {
    fn fold(&self, cfg: &ExperimentConfig, fold: usize) -> Result<FoldData> {
        let fold_seed = seed::derive(cfg.seed, FOLD_LABEL + fold as u64);
        let (sources, names, dim) = match self {
            Population::Generated { schedule, length, users } => {
                let user_seed = seed::derive(fold_seed, USER_LABEL);
                let sources = (0..*users)
                    .map(|u| sample_stream(schedule, seed::derive(user_seed, u as u64), *length))
                    .collect::<cdafed::Result<Vec<_>>>()?;
                let names = (0..*users).map(|u| format!("user{u}")).collect::<Vec<_>>();
                (sources, names, schedule.dim())
            }
            Population::Loaded { sources, dim } => {
                let names = sources.iter().map(|(n, _)| n.clone()).collect();
                (sources.iter().map(|(_, d)| d.clone()).collect(), names, *dim)
            }
        };
        let test_source = fold % sources.len();
        let p = partition(sources, cfg.client_count, test_source, cfg.order, fold_seed)?;
        Ok(FoldData {
            test_source: names[test_source].clone(),
            streams: p.clients,
            test: p.test,
            input_dim: dim,
        })
    }
}

/// Builds the data of every fold (used by tests that need the raw streams).
pub fn fold_data(cfg: &ExperimentConfig) -> Result<Vec<FoldData>> {
    let pop = population(cfg)?;
    (0..cfg.folds).map(|f| pop.fold(cfg, f)).collect()
}

/// Runs one fold and returns its report.
pub fn run_fold(cfg: &ExperimentConfig, fold: usize, data: &FoldData) -> Result<RunReport> {
    let mut sizes = vec![data.input_dim];
    sizes.extend(&cfg.model.hidden);
    sizes.push(cfg.class_count());
    let arch = ModelArch::new(sizes, cfg.model.activation)?;
    let streams: Vec<_> = data.streams.iter().map(|s| strip_tags(s)).collect();
    let test = TestSet::from_tagged(&data.test)?;
    let run_seed = seed::derive(cfg.seed, fold as u64);
    let report = match cfg.algorithm {
        Algorithm::Fedavg => run_fedavg(
            &FedAvgConfig {
                arch,
                train: cfg.train_config(),
                rounds: cfg.fedavg.rounds,
                window: cfg.fedavg.window,
                seed: run_seed,
                tick_budget: cfg.tick_budget,
            },
            &streams,
            &test,
        )?,
        Algorithm::CdaFedavg => run_cda(
            &CdaConfig {
                arch,
                train: cfg.train_config(),
                detector: cfg.detector_config(),
                seed: run_seed,
                tick_budget: cfg.tick_budget,
                eval_every: cfg.cda.eval_every,
                max_collect: cfg.cda.max_collect,
            },
            &streams,
            &test,
        )?,
    };
    if let Some(first) = report.failures.first() {
        return Err(HarnessError::Diverged(first.clone()));
    }
    Ok(report)
}

pub struct FoldOutcome {
    pub summary: FoldSummary,
    pub log: Option<MetricsLog>,
}

fn summarise(fold: usize, test_source: String, result: Result<RunReport>) -> FoldOutcome {
    match result {
        Ok(report) => {
            let per_concept = report
                .log
                .records()
                .iter()
                .filter_map(|r| match (r.client, r.concept) {
                    (cdafed::fed::ClientScope::Global, ConceptScope::Concept(c)) => Some((c, r.accuracy)),
                    _ => None,
                })
                .collect();
            FoldOutcome {
                summary: FoldSummary {
                    fold,
                    test_source,
                    overall: report.log.final_accuracy(ConceptScope::Overall).unwrap_or(f64::NAN),
                    per_concept,
                    comms_sent: report.comms_sent,
                    comms_received: report.comms_received,
                    updates: report.total_updates(),
                    trigger_fractions: report.trigger_fractions(),
                    detections: report.detections,
                    error: None,
                },
                log: Some(report.log),
            }
        }
        Err(e) => {
            log::error!("fold {fold} failed: {e}");
            FoldOutcome {
                summary: FoldSummary {
                    fold,
                    test_source,
                    overall: f64::NAN,
                    per_concept: BTreeMap::new(),
                    comms_sent: 0,
                    comms_received: 0,
                    updates: 0,
                    detections: Vec::new(),
                    trigger_fractions: Vec::new(),
                    error: Some(e.to_string()),
                },
                log: None,
            }
        }
    }
}

/// Result of [`run`]: the summary plus every fold's log, in fold order.
pub struct RunOutput {
    pub summary: RunSummary,
    pub logs: Vec<Option<MetricsLog>>,
}

/// Executes every fold (in parallel) and assembles the summary in fold order.
///
/// Configuration problems are reported before anything runs; failures inside
/// a fold are recorded in that fold's summary and the other folds continue.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let pop = population(cfg)?;
    let outcomes: Vec<FoldOutcome> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| match pop.fold(cfg, f) {
            Ok(data) => {
                let result = run_fold(cfg, f, &data);
                summarise(f, data.test_source, result)
            }
            Err(e) => summarise(f, String::new(), Err(e)),
        })
        .collect();

    let ok: Vec<&FoldSummary> = outcomes.iter().map(|o| &o.summary).filter(|s| s.error.is_none()).collect();
    let mean = |xs: Vec<f64>| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let mut concept_ids: Vec<usize> = ok.iter().flat_map(|s| s.per_concept.keys().copied()).collect();
    concept_ids.sort_unstable();
    concept_ids.dedup();
    let mean_per_concept = concept_ids
        .into_iter()
        .map(|c| (c, mean(ok.iter().filter_map(|s| s.per_concept.get(&c).copied()).collect())))
        .collect();
    let summary = RunSummary {
        name: cfg.name.clone(),
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        mean_overall: mean(ok.iter().map(|s| s.overall).collect()),
        mean_per_concept,
        mean_comms: mean(ok.iter().map(|s| (s.comms_sent + s.comms_received) as f64).collect()),
        scaling_factors: cfg.scaling_factors(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        folds: outcomes.iter().map(|o| o.summary.clone()).collect(),
    };
    Ok(RunOutput {
        summary,
        logs: outcomes.into_iter().map(|o| o.log).collect(),
    })
}

pub fn fold_log_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold:02}.csv"))
}

/// Writes `fold_NN.csv` logs, `summary.json`, `summary.csv` and the
/// canonical config next to them.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (f, log) in out.logs.iter().enumerate() {
        if let Some(log) = log {
            log.write_to(BufWriter::new(fs::File::create(fold_log_path(dir, f))?))?;
        }
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)?)?;
    fs::write(dir.join("summary.csv"), out.summary.table())?;
    fs::write(dir.join("config.toml"), cfg.to_canonical_string())?;
    Ok(())
}
