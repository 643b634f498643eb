//! Federated protocol engines.
//!
//! [`fedavg`] is the synchronous baseline, [`cda`] the asynchronous
//! drift-aware variant. Both consume pre-partitioned client streams of
//! plain [`LabeledInstance`]s; ground-truth concept tags only reach the
//! engines through the held-out [`TestSet`].

pub mod cda;
pub mod fedavg;
pub mod metrics;
pub mod server;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{group_by_concept, LabeledInstance, TaggedInstance};
use crate::error::{Error, Result};
use crate::model::{evaluate, ParameterVector};

pub use cda::{run_cda, CdaConfig, ClientAgent, Mode, Observation};
pub use fedavg::{run_fedavg, DataWindow, FedAvgConfig};
pub use metrics::{Algorithm, ConceptScope, ClientScope, MetricRecord, MetricsLog};
pub use server::{weighted_average, ServerState};

/// Held-out evaluation data split by ground-truth concept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestSet {
    pub concepts: BTreeMap<usize, Vec<LabeledInstance>>,
}

impl TestSet {
    pub fn from_tagged(data: &[TaggedInstance]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("test split is empty".into()));
        }
        Ok(Self {
            concepts: group_by_concept(data),
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-concept accuracy followed by pooled accuracy over every concept.
    pub fn score(&self, params: &ParameterVector) -> Result<Scores> {
        let mut per_concept = BTreeMap::new();
        let mut correct = 0.0;
        let mut total = 0usize;
        for (&id, data) in &self.concepts {
            let acc = evaluate(params, data)?;
            correct += acc * data.len() as f64;
            total += data.len();
            per_concept.insert(id, acc);
        }
        if total == 0 {
            return Err(Error::Input("test split is empty".into()));
        }
        Ok(Scores {
            per_concept,
            overall: correct / total as f64,
        })
    }

    /// Pooled accuracy only.
    pub fn overall(&self, params: &ParameterVector) -> Result<f64> {
        Ok(self.score(params)?.overall)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub per_concept: BTreeMap<usize, f64>,
    pub overall: f64,
}

/// One processed simulation step, kept for reproducibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: usize,
    pub kind: EventKind,
    /// Originating client, `None` for the server's initial broadcast.
    pub client: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    InstanceArrival,
    LocalRound,
    ClientUpdate,
    Broadcast,
}

/// Everything a finished run hands back to the caller.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub log: MetricsLog,
    pub final_params: ParameterVector,
    /// Detection ticks per client (empty for the synchronous baseline).
    pub detections: Vec<Vec<usize>>,
    /// Number of detector evaluations per client.
    pub detector_runs: Vec<usize>,
    /// Update messages sent per client.
    pub updates_sent: Vec<usize>,
    /// Completed concepts (adaptations) per client.
    pub adaptations: Vec<usize>,
    pub comms_sent: u64,
    pub comms_received: u64,
    pub trace: Vec<TraceEntry>,
    /// Adaptations abandoned because training diverged.
    pub failures: Vec<String>,
}

impl RunReport {
    pub fn total_updates(&self) -> usize {
        self.updates_sent.iter().sum()
    }

    /// Fraction of detector evaluations that signalled drift, per client.
    pub fn trigger_fractions(&self) -> Vec<f64> {
        self.detections
            .iter()
            .zip(&self.detector_runs)
            .map(|(d, &runs)| if runs == 0 { 0.0 } else { d.len() as f64 / runs as f64 })
            .collect()
    }
}
