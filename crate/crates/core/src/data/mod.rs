//! Data streams: synthetic drifting generators, delimited file ingestion and
//! per-client partitioning.
//!
//! Ground-truth concept tags travel in [`TaggedInstance`] and are only meant
//! for evaluation. The federated engines consume plain [`LabeledInstance`]s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

mod delimited;
mod partition;
mod synth;

pub use delimited::{load_delimited, DatasetSchema, LoadedDataset};
pub use partition::{partition, Partition, StreamOrder};
pub use synth::{
    planar_benchmark, sample_stream, BenchmarkSpec, ClassCluster, ConceptSpec, DriftSchedule,
    ScheduleEntry, Transition,
};

/// A feature vector and its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labeled instance together with the concept that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedInstance {
    pub instance: LabeledInstance,
    pub origin_concept: usize,
}

/// Drops the ground-truth tags.
pub fn strip_tags(data: &[TaggedInstance]) -> Vec<LabeledInstance> {
    data.iter().map(|t| t.instance.clone()).collect()
}

/// Groups instances by their origin concept, in ascending concept order.
pub fn group_by_concept(data: &[TaggedInstance]) -> BTreeMap<usize, Vec<LabeledInstance>> {
    let mut groups: BTreeMap<usize, Vec<LabeledInstance>> = BTreeMap::new();
    for t in data {
        groups
            .entry(t.origin_concept)
            .or_default()
            .push(t.instance.clone());
    }
    groups
}
