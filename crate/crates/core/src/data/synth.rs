use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledInstance, TaggedInstance};
use crate::error::{Error, Result};
use crate::seed;

/// Isotropic Gaussian cluster for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCluster {
    pub mean: Vec<f64>,
    /// Per-coordinate standard deviation.
    pub std: f64,
}

/// Class-conditional generator for one concept.
///
/// Class means are mapped through `rotation` (row-major square matrix) and
/// then shifted by `translation`; the noise is isotropic so it is unaffected
/// by the rotation. Labels depend only on which cluster was drawn, so moving
/// between concepts changes the input distribution alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: usize,
    pub classes: Vec<ClassCluster>,
    /// Class prior weights; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<Vec<f64>>,
}

/// A concept with rotation and translation folded into the class means.
#[derive(Debug, Clone)]
struct Resolved {
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
    priors: Vec<f64>,
}

impl ConceptSpec {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.classes.is_empty() || dim == 0 {
            return Err(Error::Config(format!(
                "concept {} needs at least one class with a non-empty mean",
                self.concept_id
            )));
        }
        for (c, cluster) in self.classes.iter().enumerate() {
            if cluster.mean.len() != dim {
                return Err(Error::Config(format!(
                    "concept {} class {c} has dimension {}, expected {dim}",
                    self.concept_id,
                    cluster.mean.len()
                )));
            }
            if !(cluster.std.is_finite() && cluster.std >= 0.0)
                || cluster.mean.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Config(format!(
                    "concept {} class {c} has non-finite parameters",
                    self.concept_id
                )));
            }
        }
        if let Some(priors) = &self.priors {
            if priors.len() != self.classes.len() {
                return Err(Error::Config(format!(
                    "concept {} has {} priors for {} classes",
                    self.concept_id,
                    priors.len(),
                    self.classes.len()
                )));
            }
            let total: f64 = priors.iter().sum();
            if priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "concept {} priors must be non-negative and sum to 1",
                    self.concept_id
                )));
            }
        }
        if let Some(rot) = &self.rotation {
            if rot.len() != dim || rot.iter().any(|row| row.len() != dim) {
                return Err(Error::Config(format!(
                    "concept {} rotation must be {dim}x{dim}",
                    self.concept_id
                )));
            }
        }
        if let Some(t) = &self.translation {
            if t.len() != dim {
                return Err(Error::Config(format!(
                    "concept {} translation must have dimension {dim}",
                    self.concept_id
                )));
            }
        }
        Ok(())
    }

    fn resolve(&self) -> Resolved {
        let m = self.classes.len();
        let means = self
            .classes
            .iter()
            .map(|cluster| {
                let mut mean = match &self.rotation {
                    Some(rot) => rot
                        .iter()
                        .map(|row| row.iter().zip(&cluster.mean).map(|(r, x)| r * x).sum())
                        .collect(),
                    None => cluster.mean.clone(),
                };
                if let Some(t) = &self.translation {
                    mean.iter_mut().zip(t).for_each(|(x, d)| *x += d);
                }
                mean
            })
            .collect();
        Resolved {
            means,
            stds: self.classes.iter().map(|c| c.std).collect(),
            priors: self
                .priors
                .clone()
                .unwrap_or_else(|| vec![1.0 / m as f64; m]),
        }
    }

    /// Copy of this concept with every class mean shifted by `offset`.
    pub fn shifted(&self, offset: &[f64]) -> ConceptSpec {
        let mut out = self.clone();
        let t = out.translation.get_or_insert_with(|| vec![0.0; offset.len()]);
        t.iter_mut().zip(offset).for_each(|(x, d)| *x += d);
        out
    }
}

impl Resolved {
    fn lerp(&self, other: &Resolved, w: f64) -> Resolved {
        let mix = |a: &f64, b: &f64| (1.0 - w) * a + w * b;
        Resolved {
            means: self
                .means
                .iter()
                .zip(&other.means)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| mix(x, y)).collect())
                .collect(),
            stds: self.stds.iter().zip(&other.stds).map(|(a, b)| mix(a, b)).collect(),
            priors: self.priors.iter().zip(&other.priors).map(|(a, b)| mix(a, b)).collect(),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> LabeledInstance {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = self.priors.len() - 1;
        for (c, p) in self.priors.iter().enumerate() {
            acc += p;
            if u < acc {
                label = c;
                break;
            }
        }
        let std = self.stds[label];
        let features = self.means[label]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + std * z
            })
            .collect();
        LabeledInstance { features, label }
    }
}

/// How an entry of the schedule replaces the previous concept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transition {
    /// Hard switch at the start tick.
    #[default]
    Sudden,
    /// Instances are drawn from the new concept with a probability ramping
    /// linearly from 0 to 1 over `width` ticks.
    Gradual { width: usize },
    /// Generator parameters move linearly from the old to the new concept over `width` ticks.
    Incremental { width: usize },
}

impl Transition {
    fn width(&self) -> usize {
        match *self {
            Transition::Sudden => 0,
            Transition::Gradual { width } | Transition::Incremental { width } => width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub start_tick: usize,
    pub concept: ConceptSpec,
    #[serde(default)]
    pub transition: Transition,
}

/// Piecewise description of which concept generates each tick of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl DriftSchedule {
    /// Single-concept schedule.
    pub fn stationary(concept: ConceptSpec) -> Self {
        Self {
            entries: vec![ScheduleEntry {
                start_tick: 0,
                concept,
                transition: Transition::Sudden,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::Config("drift schedule has no entries".into()))?;
        if first.start_tick != 0 {
            return Err(Error::Config("the first schedule entry must start at tick 0".into()));
        }
        let dim = first.concept.dim();
        let classes = first.concept.class_count();
        for (i, entry) in self.entries.iter().enumerate() {
            entry.concept.validate()?;
            if entry.concept.dim() != dim || entry.concept.class_count() != classes {
                return Err(Error::Config(format!(
                    "schedule entry {i} changes the feature dimension or class count"
                )));
            }
            if let Some(next) = self.entries.get(i + 1) {
                if next.start_tick <= entry.start_tick {
                    return Err(Error::Config(format!(
                        "schedule start ticks must be strictly increasing (entry {})",
                        i + 1
                    )));
                }
                if next.transition.width() >= next.start_tick - entry.start_tick {
                    return Err(Error::Config(format!(
                        "transition width of entry {} reaches back past entry {i}",
                        i + 1
                    )));
                }
            }
            if let Some(other) = self.entries[..i]
                .iter()
                .find(|e| e.concept.concept_id == entry.concept.concept_id)
            {
                if other.concept != entry.concept {
                    return Err(Error::Config(format!(
                        "concept id {} is reused with a different generator",
                        entry.concept.concept_id
                    )));
                }
            }
        }
        if first.transition.width() > 0 {
            return Err(Error::Config("the first schedule entry cannot have a transition".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.concept.dim())
    }

    pub fn class_count(&self) -> usize {
        self.entries.first().map_or(0, |e| e.concept.class_count())
    }

    /// Ticks at which a new entry begins, excluding tick 0.
    pub fn drift_ticks(&self) -> Vec<usize> {
        self.entries.iter().skip(1).map(|e| e.start_tick).collect()
    }

    /// Distinct concept ids in order of first appearance.
    pub fn concept_ids(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.concept.concept_id) {
                ids.push(e.concept.concept_id);
            }
        }
        ids
    }

    /// Copy of the schedule with every concept shifted by `offset`.
    pub fn shifted(&self, offset: &[f64]) -> DriftSchedule {
        DriftSchedule {
            entries: self
                .entries
                .iter()
                .map(|e| ScheduleEntry {
                    concept: e.concept.shifted(offset),
                    ..e.clone()
                })
                .collect(),
        }
    }
}

/// Draws `length` instances following `schedule`. Deterministic in `(schedule, seed)`.
pub fn sample_stream(
    schedule: &DriftSchedule,
    seed: u64,
    length: usize,
) -> Result<Vec<TaggedInstance>> {
    schedule.validate()?;
    if length == 0 {
        return Err(Error::Config("stream length must be positive".into()));
    }
    let resolved: Vec<Resolved> = schedule.entries.iter().map(|e| e.concept.resolve()).collect();
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(length);
    let mut active = 0;
    for t in 0..length {
        while active + 1 < schedule.entries.len() && schedule.entries[active + 1].start_tick <= t {
            active += 1;
        }
        let entry = &schedule.entries[active];
        let new_id = entry.concept.concept_id;
        let offset = t - entry.start_tick;
        let width = entry.transition.width();
        let tagged = if active == 0 || offset >= width {
            TaggedInstance {
                instance: resolved[active].sample(&mut rng),
                origin_concept: new_id,
            }
        } else {
            let old_id = schedule.entries[active - 1].concept.concept_id;
            let ramp = (offset as f64 + 0.5) / width as f64;
            match entry.transition {
                Transition::Gradual { .. } => {
                    let take_new = rng.random::<f64>() < ramp;
                    let (gen, id) = if take_new {
                        (&resolved[active], new_id)
                    } else {
                        (&resolved[active - 1], old_id)
                    };
                    TaggedInstance {
                        instance: gen.sample(&mut rng),
                        origin_concept: id,
                    }
                }
                Transition::Incremental { .. } => {
                    let gen = resolved[active - 1].lerp(&resolved[active], ramp);
                    TaggedInstance {
                        instance: gen.sample(&mut rng),
                        origin_concept: if ramp >= 0.5 { new_id } else { old_id },
                    }
                }
                Transition::Sudden => unreachable!("sudden transitions have zero width"),
            }
        };
        out.push(tagged);
    }
    Ok(out)
}

/// Parameters of the built-in synthetic benchmark.
///
/// Every concept places the same ring of class clusters in its own
/// two-dimensional plane of a `2 * concepts` dimensional space, rotated
/// in-plane by a per-concept angle. A model fitted to one concept has
/// near-uniform posteriors on the others, and training on one plane alone
/// gradually erases what was learned in the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub concepts: usize,
    pub classes: usize,
    /// Ring radius of the class means.
    pub radius: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Ticks per concept; concept `k` starts at `k * segment_length`.
    pub segment_length: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            concepts: 3,
            classes: 7,
            radius: 4.0,
            noise: 1.0,
            segment_length: 1000,
        }
    }
}

/// Builds the sudden-drift schedule described by `spec`.
pub fn planar_benchmark(spec: &BenchmarkSpec) -> Result<DriftSchedule> {
    if spec.concepts == 0 || spec.classes < 2 || spec.segment_length == 0 {
        return Err(Error::Config(
            "benchmark needs at least one concept, two classes and a positive segment length".into(),
        ));
    }
    let dim = 2 * spec.concepts;
    let m = spec.classes;
    let classes: Vec<ClassCluster> = (0..m)
        .map(|c| {
            let theta = 2.0 * PI * c as f64 / m as f64;
            let mut mean = vec![0.0; dim];
            mean[0] = spec.radius * theta.cos();
            mean[1] = spec.radius * theta.sin();
            ClassCluster {
                mean,
                std: spec.noise,
            }
        })
        .collect();
    let entries = (0..spec.concepts)
        .map(|k| {
            // rotate within plane 0, then exchange plane 0 with plane k
            let phi = PI * k as f64 / m as f64;
            let (s, c) = phi.sin_cos();
            let mut rot = vec![vec![0.0; dim]; dim];
            let plane = |i: usize| if i / 2 == k { i % 2 } else if i / 2 == 0 { 2 * k + i % 2 } else { i };
            for (row, target) in rot.iter_mut().enumerate() {
                let src = plane(row);
                if src < 2 {
                    target[0] = if src == 0 { c } else { s };
                    target[1] = if src == 0 { -s } else { c };
                } else {
                    target[src] = 1.0;
                }
            }
            ScheduleEntry {
                start_tick: k * spec.segment_length,
                concept: ConceptSpec {
                    concept_id: k,
                    classes: classes.clone(),
                    priors: None,
                    rotation: Some(rot),
                    translation: None,
                },
                transition: Transition::Sudden,
            }
        })
        .collect();
    let schedule = DriftSchedule { entries };
    schedule.validate()?;
    Ok(schedule)
}
