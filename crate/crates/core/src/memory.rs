//! Long-term rehearsal memory.
//!
//! Each client keeps one [`ConceptStore`] per concept it has identified. A
//! store stays open until every class has at least `ceil(L / 2M)` samples;
//! surplus samples of already-satisfied classes are kept. Rehearsal training
//! uses the union of all stores.
//!
//! Snapshots use a line-oriented text format:
//!
//! ```text
//! cdafed-memory 1
//! quota_l <L>
//! classes <M>
//! concept <id> <open|closed>
//! sample <concept_id> <label> <f64> <f64> ...
//! ```
//!
//! `concept` lines precede the samples that reference them. Floats are
//! written in shortest round-trip form, so a reload is bit-exact.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;

use crate::data::LabeledInstance;
use crate::error::{Error, Result};
use crate::seed;

const SNAPSHOT_MAGIC: &str = "cdafed-memory";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptStore {
    concept_id: usize,
    samples: Vec<LabeledInstance>,
    per_class_counts: BTreeMap<usize, usize>,
    open: bool,
}

impl ConceptStore {
    fn new(concept_id: usize) -> Self {
        Self {
            concept_id,
            samples: Vec::new(),
            per_class_counts: BTreeMap::new(),
            open: true,
        }
    }

    fn push(&mut self, inst: LabeledInstance) {
        *self.per_class_counts.entry(inst.label).or_insert(0) += 1;
        self.samples.push(inst);
    }

    pub fn concept_id(&self) -> usize {
        self.concept_id
    }

    pub fn samples(&self) -> &[LabeledInstance] {
        &self.samples
    }

    pub fn count(&self, class: usize) -> usize {
        self.per_class_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_open(&self) -> bool {
        self.open
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongTermMemory {
    stores: Vec<ConceptStore>,
    quota_l: usize,
    class_count: usize,
}

impl LongTermMemory {
    pub fn new(quota_l: usize, class_count: usize) -> Result<Self> {
        if class_count == 0 || quota_l == 0 {
            return Err(Error::Config("memory needs a positive L and class count".into()));
        }
        Ok(Self {
            stores: Vec::new(),
            quota_l,
            class_count,
        })
    }

    /// Samples required from every class before a concept is complete: `ceil(L / 2M)`.
    pub fn quota_per_class(&self) -> usize {
        self.quota_l.div_ceil(2 * self.class_count).max(1)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn quota_l(&self) -> usize {
        self.quota_l
    }

    pub fn stores(&self) -> &[ConceptStore] {
        &self.stores
    }

    /// Total number of stored samples across all concepts.
    pub fn len(&self) -> usize {
        self.stores.iter().map(ConceptStore::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn open_store(&self) -> Option<&ConceptStore> {
        self.stores.last().filter(|s| s.open)
    }

    fn open_store_mut(&mut self) -> Result<&mut ConceptStore> {
        self.stores
            .last_mut()
            .filter(|s| s.open)
            .ok_or_else(|| Error::State("no concept is currently open".into()))
    }

    /// Starts collecting a new concept and returns its id.
    pub fn open_concept(&mut self) -> Result<usize> {
        if self.open_store().is_some() {
            return Err(Error::State("a concept is already being collected".into()));
        }
        let id = self.stores.len();
        self.stores.push(ConceptStore::new(id));
        Ok(id)
    }

    pub fn add_sample(&mut self, inst: LabeledInstance) -> Result<()> {
        if inst.label >= self.class_count {
            return Err(Error::Input(format!(
                "label {} outside [0, {})",
                inst.label, self.class_count
            )));
        }
        self.open_store_mut()?.push(inst);
        Ok(())
    }

    /// Whether every class of the open concept reached its quota.
    pub fn concept_complete(&self) -> Result<bool> {
        let store = self
            .open_store()
            .ok_or_else(|| Error::State("no concept is currently open".into()))?;
        let quota = self.quota_per_class();
        Ok((0..self.class_count).all(|c| store.count(c) >= quota))
    }

    pub fn close_concept(&mut self) -> Result<()> {
        self.open_store_mut()?.open = false;
        Ok(())
    }

    /// Seeded shuffle of every stored sample across all concepts.
    pub fn rehearsal_dataset(&self, seed: u64) -> Result<Vec<LabeledInstance>> {
        if !self.stores.iter().any(|s| !s.open) {
            return Err(Error::State("rehearsal needs at least one closed concept".into()));
        }
        let mut out: Vec<LabeledInstance> = self
            .stores
            .iter()
            .flat_map(|s| s.samples.iter().cloned())
            .collect();
        if out.is_empty() {
            return Err(Error::State("long-term memory holds no samples".into()));
        }
        out.shuffle(&mut seed::rng(seed));
        Ok(out)
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}")?;
        writeln!(w, "quota_l {}", self.quota_l)?;
        writeln!(w, "classes {}", self.class_count)?;
        for store in &self.stores {
            let state = if store.open { "open" } else { "closed" };
            writeln!(w, "concept {} {state}", store.concept_id)?;
        }
        for store in &self.stores {
            for s in &store.samples {
                write!(w, "sample {} {}", store.concept_id, s.label)?;
                for v in &s.features {
                    write!(w, " {v:?}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: None,
            line,
            message,
        };
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next_fields = |expect: &str| -> Result<(usize, Vec<String>)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| bad(0, format!("snapshot truncated before '{expect}'")))?;
            let line = line?;
            Ok((n, line.split_whitespace().map(str::to_string).collect()))
        };
        let (n, header) = next_fields(SNAPSHOT_MAGIC)?;
        if header.len() != 2 || header[0] != SNAPSHOT_MAGIC {
            return Err(bad(n, "not a memory snapshot".into()));
        }
        if header[1] != SNAPSHOT_VERSION.to_string() {
            return Err(bad(n, format!("unsupported snapshot version {}", header[1])));
        }
        let mut field = |name: &str| -> Result<usize> {
            let (n, f) = next_fields(name)?;
            match f.as_slice() {
                [k, v] if k == name => v.parse().map_err(|_| bad(n, format!("bad value for {name}"))),
                _ => Err(bad(n, format!("expected '{name} <value>'"))),
            }
        };
        let quota_l = field("quota_l")?;
        let classes = field("classes")?;
        let mut mem = LongTermMemory::new(quota_l, classes)?;
        for (n, line) in lines {
            let line = line?;
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => continue,
                ["concept", id, state] => {
                    let id: usize = id.parse().map_err(|_| bad(n, "bad concept id".into()))?;
                    if id != mem.stores.len() {
                        return Err(bad(n, format!("concept {id} out of sequence")));
                    }
                    let mut store = ConceptStore::new(id);
                    store.open = match *state {
                        "open" => true,
                        "closed" => false,
                        other => return Err(bad(n, format!("unknown concept state '{other}'"))),
                    };
                    mem.stores.push(store);
                }
                ["sample", id, label, values @ ..] => {
                    let id: usize = id.parse().map_err(|_| bad(n, "bad concept id".into()))?;
                    let label: usize = label.parse().map_err(|_| bad(n, "bad label".into()))?;
                    if label >= classes {
                        return Err(bad(n, format!("label {label} outside [0, {classes})")));
                    }
                    let features = values
                        .iter()
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(n, format!("bad feature value: {e}")))?;
                    let store = mem
                        .stores
                        .get_mut(id)
                        .ok_or_else(|| bad(n, format!("sample references unknown concept {id}")))?;
                    store.push(LabeledInstance { features, label });
                }
                _ => return Err(bad(n, format!("unrecognised record '{line}'"))),
            }
        }
        if mem.stores.iter().rev().skip(1).any(|s| s.open) {
            return Err(bad(0, "only the most recent concept may be open".into()));
        }
        Ok(mem)
    }
}
