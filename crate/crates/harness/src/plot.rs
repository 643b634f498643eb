//! Plot-ready series extracted from a metrics log.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cdafed::fed::{ClientScope, ConceptScope, MetricRecord, MetricsLog};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    /// One global series per test concept plus the pooled one.
    Concept,
    /// One series per client, from the client's own evaluations.
    Client,
    /// The pooled global series only.
    Overall,
}

impl FromStr for GroupBy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept" => Ok(GroupBy::Concept),
            "client" => Ok(GroupBy::Client),
            "overall" => Ok(GroupBy::Overall),
            other => Err(HarnessError::Input(format!(
                "unknown grouping `{other}` (expected concept, client or overall)"
            ))),
        }
    }
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupBy::Concept => "concept",
            GroupBy::Client => "client",
            GroupBy::Overall => "overall",
        })
    }
}

/// `(tick, accuracy)` points with strictly increasing ticks.
pub type Series = Vec<(usize, f64)>;

fn key(r: &MetricRecord, group_by: GroupBy) -> Option<String> {
    match (group_by, r.client, r.concept) {
        (GroupBy::Concept, ClientScope::Global, ConceptScope::Concept(c)) => Some(format!("concept_{c}")),
        (GroupBy::Concept | GroupBy::Overall, ClientScope::Global, ConceptScope::Overall) => {
            Some("overall".into())
        }
        (GroupBy::Client, ClientScope::Client(j), ConceptScope::Overall) if !r.accuracy.is_nan() => {
            Some(format!("client_{j}"))
        }
        _ => None,
    }
}

/// Groups the log into named series. When several records share a tick the
/// last one wins, since it reflects the state at the end of that tick.
pub fn series(log: &MetricsLog, group_by: GroupBy) -> Result<BTreeMap<String, Series>> {
    if log.is_empty() {
        return Err(HarnessError::Input("metrics log has no records".into()));
    }
    let mut out: BTreeMap<String, Series> = BTreeMap::new();
    for r in log.records() {
        let Some(k) = key(r, group_by) else { continue };
        let s = out.entry(k).or_default();
        match s.last_mut() {
            Some(last) if last.0 == r.tick => last.1 = r.accuracy,
            Some(last) if last.0 > r.tick => {
                return Err(HarnessError::Input(format!(
                    "log is not in tick order ({} after {})",
                    r.tick, last.0
                )))
            }
            _ => s.push((r.tick, r.accuracy)),
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Input(format!("log has no records to group by {group_by}")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    InitialTraining,
    Drift,
}

impl fmt::Display for MarkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkerKind::InitialTraining => "initial_training",
            MarkerKind::Drift => "drift",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Marker {
    pub tick: usize,
    pub client: ClientScope,
    pub kind: MarkerKind,
}

/// The first aggregation, followed by every tick at which a client's
/// detection count went up.
pub fn markers(log: &MetricsLog) -> Vec<Marker> {
    let mut out = Vec::new();
    if let Some(first) = log
        .records()
        .iter()
        .find(|r| r.client == ClientScope::Global && r.round >= 1)
    {
        out.push(Marker {
            tick: first.tick,
            client: ClientScope::Global,
            kind: MarkerKind::InitialTraining,
        });
    }
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for r in log.records() {
        if let ClientScope::Client(j) = r.client {
            let prev = seen.entry(j).or_insert(0);
            if r.detections > *prev {
                out.push(Marker { tick: r.tick, client: r.client, kind: MarkerKind::Drift });
                *prev = r.detections;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub series: Vec<PathBuf>,
    pub markers: PathBuf,
}

/// Writes `<stem>_<series>.csv` files and a `<stem>_markers.csv` sidecar into `dir`.
pub fn emit_plot_data(log: &MetricsLog, group_by: GroupBy, dir: &Path, stem: &str) -> Result<PlotFiles> {
    let groups = series(log, group_by)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (name, points) in &groups {
        let path = dir.join(format!("{stem}_{name}.csv"));
        let mut text = String::from("tick,accuracy\n");
        for (t, a) in points {
            text.push_str(&format!("{t},{a}\n"));
        }
        fs::write(&path, text)?;
        files.push(path);
    }
    let path = dir.join(format!("{stem}_markers.csv"));
    let mut text = String::from("tick,client,kind\n");
    for m in markers(log) {
        text.push_str(&format!("{},{},{}\n", m.tick, m.client, m.kind));
    }
    fs::write(&path, text)?;
    Ok(PlotFiles { series: files, markers: path })
}

/// Reads a metrics log file.
pub fn read_log(path: &Path) -> Result<MetricsLog> {
    let file = fs::File::open(path)
        .map_err(|e| HarnessError::Input(format!("cannot open {}: {e}", path.display())))?;
    MetricsLog::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
        cdafed::Error::Parse { line, message, .. } => {
            HarnessError::Input(format!("{}:{line}: {message}", path.display()))
        }
        other => HarnessError::Input(format!("{}: {other}", path.display())),
    })
}
