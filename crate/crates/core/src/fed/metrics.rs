//! Line-delimited evaluation log shared by both engines.
//!
//! Field order is fixed so that logs from identical runs can be compared
//! byte for byte:
//!
//! ```text
//! tick,round,algorithm,client,concept,accuracy,comms_sent,comms_received,detections
//! ```

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str =
    "tick,round,algorithm,client,concept,accuracy,comms_sent,comms_received,detections";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    CdaFedavg,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::CdaFedavg => "cda_fedavg",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::Fedavg),
            "cda_fedavg" => Ok(Algorithm::CdaFedavg),
            other => Err(Error::Input(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Whose parameters were evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClientScope {
    Global,
    Client(usize),
}

impl fmt::Display for ClientScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientScope::Global => f.write_str("global"),
            ClientScope::Client(id) => write!(f, "{id}"),
        }
    }
}

impl FromStr for ClientScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(ClientScope::Global);
        }
        s.parse()
            .map(ClientScope::Client)
            .map_err(|_| Error::Input(format!("bad client field `{s}`")))
    }
}

/// Which test split was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConceptScope {
    Concept(usize),
    Overall,
}

impl fmt::Display for ConceptScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConceptScope::Overall => f.write_str("overall"),
            ConceptScope::Concept(id) => write!(f, "{id}"),
        }
    }
}

impl FromStr for ConceptScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "overall" {
            return Ok(ConceptScope::Overall);
        }
        s.parse()
            .map(ConceptScope::Concept)
            .map_err(|_| Error::Input(format!("bad concept field `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub tick: usize,
    pub round: usize,
    pub algorithm: Algorithm,
    pub client: ClientScope,
    pub concept: ConceptScope,
    pub accuracy: f64,
    pub comms_sent: u64,
    pub comms_received: u64,
    /// Detections so far: the client's own count, or the sum over clients
    /// for global records.
    pub detections: usize,
}

impl MetricRecord {
    fn write_line<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        // `{}` on f64 prints the shortest string that parses back to the same bits
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            self.tick,
            self.round,
            self.algorithm,
            self.client,
            self.concept,
            self.accuracy,
            self.comms_sent,
            self.comms_received,
            self.detections
        )
    }

    fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let bad = |message: String| Error::Parse {
            path: None,
            line: lineno,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(bad(format!("expected 9 fields, found {}", fields.len())));
        }
        let int = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .map_err(|_| bad(format!("field {} is not an integer: `{}`", i + 1, fields[i])))
        };
        let accuracy: f64 = fields[5]
            .parse()
            .map_err(|_| bad(format!("accuracy is not a number: `{}`", fields[5])))?;
        Ok(Self {
            tick: int(0)? as usize,
            round: int(1)? as usize,
            algorithm: fields[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            client: fields[3].parse().map_err(|e: Error| bad(e.to_string()))?,
            concept: fields[4].parse().map_err(|e: Error| bad(e.to_string()))?,
            accuracy,
            comms_sent: int(6)?,
            comms_received: int(7)?,
            detections: int(8)? as usize,
        })
    }
}

/// Append-only list of evaluation records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Global records for one test split, in log order.
    pub fn global_series(&self, concept: ConceptScope) -> impl Iterator<Item = &MetricRecord> {
        self.records
            .iter()
            .filter(move |r| r.client == ClientScope::Global && r.concept == concept)
    }

    /// Last global record for a test split.
    pub fn final_accuracy(&self, concept: ConceptScope) -> Option<f64> {
        self.global_series(concept).last().map(|r| r.accuracy)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        for r in &self.records {
            r.write_line(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("log is ASCII")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next().transpose()? {
            Some(first) if first.trim_end() == HEADER => {}
            Some(_) => {
                return Err(Error::Parse {
                    path: None,
                    line: 1,
                    message: "missing metrics header".into(),
                })
            }
            None => return Err(Error::Input("metrics log is empty".into())),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            records.push(MetricRecord::parse_line(line, i + 2)?);
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(tick: usize, client: ClientScope, concept: ConceptScope, acc: f64) -> MetricRecord {
        MetricRecord {
            tick,
            round: 3,
            algorithm: Algorithm::CdaFedavg,
            client,
            concept,
            accuracy: acc,
            comms_sent: 10,
            comms_received: 2,
            detections: 1,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut log = MetricsLog::new();
        log.push(rec(5, ClientScope::Global, ConceptScope::Overall, 0.1 + 0.2));
        log.push(rec(7, ClientScope::Client(4), ConceptScope::Concept(2), 1.0 / 3.0));
        let text = log.to_csv_string();
        assert!(text.starts_with(HEADER));
        let back = MetricsLog::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(MetricsLog::read_from("".as_bytes()), Err(Error::Input(_))));
        let text = format!("{HEADER}\n1,2,fedavg,global,overall,abc,0,0,0\n");
        match MetricsLog::read_from(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = format!("{HEADER}\n1,2,sgd,global,overall,0.5,0,0,0\n");
        assert!(MetricsLog::read_from(text.as_bytes()).is_err());
    }

    #[test]
    fn series_filters_global_records() {
        let mut log = MetricsLog::new();
        log.push(rec(1, ClientScope::Global, ConceptScope::Concept(0), 0.5));
        log.push(rec(1, ClientScope::Client(0), ConceptScope::Concept(0), 0.9));
        log.push(rec(2, ClientScope::Global, ConceptScope::Concept(0), 0.6));
        let ticks: Vec<_> = log.global_series(ConceptScope::Concept(0)).map(|r| r.tick).collect();
        assert_eq!(ticks, [1, 2]);
        assert_eq!(log.final_accuracy(ConceptScope::Concept(0)), Some(0.6));
        assert_eq!(log.final_accuracy(ConceptScope::Overall), None);
    }
}
