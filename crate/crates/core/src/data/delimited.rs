use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledInstance, TaggedInstance};
use crate::error::{Error, Result};

/// Column layout of a delimited dataset file.
///
/// The file must start with a header row. Feature columns default to every
/// column not named as label, concept or source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub label_column: String,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_column: Option<String>,
    /// Column naming the user/device each row belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_columns: Option<Vec<String>>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub rows: Vec<TaggedInstance>,
    /// Source name per row when the schema has a source column.
    pub sources: Option<Vec<String>>,
    pub feature_names: Vec<String>,
    pub column_count: usize,
}

impl LoadedDataset {
    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Rows grouped by source, sources ordered by first appearance.
    pub fn by_source(&self) -> Result<Vec<(String, Vec<TaggedInstance>)>> {
        let sources = self
            .sources
            .as_ref()
            .ok_or_else(|| Error::Schema("dataset has no source column".into()))?;
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(String, Vec<TaggedInstance>)> = Vec::new();
        for (row, name) in self.rows.iter().zip(sources) {
            let slot = *index.entry(name).or_insert_with(|| {
                groups.push((name.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[slot].1.push(row.clone());
        }
        Ok(groups)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: Some(PathBuf::from(path)),
        line,
        message: message.into(),
    }
}

/// Reads one instance per row from a delimited file with a header.
pub fn load_delimited(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<LoadedDataset> {
    let path = path.as_ref();
    if !schema.delimiter.is_ascii() {
        return Err(Error::Schema("delimiter must be an ASCII character".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(path, 1, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Schema(format!("{} has no header row", path.display())));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let label_idx = find(&schema.label_column)?;
    let concept_idx = schema.concept_column.as_deref().map(find).transpose()?;
    let source_idx = schema.source_column.as_deref().map(find).transpose()?;
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| Some(*i) != Some(label_idx) && Some(*i) != concept_idx && Some(*i) != source_idx)
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::Schema("schema selects no feature columns".into()));
    }

    let mut rows = Vec::new();
    let mut sources = source_idx.map(|_| Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let features = feature_idx
            .iter()
            .map(|&i| {
                let raw = &record[i];
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, line, format!("column '{}': '{raw}' is not a finite number", &headers[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        let raw_label = &record[label_idx];
        let label: usize = raw_label
            .parse()
            .map_err(|_| parse_err(path, line, format!("label '{raw_label}' is not a class index")))?;
        if label >= schema.class_count {
            return Err(Error::Schema(format!(
                "line {line}: label {label} outside [0, {})",
                schema.class_count
            )));
        }
        let origin_concept = match concept_idx {
            Some(i) => {
                let raw = &record[i];
                raw.parse()
                    .map_err(|_| parse_err(path, line, format!("concept '{raw}' is not an integer")))?
            }
            None => 0,
        };
        if let (Some(i), Some(out)) = (source_idx, sources.as_mut()) {
            out.push(record[i].to_string());
        }
        rows.push(TaggedInstance {
            instance: LabeledInstance { features, label },
            origin_concept,
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema(format!("{} contains no data rows", path.display())));
    }
    log::debug!(
        "loaded {} rows x {} columns from {}",
        rows.len(),
        headers.len(),
        path.display()
    );
    Ok(LoadedDataset {
        rows,
        sources,
        feature_names: feature_idx.iter().map(|&i| headers[i].to_string()).collect(),
        column_count: headers.len(),
    })
}
