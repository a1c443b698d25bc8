//! Loading of the pre-split molecule table and of the model's prediction files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["id", "smiles", "description", "label", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClassification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RocAuc,
    Rmse,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::RocAuc => f.write_str("ROC-AUC"),
            Metric::Rmse => f.write_str("RMSE"),
        }
    }
}

/// Task type; the metric is determined by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    kind: TaskKind,
}

impl TaskSpec {
    pub const fn classification() -> Self {
        Self {
            kind: TaskKind::BinaryClassification,
        }
    }

    pub const fn regression() -> Self {
        Self {
            kind: TaskKind::Regression,
        }
    }

    pub fn new(kind: TaskKind) -> Self {
        Self { kind }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn metric(&self) -> Metric {
        match self.kind {
            TaskKind::BinaryClassification => Metric::RocAuc,
            TaskKind::Regression => Metric::Rmse,
        }
    }

    pub fn is_classification(&self) -> bool {
        self.kind == TaskKind::BinaryClassification
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classification" | "binary_classification" | "binary" => Ok(Self::classification()),
            "regression" => Ok(Self::regression()),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    pub id: String,
    pub smiles: String,
    pub description: Option<String>,
    pub split: Split,
    pub label: Option<f64>,
}

impl MoleculeRecord {
    /// Description text, if present and nonempty.
    pub fn description(&self) -> Option<&str> {
        self.description.as_deref().filter(|d| !d.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub task: TaskSpec,
    pub records: Vec<MoleculeRecord>,
    counts: BTreeMap<Split, usize>,
}

impl DatasetBundle {
    /// Validates records and builds the bundle.
    pub fn new(task: TaskSpec, records: Vec<MoleculeRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut counts = BTreeMap::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.smiles.is_empty() {
                return Err(Error::EmptySmiles(r.id.clone()));
            }
            match r.label {
                None if r.split != Split::Test => return Err(Error::MissingLabel(r.id.clone())),
                Some(y) if task.is_classification() && y != 0.0 && y != 1.0 => {
                    return Err(Error::InvalidLabel {
                        id: r.id.clone(),
                        value: y,
                    })
                }
                _ => {}
            }
            *counts.entry(r.split).or_insert(0) += 1;
        }
        Ok(Self { task, records, counts })
    }

    pub fn count(&self, split: Split) -> usize {
        self.counts.get(&split).copied().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MoleculeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&MoleculeRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Whether every record of `split` carries a label.
    pub fn has_labels(&self, split: Split) -> bool {
        self.split(split).all(|r| r.label.is_some())
    }

    /// Writes the bundle in the molecule CSV format.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map_err = |e: csv::Error| Error::format("<csv writer>", e.to_string());
        w.write_record(CSV_HEADER).map_err(map_err)?;
        for r in &self.records {
            let label = r.label.map(|y| y.to_string()).unwrap_or_default();
            w.write_record([
                r.id.as_str(),
                r.smiles.as_str(),
                r.description.as_deref().unwrap_or(""),
                label.as_str(),
                r.split.as_str(),
            ])
            .map_err(map_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Loads a molecule CSV file.
pub fn load_molecules(path: impl AsRef<Path>, task: TaskSpec) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_molecules(file, task).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

pub fn read_molecules<R: Read>(input: R, task: TaskSpec) -> Result<DatasetBundle> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::format("<csv>", e.to_string()))?
        .clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::BadHeader {
            found: header.iter().collect::<Vec<_>>().join(","),
            expected: CSV_HEADER.join(","),
        });
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::format("<csv>", e.to_string()))?;
        let field = |n: usize| row.get(n).unwrap_or("");
        let split = field(4)
            .parse::<Split>()
            .map_err(|token| Error::UnknownSplit { line, token })?;
        let label = match field(3).trim() {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|_| Error::format("<csv>", format!("line {line}: bad label {s:?}")))?,
            ),
        };
        let description = match field(2) {
            "" => None,
            d => Some(d.to_string()),
        };
        records.push(MoleculeRecord {
            id: field(0).to_string(),
            smiles: field(1).to_string(),
            description,
            split,
            label,
        });
    }
    DatasetBundle::new(task, records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub split: Split,
    pub entries: HashMap<String, f64>,
}

impl PredictionSet {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.entries.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds a prediction set from in-memory values with the same checks as
    /// [`load_predictions`].
    pub fn from_pairs(
        bundle: &DatasetBundle,
        split: Split,
        pairs: impl IntoIterator<Item = (String, f64)>,
    ) -> Result<Self> {
        let mut entries = HashMap::new();
        for (id, value) in pairs {
            let record = bundle.get(&id).ok_or_else(|| Error::UnknownPredictionId(id.clone()))?;
            if record.split != split {
                return Err(Error::SplitMismatch {
                    id,
                    expected: split.to_string(),
                    actual: record.split.to_string(),
                });
            }
            if bundle.task.is_classification() && !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRangeProbability { id, value });
            }
            if !value.is_finite() {
                return Err(Error::format("<predictions>", format!("non-finite value for {id:?}")));
            }
            if entries.insert(id.clone(), value).is_some() {
                return Err(Error::DuplicatePrediction(id));
            }
        }
        if let Some(missing) = bundle.split(split).find(|r| !entries.contains_key(&r.id)) {
            return Err(Error::MissingPrediction(missing.id.clone()));
        }
        Ok(Self { split, entries })
    }

    /// Writes one JSON object per line in dataset order.
    pub fn write_jsonl<W: Write>(&self, bundle: &DatasetBundle, mut out: W) -> std::io::Result<()> {
        for r in bundle.split(self.split) {
            if let Some(p) = self.get(&r.id) {
                let line = serde_json::json!({ "id": r.id, "prediction": p });
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    prediction: f64,
}

pub fn load_predictions(path: impl AsRef<Path>, bundle: &DatasetBundle, split: Split) -> Result<PredictionSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(BufReader::new(file), bundle, split).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

pub fn read_predictions<R: BufRead>(input: R, bundle: &DatasetBundle, split: Split) -> Result<PredictionSet> {
    if split == Split::Train {
        return Err(Error::Config(
            "predictions are only read for valid or test splits".into(),
        ));
    }
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<predictions>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::format("<predictions>", format!("line {}: {e}", i + 1)))?;
        pairs.push((parsed.id, parsed.prediction));
    }
    PredictionSet::from_pairs(bundle, split, pairs)
}
