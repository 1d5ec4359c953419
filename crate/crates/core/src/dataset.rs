//! Tabular dataset ingestion, attribute datatype inference and the seeded
//! row subset that gets embedded in prompts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of rows sampled into a prompt.
pub const SUBSET_ROWS: usize = 10;

/// Fraction of non-empty values that must parse for a column to take a type.
pub const INFERENCE_THRESHOLD: f64 = 0.95;

const DISTINCT_SAMPLE_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is empty")]
    Empty(String),
    #[error("duplicate column name `{0}`")]
    DuplicateHeader(String),
    #[error("dataset has zero columns")]
    NoColumns,
    #[error("malformed {format} input: {detail}")]
    Malformed { format: &'static str, detail: String },
    #[error("datatype override names unknown attribute `{0}`")]
    UnknownOverride(String),
    #[error("invalid datatype override file {path}: {detail}")]
    BadOverride { path: String, detail: String },
    #[error("unsupported data file extension for {0}")]
    UnsupportedFormat(String),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Datatype {
    Quantitative,
    Nominal,
    Ordinal,
    Temporal,
}

impl Datatype {
    pub const ALL: [Datatype; 4] = [Datatype::Quantitative, Datatype::Nominal, Datatype::Ordinal, Datatype::Temporal];

    /// Vega-Lite `type` keyword for this datatype.
    pub fn vega_lite_type(self) -> &'static str {
        match self {
            Datatype::Quantitative => "quantitative",
            Datatype::Nominal => "nominal",
            Datatype::Ordinal => "ordinal",
            Datatype::Temporal => "temporal",
        }
    }

    pub fn from_vega_lite_type(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.vega_lite_type() == s)
    }
}

impl fmt::Display for Datatype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for Datatype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.vega_lite_type().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown datatype `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub datatype: Datatype,
    pub distinct_sample: Vec<String>,
}

/// One record: attribute name to cell text. Every attribute has a slot.
pub type Row = IndexMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub source: String,
    pub attributes: Vec<Attribute>,
    pub rows: Vec<Row>,
    pub row_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    JsonRecords,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::JsonRecords),
            _ => None,
        }
    }
}

impl Dataset {
    /// Builds a dataset from a header list and raw rows, inferring datatypes.
    pub fn from_columns(
        id: impl Into<String>,
        source: impl Into<String>,
        headers: Vec<String>,
        records: Vec<Vec<String>>,
    ) -> Result<Self, DatasetError> {
        if headers.is_empty() {
            return Err(DatasetError::NoColumns);
        }
        let mut seen = HashSet::new();
        for h in &headers {
            if h.is_empty() {
                return Err(DatasetError::Malformed { format: "tabular", detail: "empty column name".into() });
            }
            if !seen.insert(h.as_str()) {
                return Err(DatasetError::DuplicateHeader(h.clone()));
            }
        }

        let rows: Vec<Row> = records
            .into_iter()
            .map(|mut rec| {
                rec.resize(headers.len(), String::new());
                headers.iter().cloned().zip(rec).collect()
            })
            .collect();

        let attributes = headers
            .iter()
            .map(|name| {
                let column: Vec<&str> = rows.iter().map(|r| r[name.as_str()].as_str()).collect();
                Attribute {
                    name: name.clone(),
                    datatype: infer_datatype(&column),
                    distinct_sample: distinct_sample(&column),
                }
            })
            .collect();

        Ok(Dataset { id: id.into(), source: source.into(), row_count: rows.len(), attributes, rows })
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    /// Applies explicit datatype overrides (the only way to get `Ordinal`).
    pub fn apply_overrides(&mut self, overrides: &BTreeMap<String, Datatype>) -> Result<(), DatasetError> {
        for (name, dt) in overrides {
            let attr = self
                .attributes
                .iter_mut()
                .find(|a| &a.name == name)
                .ok_or_else(|| DatasetError::UnknownOverride(name.clone()))?;
            attr.datatype = *dt;
        }
        Ok(())
    }
}

/// Reads a dataset from disk. The dataset id is the file stem; a sidecar
/// `<stem>.types.toml` next to the file, if present, overrides datatypes.
pub fn ingest(source: impl AsRef<Path>, format: Format) -> Result<Dataset, DatasetError> {
    let path = source.as_ref();
    let locator = path.to_string_lossy().into_owned();
    let bytes = fs::read(path).map_err(|e| DatasetError::Unreadable { path: locator.clone(), source: e })?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| locator.clone());
    let mut dataset = ingest_bytes(&id, &locator, &bytes, format)?;
    if let Some(overrides) = load_overrides(&override_path(path))? {
        dataset.apply_overrides(&overrides)?;
    }
    Ok(dataset)
}

/// Ingests in-memory content (used for uploads).
pub fn ingest_bytes(id: &str, source: &str, bytes: &[u8], format: Format) -> Result<Dataset, DatasetError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(DatasetError::Empty(source.to_string()));
    }
    let (headers, records) = match format {
        Format::Csv => read_csv(bytes)?,
        Format::JsonRecords => read_json_records(bytes)?,
    };
    Dataset::from_columns(id, source, headers, records)
}

fn read_csv(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>), DatasetError> {
    let malformed = |e: csv::Error| DatasetError::Malformed { format: "csv", detail: e.to_string() };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let headers: Vec<String> = reader.headers().map_err(malformed)?.iter().map(|h| h.trim().to_string()).collect();
    if headers.iter().all(String::is_empty) {
        return Err(DatasetError::NoColumns);
    }
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(malformed)?;
        if rec.len() > headers.len() {
            return Err(DatasetError::Malformed {
                format: "csv",
                detail: format!(
                    "record on line {} has {} fields, header has {}",
                    rec.position().map_or(0, |p| p.line()),
                    rec.len(),
                    headers.len()
                ),
            });
        }
        records.push(rec.iter().map(str::to_string).collect());
    }
    Ok((headers, records))
}

fn read_json_records(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>), DatasetError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| DatasetError::Malformed { format: "json", detail: e.to_string() })?;
    let items = value
        .as_array()
        .ok_or_else(|| DatasetError::Malformed { format: "json", detail: "expected an array of objects".into() })?;
    let mut headers: Vec<String> = Vec::new();
    let mut objects = Vec::with_capacity(items.len());
    for item in items {
        let obj = item.as_object().ok_or_else(|| DatasetError::Malformed {
            format: "json",
            detail: "array element is not an object".into(),
        })?;
        for key in obj.keys() {
            if !headers.contains(key) {
                headers.push(key.clone());
            }
        }
        objects.push(obj);
    }
    let records = objects
        .into_iter()
        .map(|obj| {
            headers
                .iter()
                .map(|h| match obj.get(h) {
                    None | Some(serde_json::Value::Null) => String::new(),
                    Some(serde_json::Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                })
                .collect()
        })
        .collect();
    Ok((headers, records))
}

fn override_path(data_path: &Path) -> PathBuf {
    let stem = data_path.file_stem().unwrap_or_default().to_string_lossy();
    data_path.with_file_name(format!("{stem}.types.toml"))
}

fn load_overrides(path: &Path) -> Result<Option<BTreeMap<String, Datatype>>, DatasetError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(DatasetError::Unreadable { path: path.display().to_string(), source: e }),
    };
    let bad = |detail: String| DatasetError::BadOverride { path: path.display().to_string(), detail };
    let table: BTreeMap<String, String> = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
    table
        .into_iter()
        .map(|(k, v)| v.parse::<Datatype>().map(|d| (k, d)).map_err(bad))
        .collect::<Result<_, _>>()
        .map(Some)
}

/// Votes over non-empty values. Temporal is tested before Quantitative so
/// that year-only columns are not swallowed by the numeric rule.
pub fn infer_datatype(values: &[&str]) -> Datatype {
    let non_empty: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if non_empty.is_empty() {
        return Datatype::Nominal;
    }
    let share = |pred: fn(&str) -> bool| non_empty.iter().filter(|v| pred(v)).count() as f64 / non_empty.len() as f64;
    if share(is_temporal) >= INFERENCE_THRESHOLD {
        Datatype::Temporal
    } else if share(is_number) >= INFERENCE_THRESHOLD {
        Datatype::Quantitative
    } else {
        Datatype::Nominal
    }
}

pub fn is_number(v: &str) -> bool {
    v.bytes().any(|b| b.is_ascii_digit()) && v.parse::<f64>().is_ok_and(f64::is_finite)
}

/// ISO-8601 date or datetime, `MM/DD/YYYY`, or a bare four-digit year.
pub fn is_temporal(v: &str) -> bool {
    (v.len() == 4 && v.bytes().all(|b| b.is_ascii_digit()))
        || NaiveDate::parse_from_str(v, "%Y-%m-%d").is_ok()
        || NaiveDate::parse_from_str(v, "%m/%d/%Y").is_ok()
        || NaiveDateTime::parse_from_str(v, "%Y-%m-%dT%H:%M:%S").is_ok()
        || NaiveDateTime::parse_from_str(v, "%Y-%m-%d %H:%M:%S").is_ok()
        || DateTime::parse_from_rfc3339(v).is_ok()
}

fn distinct_sample(values: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()) {
        if !out.iter().any(|o| o == v) {
            out.push(v.to_string());
            if out.len() == DISTINCT_SAMPLE_LEN {
                break;
            }
        }
    }
    out
}

/// The prompt-embeddable surrogate for a dataset: every header, a few rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSubset {
    pub dataset_id: String,
    /// Locator the prompt tells the model to read data from.
    pub source: String,
    pub headers: Vec<String>,
    pub sample_rows: Vec<Row>,
    pub seed: u64,
}

/// Samples `min(10, row_count)` rows without replacement.
///
/// Partial Fisher-Yates over row indices driven by `ChaCha8Rng::seed_from_u64(seed)`:
/// for `i` in `0..k`, swap position `i` with a uniform pick from `i..n`. The
/// chosen indices are then emitted in ascending original order.
pub fn subset(dataset: &Dataset, seed: u64) -> DataSubset {
    let n = dataset.rows.len();
    let k = n.min(SUBSET_ROWS);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen = indices[..k].to_vec();
    chosen.sort_unstable();

    DataSubset {
        dataset_id: dataset.id.clone(),
        source: dataset.source.clone(),
        headers: dataset.attribute_names().map(str::to_string).collect(),
        sample_rows: chosen.into_iter().map(|i| dataset.rows[i].clone()).collect(),
        seed,
    }
}

/// CSV lines for the subset (header first), without the surrounding fence.
pub fn subset_csv(subset: &DataSubset) -> String {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    // Writing into a Vec cannot fail.
    writer.write_record(&subset.headers).expect("in-memory write");
    for row in &subset.sample_rows {
        let fields = subset.headers.iter().map(|h| row.get(h).map_or("", String::as_str));
        writer.write_record(fields).expect("in-memory write");
    }
    let bytes = writer.into_inner().expect("in-memory flush");
    let mut text = String::from_utf8(bytes).expect("utf-8 input yields utf-8 output");
    if text.ends_with('\n') {
        text.pop();
    }
    text
}

/// Fenced CSV block embedded in the prompt.
pub fn render_subset(subset: &DataSubset) -> String {
    format!("```csv\n{}\n```", subset_csv(subset))
}

/// Datasets addressable by id.
#[derive(Debug, Clone, Default)]
pub struct DatasetRegistry {
    datasets: HashMap<String, Arc<Dataset>>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `.csv` / `.json` file in `dir`. Sources are recorded as
    /// bare file names so prompts do not depend on where the directory lives.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let entries =
            fs::read_dir(dir).map_err(|e| DatasetError::Unreadable { path: dir.display().to_string(), source: e })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_file() && Format::from_path(p).is_some())
            .collect();
        paths.sort();
        let mut registry = Self::new();
        for path in paths {
            registry.insert(load_registered(&path)?);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, dataset: Dataset) -> Arc<Dataset> {
        let ds = Arc::new(dataset);
        self.datasets.insert(ds.id.clone(), Arc::clone(&ds));
        ds
    }

    pub fn get(&self, id: &str) -> Result<Arc<Dataset>, DatasetError> {
        self.datasets.get(id).cloned().ok_or_else(|| DatasetError::UnknownDataset(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.datasets.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// Ingests a file with its source recorded as the bare file name.
pub fn load_registered(path: &Path) -> Result<Dataset, DatasetError> {
    let format = Format::from_path(path).ok_or_else(|| DatasetError::UnsupportedFormat(path.display().to_string()))?;
    let mut ds = ingest(path, format)?;
    ds.source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or(ds.source);
    Ok(ds)
}
