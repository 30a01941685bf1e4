//! CSV ingestion under an explicit column schema.
//!
//! Values are kept exactly as read: an empty numeric cell is `None`, and a
//! literal `0` in a `zero_is_missing` column stays `0` in storage but counts
//! as a missing marker everywhere downstream (see [`Column::is_missing`]).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::descriptive::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    BinarySymptom,
    CategoricalGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Feature,
    Target,
    GroupLabel,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
    #[serde(default)]
    pub zero_is_missing: bool,
}

impl ColumnSchema {
    pub fn numeric(name: &str, role: ColumnRole) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Numeric,
            role,
            zero_is_missing: false,
        }
    }

    pub fn with_zero_missing(mut self) -> Self {
        self.zero_is_missing = true;
        self
    }
}

/// Checks per-column schema rules and name uniqueness.
pub fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    if schema.is_empty() {
        return Err(Error::Config("schema has no columns".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in schema {
        if c.name.trim().is_empty() {
            return Err(Error::Config("schema column with empty name".into()));
        }
        if !seen.insert(c.name.trim()) {
            return Err(Error::Schema {
                column: c.name.clone(),
                reason: "duplicate column name in schema".into(),
            });
        }
        if c.zero_is_missing && c.kind != ColumnKind::Numeric {
            return Err(Error::Schema {
                column: c.name.clone(),
                reason: "zero_is_missing is only allowed on numeric columns".into(),
            });
        }
    }
    Ok(())
}

fn count_role(schema: &[ColumnSchema], role: ColumnRole) -> usize {
    schema.iter().filter(|c| c.role == role).count()
}

/// A classification schema needs exactly one target column.
pub fn validate_stage1_schema(schema: &[ColumnSchema]) -> Result<()> {
    validate_schema(schema)?;
    match count_role(schema, ColumnRole::Target) {
        1 => Ok(()),
        n => Err(Error::Config(format!(
            "classification schema needs exactly one target column, found {n}"
        ))),
    }
}

/// A hypothesis-testing schema needs exactly one group-label column.
pub fn validate_stage3_schema(schema: &[ColumnSchema]) -> Result<()> {
    validate_schema(schema)?;
    match count_role(schema, ColumnRole::GroupLabel) {
        1 => Ok(()),
        n => Err(Error::Config(format!(
            "hypothesis schema needs exactly one group_label column, found {n}"
        ))),
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Vec<ColumnSchema>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: Vec<ColumnSchema> = serde_json::from_str(&text)?;
    validate_schema(&schema)?;
    Ok(schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "snake_case")]
pub enum ColumnValues {
    Numeric(Vec<Option<f64>>),
    Text(Vec<String>),
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Numeric(v) => v.len(),
            ColumnValues::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            ColumnValues::Numeric(v) => ColumnValues::Numeric(idx.iter().map(|&i| v[i]).collect()),
            ColumnValues::Text(v) => ColumnValues::Text(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub schema: ColumnSchema,
    pub values: ColumnValues,
}

impl Column {
    /// Empty cell, or a literal zero in a `zero_is_missing` column.
    pub fn is_missing(&self, row: usize) -> bool {
        match &self.values {
            ColumnValues::Numeric(v) => match v[row] {
                None => true,
                Some(x) => self.schema.zero_is_missing && x == 0.0,
            },
            ColumnValues::Text(v) => v[row].trim().is_empty(),
        }
    }

    /// Numeric values with every missing marker mapped to `None`.
    pub fn observed(&self) -> Option<Vec<Option<f64>>> {
        match &self.values {
            ColumnValues::Numeric(v) => Some(
                (0..v.len())
                    .map(|i| if self.is_missing(i) { None } else { v[i] })
                    .collect(),
            ),
            ColumnValues::Text(_) => None,
        }
    }

    pub fn numeric(&self) -> Option<&[Option<f64>]> {
        match &self.values {
            ColumnValues::Numeric(v) => Some(v),
            ColumnValues::Text(_) => None,
        }
    }

    pub fn text(&self) -> Option<&[String]> {
        match &self.values {
            ColumnValues::Text(v) => Some(v),
            ColumnValues::Numeric(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    pub row_filter_log: Vec<String>,
}

/// Column-major table with a per-column schema. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    columns: Vec<Column>,
    n_rows: usize,
    provenance: Provenance,
}

impl TabularDataset {
    pub fn new(columns: Vec<Column>, provenance: Provenance) -> Result<Self> {
        let n_rows = columns.first().map_or(0, |c| c.values.len());
        if n_rows == 0 {
            return Err(Error::Dataset("dataset has no rows".into()));
        }
        let schema: Vec<ColumnSchema> = columns.iter().map(|c| c.schema.clone()).collect();
        validate_schema(&schema)?;
        for c in &columns {
            if c.values.len() != n_rows {
                return Err(Error::Dataset(format!(
                    "column \"{}\" has {} rows, expected {n_rows}",
                    c.schema.name,
                    c.values.len()
                )));
            }
            let text_kind = c.schema.kind == ColumnKind::CategoricalGroup;
            match (&c.values, text_kind) {
                (ColumnValues::Text(_), true) | (ColumnValues::Numeric(_), false) => {}
                // binary symptoms are text until encoded
                (ColumnValues::Text(_), false) if c.schema.kind == ColumnKind::BinarySymptom => {}
                _ => {
                    return Err(Error::Dataset(format!(
                        "column \"{}\" storage does not match its kind",
                        c.schema.name
                    )))
                }
            }
            if let (ColumnKind::BinarySymptom, ColumnValues::Numeric(v)) = (c.schema.kind, &c.values) {
                if v.iter().any(|x| !matches!(x, Some(b) if *b == 0.0 || *b == 1.0)) {
                    return Err(Error::Dataset(format!(
                        "binary column \"{}\" holds values outside {{0, 1}}",
                        c.schema.name
                    )));
                }
            }
        }
        Ok(Self {
            columns,
            n_rows,
            provenance,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn schema(&self) -> Vec<ColumnSchema> {
        self.columns.iter().map(|c| c.schema.clone()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.schema.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Column> {
        self.column(name).ok_or_else(|| Error::Schema {
            column: name.to_string(),
            reason: "column not present in dataset".into(),
        })
    }

    pub fn names_with_role(&self, role: ColumnRole) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.schema.role == role)
            .map(|c| c.schema.name.clone())
            .collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.names_with_role(ColumnRole::Feature)
    }

    pub fn target_name(&self) -> Result<String> {
        let t = self.names_with_role(ColumnRole::Target);
        match t.as_slice() {
            [one] => Ok(one.clone()),
            _ => Err(Error::Config(format!(
                "expected exactly one target column, found {}",
                t.len()
            ))),
        }
    }

    /// Binary labels of the target column.
    pub fn target_labels(&self) -> Result<Vec<u8>> {
        let name = self.target_name()?;
        let col = self.require(&name)?;
        let values = col.numeric().ok_or_else(|| Error::Schema {
            column: name.clone(),
            reason: "target must be numeric".into(),
        })?;
        values
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(x) if *x == 0.0 => Ok(0),
                Some(x) if *x == 1.0 => Ok(1),
                _ => Err(Error::Dataset(format!(
                    "target \"{name}\" row {} is not a 0/1 label",
                    i + 1
                ))),
            })
            .collect()
    }

    /// Numeric matrix of the named columns; missing markers become NaN.
    pub fn feature_matrix(&self, names: &[String]) -> Result<Matrix> {
        let mut cols = Vec::with_capacity(names.len());
        for name in names {
            let col = self.require(name)?;
            let observed = col.observed().ok_or_else(|| Error::Schema {
                column: name.clone(),
                reason: "column is not numeric (encode binary symptoms first)".into(),
            })?;
            cols.push(observed.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect::<Vec<_>>());
        }
        if cols.is_empty() {
            return Matrix::new(self.n_rows, 0, Vec::new());
        }
        Matrix::from_columns(&cols)
    }

    /// Subset of rows in the given order, with a provenance note.
    pub fn select_rows(&self, idx: &[usize], note: impl Into<String>) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_rows) {
            return Err(Error::contract(format!("row index {bad} out of range")));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                schema: c.schema.clone(),
                values: c.values.select(idx),
            })
            .collect();
        let mut provenance = self.provenance.clone();
        provenance.row_filter_log.push(note.into());
        Self::new(columns, provenance)
    }

    /// Replaces one column's values; storage kind must not change.
    pub fn with_column_values(&self, name: &str, values: ColumnValues) -> Result<Self> {
        let mut columns = self.columns.clone();
        let col = columns
            .iter_mut()
            .find(|c| c.schema.name == name)
            .ok_or_else(|| Error::Schema {
                column: name.to_string(),
                reason: "column not present in dataset".into(),
            })?;
        col.values = values;
        Self::new(columns, self.provenance.clone())
    }

    pub(crate) fn with_columns(&self, columns: Vec<Column>) -> Result<Self> {
        Self::new(columns, self.provenance.clone())
    }
}

/// Reads a CSV file and orders its columns by `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &[ColumnSchema]) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, Some(path.to_path_buf()))
}

pub fn read_csv<R: Read>(
    reader: R,
    schema: &[ColumnSchema],
    source: Option<PathBuf>,
) -> Result<TabularDataset> {
    validate_schema(schema)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let mut positions = Vec::with_capacity(schema.len());
    for col in schema {
        let name = col.name.trim();
        let pos = headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            column: col.name.clone(),
            reason: "missing from CSV header".into(),
        })?;
        positions.push(pos);
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); schema.len()];
    for record in rdr.records() {
        let record = record?;
        for (slot, &pos) in raw.iter_mut().zip(&positions) {
            slot.push(record.get(pos).unwrap_or("").to_string());
        }
    }

    let mut columns = Vec::with_capacity(schema.len());
    for (col, cells) in schema.iter().zip(raw) {
        let values = match col.kind {
            ColumnKind::Numeric => ColumnValues::Numeric(
                cells
                    .iter()
                    .enumerate()
                    .map(|(i, cell)| parse_numeric(cell, i + 1, &col.name))
                    .collect::<Result<_>>()?,
            ),
            ColumnKind::BinarySymptom | ColumnKind::CategoricalGroup => {
                ColumnValues::Text(cells.into_iter().map(|c| c.trim().to_string()).collect())
            }
        };
        columns.push(Column {
            schema: col.clone(),
            values,
        });
    }
    let provenance = Provenance {
        source,
        row_filter_log: Vec::new(),
    };
    TabularDataset::new(columns, provenance)
}

fn parse_numeric(cell: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let t = cell.trim();
    if t.is_empty() {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Parse {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

/// Writes the dataset in schema order; `None` cells are written empty.
pub fn write_csv<W: Write>(dataset: &TabularDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset.columns.iter().map(|c| c.schema.name.as_str()))?;
    for i in 0..dataset.n_rows {
        let row: Vec<String> = dataset
            .columns
            .iter()
            .map(|c| match &c.values {
                ColumnValues::Numeric(v) => v[i].map(|x| x.to_string()).unwrap_or_default(),
                ColumnValues::Text(v) => v[i].clone(),
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(dataset: &TabularDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(dataset, file)
}

/// Maps Yes/No/1/0 tokens (case-insensitive) in binary-symptom columns to 1/0.
pub fn encode_binary(dataset: &TabularDataset) -> Result<TabularDataset> {
    let mut columns = dataset.columns.clone();
    for col in columns.iter_mut().filter(|c| c.schema.kind == ColumnKind::BinarySymptom) {
        if let ColumnValues::Text(cells) = &col.values {
            let encoded = cells
                .iter()
                .map(|cell| match cell.trim().to_ascii_lowercase().as_str() {
                    "yes" | "1" => Ok(Some(1.0)),
                    "no" | "0" => Ok(Some(0.0)),
                    _ => Err(Error::Encoding {
                        column: col.schema.name.clone(),
                        token: cell.clone(),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            col.values = ColumnValues::Numeric(encoded);
        }
    }
    dataset.with_columns(columns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
    /// Non-missing cells.
    pub count: usize,
    pub missing: usize,
    pub min: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_rows: usize,
    pub columns: Vec<ColumnSummary>,
    /// Fraction of rows per target label.
    pub class_balance: Option<BTreeMap<String, f64>>,
}

pub fn summarize(dataset: &TabularDataset) -> DatasetSummary {
    let columns = dataset
        .columns
        .iter()
        .map(|c| {
            let missing = (0..dataset.n_rows).filter(|&i| c.is_missing(i)).count();
            let mut s = ColumnSummary {
                name: c.schema.name.clone(),
                kind: c.schema.kind,
                role: c.schema.role,
                count: dataset.n_rows - missing,
                missing,
                min: None,
                median: None,
                max: None,
                levels: None,
            };
            match c.observed() {
                Some(obs) => {
                    let vals: Vec<f64> = obs.into_iter().flatten().collect();
                    if !vals.is_empty() {
                        s.min = vals.iter().copied().reduce(f64::min);
                        s.max = vals.iter().copied().reduce(f64::max);
                        s.median = Some(median(&vals));
                    }
                }
                None => {
                    let mut levels = BTreeMap::new();
                    for v in c.text().unwrap_or_default() {
                        if !v.trim().is_empty() {
                            *levels.entry(v.clone()).or_insert(0) += 1;
                        }
                    }
                    s.levels = Some(levels);
                }
            }
            s
        })
        .collect();

    let class_balance = dataset.target_name().ok().and_then(|name| {
        let col = dataset.column(&name)?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        match &col.values {
            ColumnValues::Numeric(v) => {
                for x in v.iter().flatten() {
                    *counts.entry(x.to_string()).or_insert(0) += 1;
                }
            }
            ColumnValues::Text(v) => {
                for x in v {
                    *counts.entry(x.clone()).or_insert(0) += 1;
                }
            }
        }
        let total: usize = counts.values().sum();
        (total > 0).then(|| {
            counts
                .into_iter()
                .map(|(k, c)| (k, c as f64 / total as f64))
                .collect()
        })
    });

    DatasetSummary {
        n_rows: dataset.n_rows,
        columns,
        class_balance,
    }
}
