//! Immutable tabular data: loading, profiling, ground truth, folds and prompt
//! serialization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{TaskKind, TaskSpec};

/// Tokens read as NULL when no explicit set is given.
pub const DEFAULT_NULL_TOKENS: [&str; 5] = ["", "NA", "N/A", "null", "NaN"];

/// Label column name used in detection ground truth.
pub const LABEL_YES: &str = "Yes";
pub const LABEL_NO: &str = "No";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: expected {expected} cells, found {found}")]
    Ragged {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("empty column name at position {0}")]
    EmptyColumnName(usize),
    #[error("row {row} has {found} cells, table has {expected} columns")]
    RowWidth {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("missing header row")]
    NoHeader,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("table is empty")]
    Empty,
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("detection requires an annotation table")]
    MissingAnnotations,
    #[error("annotation table must have `row_id` and `label` columns")]
    AnnotationShape,
    #[error("annotation label `{0}` is not Yes or No")]
    BadLabel(String),
    #[error("annotation row_id `{0}` does not reference a dataset row")]
    BadRowId(String),
    #[error("k must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("{rows} rows cannot fill {k} folds")]
    TooFewRows { rows: usize, k: usize },
}

pub type Cell = Option<String>;

/// A named grid of nullable string cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    name: String,
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(
        name: impl Into<String>,
        columns: Vec<String>,
        rows: Vec<Vec<Cell>>,
    ) -> Result<Self, TableError> {
        let mut seen = HashSet::new();
        for (i, c) in columns.iter().enumerate() {
            if c.is_empty() {
                return Err(TableError::EmptyColumnName(i));
            }
            if !seen.insert(c.as_str()) {
                return Err(TableError::DuplicateColumn(c.clone()));
            }
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(TableError::RowWidth {
                    row: i,
                    expected: columns.len(),
                    found: r.len(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            columns,
            rows,
        })
    }

    /// Builds a table from string literals; `None` cells are NULL.
    pub fn from_strs(
        name: &str,
        columns: &[&str],
        rows: &[Vec<Option<&str>>],
    ) -> Result<Self, TableError> {
        Self::new(
            name,
            columns.iter().map(|c| c.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|c| c.map(str::to_string)).collect())
                .collect(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        &self.rows[i]
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn require_column(&self, name: &str) -> Result<usize, TableError> {
        self.column_index(name)
            .ok_or_else(|| TableError::UnknownColumn(name.to_string()))
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.column_index(column)?;
        self.rows.get(row)?.get(c)?.as_deref()
    }

    pub fn column_values(&self, col: usize) -> impl Iterator<Item = Option<&str>> + '_ {
        self.rows.iter().map(move |r| r[col].as_deref())
    }

    /// A row as a column-name → value map.
    pub fn row_map(&self, i: usize) -> BTreeMap<String, Cell> {
        self.columns
            .iter()
            .cloned()
            .zip(self.rows[i].iter().cloned())
            .collect()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// New table restricted to the given columns, in the given order.
    pub fn project(&self, columns: &[String]) -> Result<Table, TableError> {
        let idx = columns
            .iter()
            .map(|c| self.require_column(c))
            .collect::<Result<Vec<_>, _>>()?;
        let rows = self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
            .collect();
        Table::new(self.name.clone(), columns.to_vec(), rows)
    }

    /// New table with the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Table {
        Table {
            name: self.name.clone(),
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Copy with one column's cells replaced.
    pub fn with_column_values(&self, col: usize, values: Vec<Cell>) -> Table {
        assert_eq!(values.len(), self.rows.len());
        let mut out = self.clone();
        for (r, v) in out.rows.iter_mut().zip(values) {
            r[col] = v;
        }
        out
    }

    /// Copy with a new trailing column.
    pub fn with_appended_column(
        &self,
        name: &str,
        values: Vec<Cell>,
    ) -> Result<Table, TableError> {
        assert_eq!(values.len(), self.rows.len());
        let mut columns = self.columns.clone();
        columns.push(name.to_string());
        let rows = self
            .rows
            .iter()
            .zip(values)
            .map(|(r, v)| {
                let mut r = r.clone();
                r.push(v);
                r
            })
            .collect();
        Table::new(self.name.clone(), columns, rows)
    }
}

/// Loads a CSV file with a header row. The delimiter is detected from the
/// first line among `,`, `;` and tab.
pub fn load_table(path: &Path, null_tokens: &[&str]) -> Result<Table, TableError> {
    let bytes = std::fs::read(path).map_err(|source| TableError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| TableError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_table(&name, &text, null_tokens)
}

/// Parses CSV text; see [`load_table`].
pub fn parse_table(name: &str, text: &str, null_tokens: &[&str]) -> Result<Table, TableError> {
    let first_line = text.lines().next().ok_or(TableError::NoHeader)?;
    let delimiter = detect_delimiter(first_line);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records.next().ok_or(TableError::NoHeader)??;
    let columns: Vec<String> = header.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in records {
        let record = record?;
        if record.len() != columns.len() {
            return Err(TableError::Ragged {
                line: record.position().map(|p| p.line()).unwrap_or(0),
                expected: columns.len(),
                found: record.len(),
            });
        }
        rows.push(
            record
                .iter()
                .map(|c| {
                    if null_tokens.contains(&c.trim()) {
                        None
                    } else {
                        Some(c.to_string())
                    }
                })
                .collect(),
        );
    }
    Table::new(name, columns, rows)
}

fn detect_delimiter(first_line: &str) -> u8 {
    let mut best = (b',', 0usize);
    for d in [b',', b';', b'\t'] {
        let n = first_line.bytes().filter(|&b| b == d).count();
        if n > best.1 {
            best = (d, n);
        }
    }
    best.0
}

/// Serializes as comma-delimited CSV; NULL cells are written empty.
pub fn table_to_csv(t: &Table) -> Result<String, TableError> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(t.columns())?;
    for r in t.rows() {
        w.write_record(r.iter().map(|c| c.as_deref().unwrap_or("")))?;
    }
    let bytes = w.into_inner().map_err(|e| TableError::Io {
        path: t.name().to_string(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8 from utf-8 input"))
}

pub fn write_table(t: &Table, path: &Path) -> Result<(), TableError> {
    let text = table_to_csv(t)?;
    std::fs::write(path, text).map_err(|source| TableError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Text,
    Datetime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnProfile {
    pub name: String,
    pub inferred_kind: ColumnKind,
    pub null_fraction: f64,
    pub distinct_count: usize,
}

const KIND_MAJORITY: f64 = 0.95;

pub fn profile_columns(t: &Table) -> Result<Vec<ColumnProfile>, TableError> {
    if t.row_count() == 0 {
        return Err(TableError::Empty);
    }
    Ok((0..t.columns().len())
        .map(|c| profile_column(&t.columns()[c], t.column_values(c), t.row_count()))
        .collect())
}

fn profile_column<'a>(
    name: &str,
    values: impl Iterator<Item = Option<&'a str>>,
    row_count: usize,
) -> ColumnProfile {
    let mut nulls = 0usize;
    let mut non_null = 0usize;
    let mut numeric = 0usize;
    let mut temporal = 0usize;
    let mut distinct = HashSet::new();
    for v in values {
        match v {
            None => nulls += 1,
            Some(s) => {
                non_null += 1;
                if parse_number(s).is_some() {
                    numeric += 1;
                }
                if parse_temporal(s).is_some() {
                    temporal += 1;
                }
                distinct.insert(s);
            }
        }
    }
    let share = |n: usize| non_null > 0 && n as f64 >= KIND_MAJORITY * non_null as f64;
    let categorical_cap = 20f64.max(0.05 * row_count as f64);
    let inferred_kind = if share(numeric) {
        ColumnKind::Numeric
    } else if share(temporal) {
        ColumnKind::Datetime
    } else if distinct.len() as f64 <= categorical_cap {
        ColumnKind::Categorical
    } else {
        ColumnKind::Text
    };
    ColumnProfile {
        name: name.to_string(),
        inferred_kind,
        null_fraction: nulls as f64 / row_count as f64,
        distinct_count: distinct.len(),
    }
}

/// Decimal number: optional sign, digits with optional fraction, optional exponent.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let mantissa = body.split(['e', 'E']).next().unwrap_or("");
    let valid_start = mantissa
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_digit() || c == '.');
    if !valid_start || !mantissa.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Seconds since the Unix epoch for ISO-8601 dates/datetimes, or minutes
/// since midnight for `HH:MM` / `HH:MM:SS` clock times.
pub fn parse_temporal(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(t) = NaiveTime::parse_from_str(s, "%H:%M") {
        return Some(minutes_since_midnight(t));
    }
    if let Ok(t) = NaiveTime::parse_from_str(s, "%H:%M:%S") {
        return Some(minutes_since_midnight(t));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp() as f64);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp() as f64)
}

fn minutes_since_midnight(t: NaiveTime) -> f64 {
    use chrono::Timelike;
    t.num_seconds_from_midnight() as f64 / 60.0
}

/// Rows usable for generating and validating snippets, with their expected
/// outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Ground-truth rows with the dataset's columns.
    pub table: Table,
    /// Index of each ground-truth row in the source dataset.
    pub source_rows: Vec<usize>,
    /// Expected snippet output per row: the target value, or Yes/No for detection.
    pub truth: Vec<String>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> GroundTruth {
        GroundTruth {
            table: self.table.select_rows(indices),
            source_rows: indices.iter().map(|&i| self.source_rows[i]).collect(),
            truth: indices.iter().map(|&i| self.truth[i].clone()).collect(),
        }
    }
}

/// Builds ground truth. Imputation and correction use the rows whose target
/// is non-NULL; detection uses an annotation table with `row_id` (0-based
/// dataset row) and `label` (`Yes`/`No`) columns.
pub fn ground_truth(
    t: &Table,
    spec: &TaskSpec,
    annotations: Option<&Table>,
) -> Result<GroundTruth, TableError> {
    let target = t.require_column(&spec.target)?;
    let (source_rows, truth): (Vec<usize>, Vec<String>) = match spec.task_kind {
        TaskKind::Impute | TaskKind::Correct => t
            .rows()
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r[target].clone().map(|v| (i, v)))
            .unzip(),
        TaskKind::Detect => {
            let ann = annotations.ok_or(TableError::MissingAnnotations)?;
            let (id_col, label_col) = match (ann.column_index("row_id"), ann.column_index("label"))
            {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(TableError::AnnotationShape),
            };
            let mut pairs = Vec::with_capacity(ann.row_count());
            for r in ann.rows() {
                let raw_id = r[id_col].clone().unwrap_or_default();
                let id: usize = raw_id
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&i| i < t.row_count())
                    .ok_or(TableError::BadRowId(raw_id.clone()))?;
                let label = r[label_col].clone().unwrap_or_default();
                let label = label.trim();
                if label != LABEL_YES && label != LABEL_NO {
                    return Err(TableError::BadLabel(label.to_string()));
                }
                pairs.push((id, label.to_string()));
            }
            pairs.into_iter().unzip()
        }
    };
    if source_rows.is_empty() {
        return Err(TableError::EmptyGroundTruth);
    }
    Ok(GroundTruth {
        table: t.select_rows(&source_rows),
        source_rows,
        truth,
    })
}

/// Assignment of rows to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn holdout(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle, then round-robin assignment.
pub fn make_folds(row_count: usize, k: usize, seed: u64) -> Result<FoldPlan, TableError> {
    if k < 2 {
        return Err(TableError::TooFewFolds(k));
    }
    if row_count < k {
        return Err(TableError::TooFewRows { rows: row_count, k });
    }
    let mut order: Vec<usize> = (0..row_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; row_count];
    for (pos, &row) in order.iter().enumerate() {
        assignments[row] = pos % k;
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

/// Renders rows one per line with cells joined by `;`. NULL renders empty;
/// cells containing `;`, `"` or a newline are double-quoted.
pub fn format_rows(t: &Table, row_indices: &[usize], include_header: bool) -> String {
    let mut lines = Vec::with_capacity(row_indices.len() + 1);
    if include_header {
        lines.push(join_cells(t.columns().iter().map(|c| Some(c.as_str()))));
    }
    for &i in row_indices {
        lines.push(join_cells(t.row(i).iter().map(|c| c.as_deref())));
    }
    lines.join("\n")
}

fn join_cells<'a>(cells: impl Iterator<Item = Option<&'a str>>) -> String {
    cells
        .map(|c| quote_cell(c.unwrap_or("")))
        .collect::<Vec<_>>()
        .join(";")
}

fn quote_cell(c: &str) -> String {
    if c.contains([';', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

/// Counts distinct non-null values per column, ordered by count then value.
pub(crate) fn value_frequencies<'a>(
    values: impl Iterator<Item = Option<&'a str>>,
) -> Vec<(&'a str, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for v in values.flatten() {
        *counts.entry(v).or_default() += 1;
    }
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    out
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let all: Vec<usize> = (0..self.row_count()).collect();
        f.write_str(&format_rows(self, &all, true))
    }
}
