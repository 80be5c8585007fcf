//! Tabular data with an explicit missingness mask and per-row population labels.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Family;

/// Population label of a row. `0` is the internal study, `k >= 1` the k-th external population.
pub type PopulationId = usize;

pub const INTERNAL: PopulationId = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("malformed number {value:?} at row {row}, column {column:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("outcome column {column:?} has value {value} at row {row}; binomial outcomes must be 0 or 1")]
    OutcomeDomain {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("column {0:?} not found")]
    UnknownColumn(String),
}

/// Role a column plays in the target model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Outcome Y.
    #[serde(rename = "y")]
    Outcome,
    /// Covariate measured in the internal study and (possibly) by external models.
    #[serde(rename = "x")]
    Shared,
    /// Covariate measured only in the internal study.
    #[serde(rename = "b")]
    InternalOnly,
}

impl Role {
    pub fn is_covariate(self) -> bool {
        matches!(self, Role::Shared | Role::InternalOnly)
    }
}

/// Measurement scale of a column.
///
/// Binary columns keep track of their two levels so that centering can shift
/// them while imputation still draws one of the two admissible values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    Binary { low: f64, high: f64 },
}

impl ColumnKind {
    /// Binary iff every observed value is 0 or 1.
    pub fn detect(values: &[f64], missing: &[bool]) -> Self {
        let binary = values
            .iter()
            .zip(missing)
            .filter(|(_, &m)| !m)
            .all(|(&v, _)| v == 0.0 || v == 1.0);
        if binary {
            ColumnKind::Binary { low: 0.0, high: 1.0 }
        } else {
            ColumnKind::Continuous
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, ColumnKind::Binary { .. })
    }

    fn shifted(self, by: f64) -> Self {
        match self {
            ColumnKind::Continuous => ColumnKind::Continuous,
            ColumnKind::Binary { low, high } => ColumnKind::Binary {
                low: low - by,
                high: high - by,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: Role,
    pub kind: ColumnKind,
}

/// Read-only access shared by [`Dataset`] and the stacked imputed data.
pub trait Table {
    fn columns(&self) -> &[Column];
    fn n_rows(&self) -> usize;
    /// Values of column `idx`; masked cells hold unspecified values.
    fn values(&self, idx: usize) -> &[f64];
    fn missing(&self, idx: usize) -> Option<&[bool]>;
    fn populations(&self) -> &[PopulationId];

    fn column_index(&self, name: &str) -> Option<usize> {
        self.columns().iter().position(|c| c.name == name)
    }

    fn require_column(&self, name: &str) -> Result<usize, DataError> {
        self.column_index(name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    fn outcome_index(&self) -> Option<usize> {
        self.columns().iter().position(|c| c.role == Role::Outcome)
    }

    fn names_with_role(&self, role: Role) -> Vec<String> {
        self.columns()
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.name.clone())
            .collect()
    }

    fn column_complete(&self, idx: usize) -> bool {
        self.missing(idx).is_none_or(|m| !m.iter().any(|&x| x))
    }
}

/// Column-major table of numeric values with a missingness mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    values: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
    population: Vec<PopulationId>,
}

impl Table for Dataset {
    fn columns(&self) -> &[Column] {
        &self.columns
    }
    fn n_rows(&self) -> usize {
        self.population.len()
    }
    fn values(&self, idx: usize) -> &[f64] {
        &self.values[idx]
    }
    fn missing(&self, idx: usize) -> Option<&[bool]> {
        Some(&self.missing[idx])
    }
    fn populations(&self) -> &[PopulationId] {
        &self.population
    }
}

impl Dataset {
    pub fn new(
        columns: Vec<Column>,
        values: Vec<Vec<f64>>,
        missing: Vec<Vec<bool>>,
        population: Vec<PopulationId>,
    ) -> Result<Self, DataError> {
        let n = population.len();
        if values.len() != columns.len() || missing.len() != columns.len() {
            return Err(DataError::Invalid(format!(
                "{} columns declared but {} value and {} mask columns supplied",
                columns.len(),
                values.len(),
                missing.len()
            )));
        }
        let mut seen = HashSet::new();
        for (j, col) in columns.iter().enumerate() {
            if !seen.insert(col.name.as_str()) {
                return Err(DataError::Invalid(format!("duplicate column name {:?}", col.name)));
            }
            if values[j].len() != n || missing[j].len() != n {
                return Err(DataError::Invalid(format!(
                    "column {:?} has {} values / {} mask entries, expected {n}",
                    col.name,
                    values[j].len(),
                    missing[j].len()
                )));
            }
            for (i, (&v, &m)) in values[j].iter().zip(&missing[j]).enumerate() {
                if !m && !v.is_finite() {
                    return Err(DataError::Invalid(format!(
                        "non-finite observed value in column {:?} at row {i}",
                        col.name
                    )));
                }
            }
        }
        if columns.iter().filter(|c| c.role == Role::Outcome).count() > 1 {
            return Err(DataError::Invalid("more than one outcome column".into()));
        }
        Ok(Self {
            columns,
            values,
            missing,
            population,
        })
    }

    /// Fully observed dataset; column kinds are detected from the values.
    pub fn from_columns(
        spec: Vec<(String, Role, Vec<f64>)>,
        population: Vec<PopulationId>,
    ) -> Result<Self, DataError> {
        let mut columns = Vec::with_capacity(spec.len());
        let mut values = Vec::with_capacity(spec.len());
        let mut missing = Vec::with_capacity(spec.len());
        for (name, role, v) in spec {
            let m = vec![false; v.len()];
            columns.push(Column {
                name,
                role,
                kind: ColumnKind::detect(&v, &m),
            });
            values.push(v);
            missing.push(m);
        }
        Self::new(columns, values, missing, population)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[col][row]
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        (!self.missing[col][row]).then(|| self.values[col][row])
    }

    pub fn missing_count(&self, col: usize) -> usize {
        self.missing[col].iter().filter(|&&m| m).count()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().flatten().any(|&m| m)
    }

    pub fn total_missing(&self) -> usize {
        self.missing.iter().flatten().filter(|&&m| m).count()
    }

    pub fn column_values(&self, name: &str) -> Result<&[f64], DataError> {
        Ok(&self.values[self.require_column(name)?])
    }

    pub fn set_population(&mut self, population: PopulationId) {
        self.population.iter_mut().for_each(|p| *p = population);
    }

    pub fn set_populations(&mut self, labels: Vec<PopulationId>) -> Result<(), DataError> {
        if labels.len() != self.n_rows() {
            return Err(DataError::Invalid("population label count mismatch".into()));
        }
        self.population = labels;
        Ok(())
    }

    /// Overwrite one column's kind (used when the kind is known from elsewhere).
    pub fn set_kind(&mut self, col: usize, kind: ColumnKind) {
        self.columns[col].kind = kind;
    }

    /// Rows selected by index (with repetition allowed), keeping labels and mask.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            values: self
                .values
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            missing: self
                .missing
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            population: rows.iter().map(|&r| self.population[r]).collect(),
        }
    }

    /// Rows belonging to `population`.
    pub fn population_rows(&self, population: PopulationId) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.population[i] == population)
            .collect()
    }

    /// Checks the outcome domain for `family`.
    pub fn check_outcome(&self, family: Family) -> Result<(), DataError> {
        let Some(y) = self.outcome_index() else {
            return Ok(());
        };
        if family == Family::Binomial {
            for (i, (&v, &m)) in self.values[y].iter().zip(&self.missing[y]).enumerate() {
                if !m && v != 0.0 && v != 1.0 {
                    return Err(DataError::OutcomeDomain {
                        row: i + 1,
                        column: self.columns[y].name.clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Concatenate rows of datasets with identical schemas.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
        let mut out = (*first).clone();
        for part in &parts[1..] {
            if !same_schema(&out.columns, &part.columns) {
                return Err(DataError::Schema("column schemas differ".into()));
            }
            for j in 0..out.columns.len() {
                out.values[j].extend_from_slice(&part.values[j]);
                out.missing[j].extend_from_slice(&part.missing[j]);
            }
            out.population.extend_from_slice(&part.population);
        }
        Ok(out)
    }

    /// Schema describing this dataset's columns, optionally with a population column.
    pub fn schema(&self, population_column: Option<&str>) -> Schema {
        let mut roles: IndexMap<String, SchemaRole> = self
            .columns
            .iter()
            .map(|c| {
                let role = match c.role {
                    Role::Outcome => SchemaRole::Outcome,
                    Role::Shared => SchemaRole::Shared,
                    Role::InternalOnly => SchemaRole::InternalOnly,
                };
                (c.name.clone(), role)
            })
            .collect();
        if let Some(p) = population_column {
            roles.insert(p.to_string(), SchemaRole::Population);
        }
        Schema { roles }
    }

    /// Write as CSV; missing cells become empty fields.
    pub fn write_csv<W: Write>(&self, writer: W, population_column: Option<&str>) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        if let Some(p) = population_column {
            header.push(p);
        }
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            for j in 0..self.columns.len() {
                record.push(if self.missing[j][i] {
                    String::new()
                } else {
                    format_number(self.values[j][i])
                });
            }
            if population_column.is_some() {
                record.push(self.population[i].to_string());
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path, population_column: Option<&str>) -> Result<(), DataError> {
        let file = File::create(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(file, population_column)
    }
}

/// Shortest representation that parses back to the identical `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v:?}")
}

fn same_schema(a: &[Column], b: &[Column]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.name == y.name && x.role == y.role)
}

/// Role entries accepted in a schema sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemaRole {
    #[serde(rename = "y")]
    Outcome,
    #[serde(rename = "x")]
    Shared,
    #[serde(rename = "b")]
    InternalOnly,
    /// Integer population label column (optional; rows default to the internal study).
    #[serde(rename = "pop")]
    Population,
}

/// Column name to role mapping, in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub roles: IndexMap<String, SchemaRole>,
}

impl Schema {
    pub fn from_json_str(s: &str) -> Result<Self, DataError> {
        let raw: IndexMap<String, String> =
            serde_json::from_str(s).map_err(|e| DataError::Schema(e.to_string()))?;
        let mut roles = IndexMap::with_capacity(raw.len());
        for (name, role) in raw {
            let role = match role.as_str() {
                "y" => SchemaRole::Outcome,
                "x" => SchemaRole::Shared,
                "b" => SchemaRole::InternalOnly,
                "pop" => SchemaRole::Population,
                other => {
                    return Err(DataError::Schema(format!(
                        "unknown role {other:?} for column {name:?} (expected \"y\", \"x\", \"b\" or \"pop\")"
                    )))
                }
            };
            roles.insert(name, role);
        }
        let outcomes = roles.values().filter(|r| **r == SchemaRole::Outcome).count();
        let pops = roles.values().filter(|r| **r == SchemaRole::Population).count();
        if outcomes > 1 || pops > 1 {
            return Err(DataError::Schema(
                "at most one outcome and one population column".into(),
            ));
        }
        Ok(Self { roles })
    }

    pub fn from_json_path(path: &Path) -> Result<Self, DataError> {
        Self::from_json_str(&read_to_string(path)?)
    }

    pub fn outcome(&self) -> Option<&str> {
        self.roles
            .iter()
            .find(|(_, r)| **r == SchemaRole::Outcome)
            .map(|(n, _)| n.as_str())
    }

    /// Same schema without the outcome column (for scoring new data).
    pub fn without_outcome(&self) -> Schema {
        Schema {
            roles: self
                .roles
                .iter()
                .filter(|(_, r)| **r != SchemaRole::Outcome)
                .map(|(n, r)| (n.clone(), *r))
                .collect(),
        }
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, DataError> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    Ok(s)
}

/// Parse a headered CSV according to `schema`. Empty fields are missing values.
///
/// The header must contain exactly the schema's columns (any order); data
/// columns keep header order. Binomial outcomes are checked to lie in {0, 1}.
pub fn read_dataset<R: Read>(reader: R, schema: &Schema, family: Option<Family>) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DataError::Schema(format!("duplicate header {h:?}")));
        }
        if !schema.roles.contains_key(h) {
            return Err(DataError::Schema(format!("column {h:?} has no role in the schema")));
        }
    }
    for name in schema.roles.keys() {
        if !seen.contains(name.as_str()) {
            return Err(DataError::Schema(format!("schema column {name:?} missing from header")));
        }
    }

    let mut data_cols = Vec::new();
    let mut pop_col = None;
    for (j, h) in header.iter().enumerate() {
        match schema.roles[h] {
            SchemaRole::Population => pop_col = Some(j),
            SchemaRole::Outcome => data_cols.push((j, Role::Outcome)),
            SchemaRole::Shared => data_cols.push((j, Role::Shared)),
            SchemaRole::InternalOnly => data_cols.push((j, Role::InternalOnly)),
        }
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); data_cols.len()];
    let mut missing: Vec<Vec<bool>> = vec![Vec::new(); data_cols.len()];
    let mut population = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        for (slot, &(j, _)) in data_cols.iter().enumerate() {
            let cell = rec.get(j).unwrap_or("");
            if cell.is_empty() {
                values[slot].push(f64::NAN);
                missing[slot].push(true);
            } else {
                let v = parse_finite(cell).ok_or_else(|| DataError::Parse {
                    row,
                    column: header[j].clone(),
                    value: cell.to_string(),
                })?;
                values[slot].push(v);
                missing[slot].push(false);
            }
        }
        let label = match pop_col {
            Some(j) => {
                let cell = rec.get(j).unwrap_or("");
                if cell.is_empty() {
                    INTERNAL
                } else {
                    cell.parse::<PopulationId>().map_err(|_| DataError::Parse {
                        row,
                        column: header[j].clone(),
                        value: cell.to_string(),
                    })?
                }
            }
            None => INTERNAL,
        };
        population.push(label);
    }

    let columns = data_cols
        .iter()
        .enumerate()
        .map(|(slot, &(j, role))| Column {
            name: header[j].clone(),
            role,
            kind: ColumnKind::detect(&values[slot], &missing[slot]),
        })
        .collect();
    let ds = Dataset::new(columns, values, missing, population)?;
    if let Some(f) = family {
        ds.check_outcome(f)?;
    }
    Ok(ds)
}

fn parse_finite(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_dataset(path: &Path, schema: &Schema, family: Option<Family>) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_dataset(file, schema, family)
}

/// Observed-value means used to center the shared and internal-only covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringRecord {
    pub means: IndexMap<String, f64>,
}

impl CenteringRecord {
    pub fn mean(&self, name: &str) -> f64 {
        self.means.get(name).copied().unwrap_or(0.0)
    }

    /// Subtract the recorded means from matching columns of `data`.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        self.shift(data, 1.0)
    }

    /// Add the recorded means back.
    pub fn invert(&self, data: &Dataset) -> Dataset {
        self.shift(data, -1.0)
    }

    fn shift(&self, data: &Dataset, sign: f64) -> Dataset {
        let mut out = data.clone();
        for (j, col) in data.columns.iter().enumerate() {
            if let Some(&m) = self.means.get(&col.name) {
                let by = sign * m;
                for (v, &miss) in out.values[j].iter_mut().zip(&data.missing[j]) {
                    if !miss {
                        *v -= by;
                    }
                }
                out.columns[j].kind = col.kind.shifted(by);
            }
        }
        out
    }
}

/// Center every covariate column at its observed-value mean.
pub fn center(data: &Dataset) -> (Dataset, CenteringRecord) {
    let mut means = IndexMap::new();
    for (j, col) in data.columns.iter().enumerate() {
        if !col.role.is_covariate() {
            continue;
        }
        let (sum, count) = data.values[j]
            .iter()
            .zip(&data.missing[j])
            .filter(|(_, &m)| !m)
            .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        means.insert(col.name.clone(), mean);
    }
    let record = CenteringRecord { means };
    (record.apply(data), record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn schema(json: &str) -> Schema {
        Schema::from_json_str(json).unwrap()
    }

    #[test]
    fn empty_cell_is_masked() {
        let csv = "y,x1,b1\n1,0.5,2\n0,1.5,\n1,2.5,3\n";
        let s = schema(r#"{"y":"y","x1":"x","b1":"b"}"#);
        let ds = read_dataset(csv.as_bytes(), &s, Some(Family::Binomial)).unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.total_missing(), 1);
        assert!(ds.is_missing(1, 2));
        assert!(ds.populations().iter().all(|&p| p == INTERNAL));
    }

    #[test]
    fn binomial_outcome_out_of_domain() {
        let csv = "y,x1\n1,0.5\n2,1.0\n";
        let s = schema(r#"{"y":"y","x1":"x"}"#);
        let err = read_dataset(csv.as_bytes(), &s, Some(Family::Binomial)).unwrap_err();
        assert!(matches!(err, DataError::OutcomeDomain { row: 2, .. }), "{err}");
        // Gaussian outcomes are unrestricted.
        read_dataset(csv.as_bytes(), &s, Some(Family::Gaussian)).unwrap();
    }

    #[test]
    fn malformed_number_reports_location() {
        let csv = "y,x1\n1,0.5\n0,abc\n";
        let s = schema(r#"{"y":"y","x1":"x"}"#);
        match read_dataset(csv.as_bytes(), &s, None).unwrap_err() {
            DataError::Parse { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "x1", "abc"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_role_and_header_mismatch() {
        assert!(matches!(
            Schema::from_json_str(r#"{"y":"outcome"}"#),
            Err(DataError::Schema(_))
        ));
        let s = schema(r#"{"y":"y","x1":"x"}"#);
        let err = read_dataset("y,x2\n1,2\n".as_bytes(), &s, None).unwrap_err();
        assert!(matches!(err, DataError::Schema(_)));
    }

    #[test]
    fn population_column_is_read() {
        let csv = "y,x1,pop\n1,0.5,0\n0,1.5,2\n1,1.0,\n";
        let s = schema(r#"{"y":"y","x1":"x","pop":"pop"}"#);
        let ds = read_dataset(csv.as_bytes(), &s, None).unwrap();
        assert_eq!(ds.populations(), &[0, 2, 0]);
        assert_eq!(ds.n_cols(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let mut spec = vec![("y".to_string(), Role::Outcome, (0..n).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect::<Vec<_>>())];
        for j in 0..3 {
            spec.push((format!("x{j}"), Role::Shared, (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect()));
        }
        for j in 0..2 {
            spec.push((format!("b{j}"), Role::InternalOnly, (0..n).map(|_| rng.random::<f64>().ln()).collect()));
        }
        let pops: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut ds = Dataset::from_columns(spec, pops).unwrap();
        // mask a few cells
        for i in (0..n).step_by(7) {
            ds.missing[4][i] = true;
            ds.values[4][i] = f64::NAN;
        }
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, Some("pop")).unwrap();
        let back = read_dataset(buf.as_slice(), &ds.schema(Some("pop")), Some(Family::Binomial)).unwrap();
        assert_eq!(back.populations(), ds.populations());
        for j in 0..ds.n_cols() {
            assert_eq!(back.columns()[j].name, ds.columns()[j].name);
            for i in 0..n {
                assert_eq!(back.is_missing(i, j), ds.is_missing(i, j));
                if let (Some(a), Some(b)) = (back.value(i, j), ds.value(i, j)) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn centering_small_cases() {
        let ds = Dataset::from_columns(
            vec![
                ("y".into(), Role::Outcome, vec![1.0, 0.0, 1.0]),
                ("x".into(), Role::Shared, vec![1.0, 2.0, 3.0]),
                ("b".into(), Role::InternalOnly, vec![-1.0, 0.0, 1.0]),
            ],
            vec![0; 3],
        )
        .unwrap();
        let (c, rec) = center(&ds);
        assert_eq!(c.values(1), &[-1.0, 0.0, 1.0]);
        assert_eq!(rec.mean("x"), 2.0);
        assert_eq!(c.values(0), ds.values(0));
        for (a, b) in c.values(2).iter().zip(ds.values(2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_ignores_masked_cells_and_shifts_binary_levels() {
        let mut ds = Dataset::from_columns(
            vec![
                ("x".into(), Role::Shared, vec![1.0, 2.0, 3.0, 1000.0]),
                ("b".into(), Role::InternalOnly, vec![0.0, 1.0, 1.0, 1.0]),
            ],
            vec![0; 4],
        )
        .unwrap();
        ds.missing[0][3] = true;
        let (c, rec) = center(&ds);
        assert_eq!(rec.mean("x"), 2.0);
        assert_eq!(c.values(0)[3], 1000.0);
        assert_eq!(
            c.columns()[1].kind,
            ColumnKind::Binary { low: -0.75, high: 0.25 }
        );
        ds.values[0][3] = -5.0;
        let (c2, rec2) = center(&ds);
        assert_eq!(rec, rec2);
        assert_eq!(c.values(1), c2.values(1));
    }

    #[test]
    fn random_centering_means_vanish() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let spec = (0..4)
            .map(|j| {
                let shift = j as f64 * 3.0 - 2.0;
                (format!("x{j}"), Role::Shared, (0..200).map(|_| shift + rng.random::<f64>() * 5.0).collect())
            })
            .collect();
        let ds = Dataset::from_columns(spec, vec![0; 200]).unwrap();
        let (c, rec) = center(&ds);
        for j in 0..4 {
            let m: f64 = c.values(j).iter().sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-10);
            // oracle: arithmetic mean of the raw column
            let raw: f64 = ds.values(j).iter().sum::<f64>() / 200.0;
            assert!((rec.mean(&format!("x{j}")) - raw).abs() < 1e-12);
        }
        let back = rec.invert(&c);
        for j in 0..4 {
            for (a, b) in back.values(j).iter().zip(ds.values(j)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn concat_rejects_schema_mismatch() {
        let a = Dataset::from_columns(vec![("x".into(), Role::Shared, vec![1.0])], vec![0]).unwrap();
        let b = Dataset::from_columns(vec![("z".into(), Role::Shared, vec![1.0])], vec![1]).unwrap();
        assert!(Dataset::concat(&[&a, &b]).is_err());
        let c = Dataset::concat(&[&a, &a]).unwrap();
        assert_eq!(c.n_rows(), 2);
    }

    proptest::proptest! {
        #[test]
        fn center_then_invert_is_identity(vals in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let n = vals.len();
            let ds = Dataset::from_columns(vec![("x".into(), Role::Shared, vals)], vec![0; n]).unwrap();
            let (c, rec) = center(&ds);
            let back = rec.invert(&c);
            for (a, b) in back.values(0).iter().zip(ds.values(0)) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
