//! CSV ingestion with column roles, and numeric CSV output.
//!
//! Dialect: comma separated, header row, UTF-8, `.` decimal point.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use drum_core::data::Task;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[serde(alias = "stable_X", alias = "x")]
    StableX,
    #[serde(alias = "missing_A", alias = "a")]
    MissingA,
    #[serde(alias = "outcome_Y", alias = "y")]
    OutcomeY,
    Ignore,
}

/// Role of every CSV column. Columns not listed take `default_role`; when
/// that is unset they are a schema violation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    #[serde(default)]
    pub task: Task,
    pub columns: BTreeMap<String, Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_role: Option<Role>,
}

fn violation(file: &Path, column: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Schema {
        file: file.display().to_string(),
        column: column.to_string(),
        reason: reason.into(),
    }
}

impl ColumnSchema {
    pub fn validate(&self) -> Result<()> {
        let count = |r: Role| self.columns.values().filter(|v| **v == r).count();
        if count(Role::StableX) == 0 && self.default_role != Some(Role::StableX) {
            return Err(HarnessError::Config("schema declares no stable_x column".into()));
        }
        if count(Role::OutcomeY) != 1 {
            return Err(HarnessError::Config(format!(
                "schema must declare exactly one outcome_y column, found {}",
                count(Role::OutcomeY)
            )));
        }
        if self
            .default_role
            .is_some_and(|r| r != Role::Ignore && r != Role::StableX)
        {
            return Err(HarnessError::Config(
                "default_role may only be ignore or stable_x".into(),
            ));
        }
        Ok(())
    }

    pub fn role(&self, column: &str) -> Option<Role> {
        self.columns.get(column).copied().or(self.default_role)
    }

    fn declared(&self, role: Role) -> impl Iterator<Item = &str> {
        self.columns
            .iter()
            .filter(move |(_, r)| **r == role)
            .map(|(c, _)| c.as_str())
    }

    pub fn outcome_column(&self) -> &str {
        self.declared(Role::OutcomeY).next().unwrap_or("")
    }
}

/// Raw CSV: header plus string records, parsed lazily per column.
pub struct RawTable {
    path: std::path::PathBuf,
    pub headers: Vec<String>,
    records: Vec<csv::StringRecord>,
}

impl RawTable {
    pub fn read(path: &Path) -> Result<RawTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(HarnessError::csv(path))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(HarnessError::csv(path))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut seen = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if let Some(j) = seen.insert(h.clone(), i) {
                return Err(violation(path, h, format!("duplicate header (positions {j} and {i})")));
            }
        }
        let records = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(HarnessError::csv(path))?;
        if records.is_empty() {
            return Err(violation(path, "", "file has no data rows"));
        }
        Ok(RawTable {
            path: path.to_path_buf(),
            headers,
            records,
        })
    }

    pub fn rows(&self) -> usize {
        self.records.len()
    }

    pub fn has(&self, column: &str) -> bool {
        self.headers.iter().any(|h| h == column)
    }

    pub fn column(&self, name: &str) -> Result<Array1<f64>> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| violation(&self.path, name, "column missing"))?;
        self.records
            .iter()
            .enumerate()
            .map(|(row, r)| {
                let field = r.get(idx).unwrap_or("").trim();
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(violation(
                        &self.path,
                        name,
                        format!("row {}: {field:?} is not a finite number", row + 1),
                    )),
                }
            })
            .collect()
    }

    pub fn matrix(&self, names: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.rows(), names.len()));
        for (j, name) in names.iter().enumerate() {
            out.column_mut(j).assign(&self.column(name)?);
        }
        Ok(out)
    }

    fn path(&self) -> &Path {
        &self.path
    }
}

/// Source rows split by role, columns in header order.
pub struct SourceFrame {
    pub x_columns: Vec<String>,
    pub a_columns: Vec<String>,
    pub y_column: String,
    pub x: Array2<f64>,
    pub a: Array2<f64>,
    pub y: Array1<f64>,
}

fn check_binary(path: &Path, column: &str, y: &Array1<f64>) -> Result<()> {
    if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(violation(
            path,
            column,
            format!("binary task requires 0/1 outcomes, found {v}"),
        ));
    }
    Ok(())
}

pub fn load_source(path: &Path, schema: &ColumnSchema) -> Result<SourceFrame> {
    schema.validate()?;
    let t = RawTable::read(path)?;
    for declared in schema.columns.keys() {
        if schema.columns[declared] != Role::Ignore && !t.has(declared) {
            return Err(violation(path, declared, "declared column missing from source file"));
        }
    }
    let (mut xs, mut as_) = (Vec::new(), Vec::new());
    for h in &t.headers {
        match schema.role(h) {
            Some(Role::StableX) => xs.push(h.clone()),
            Some(Role::MissingA) => as_.push(h.clone()),
            Some(Role::OutcomeY) | Some(Role::Ignore) => {}
            None => return Err(violation(path, h, "column has no role in the schema")),
        }
    }
    let y_column = schema.outcome_column().to_string();
    let y = t.column(&y_column)?;
    if schema.task == Task::Binary {
        check_binary(path, &y_column, &y)?;
    }
    Ok(SourceFrame {
        x: t.matrix(&xs)?,
        a: t.matrix(&as_)?,
        y,
        x_columns: xs,
        a_columns: as_,
        y_column,
    })
}

/// Target rows: only the stable covariates are read. A declared missing or
/// outcome column in the file is a violation of the unsupervised contract;
/// ignored columns are never parsed.
pub fn load_target(path: &Path, schema: &ColumnSchema, x_columns: &[String]) -> Result<Array2<f64>> {
    let t = RawTable::read(path)?;
    for h in &t.headers {
        match schema.role(h) {
            Some(Role::MissingA) | Some(Role::OutcomeY) => {
                return Err(violation(
                    path,
                    h,
                    "target files may not carry missing-covariate or outcome columns",
                ))
            }
            Some(Role::StableX) | Some(Role::Ignore) => {}
            None => return Err(violation(path, h, "column has no role in the schema")),
        }
    }
    t.matrix(x_columns)
}

/// Covariates plus the labelled outcome, for evaluation.
pub fn load_labeled(
    path: &Path,
    task: Task,
    x_columns: &[String],
    y_column: &str,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let t = RawTable::read(path)?;
    if !t.has(y_column) {
        return Err(violation(path, y_column, "label column missing from evaluation file"));
    }
    let y = t.column(y_column)?;
    if task == Task::Binary {
        check_binary(t.path(), y_column, &y)?;
    }
    Ok((t.matrix(x_columns)?, y))
}

/// Covariates only; every other column is skipped.
pub fn load_features(path: &Path, x_columns: &[String]) -> Result<Array2<f64>> {
    RawTable::read(path)?.matrix(x_columns)
}

/// Numeric CSV with one header per column.
pub fn numeric_csv(headers: &[String], columns: &[ArrayView1<f64>]) -> Result<Vec<u8>> {
    assert_eq!(headers.len(), columns.len());
    let rows = columns.first().map_or(0, |c| c.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let sink = std::path::PathBuf::from("<memory>");
    w.write_record(headers).map_err(HarnessError::csv(&sink))?;
    let mut rec = Vec::with_capacity(columns.len());
    for i in 0..rows {
        rec.clear();
        rec.extend(columns.iter().map(|c| c[i].to_string()));
        w.write_record(&rec).map_err(HarnessError::csv(&sink))?;
    }
    w.into_inner().map_err(|e| HarnessError::Io {
        path: sink,
        source: e.into_error(),
    })
}

/// Per-column affine standardization fitted on source rows. Columns with
/// at most two distinct values (indicators) and constant columns are left
/// as they are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
    pub applied: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x: Vec<ColumnScale>,
    pub a: Vec<ColumnScale>,
}

fn fit_scales(names: &[String], m: &Array2<f64>, enabled: bool) -> Vec<ColumnScale> {
    names
        .iter()
        .zip(m.columns())
        .map(|(name, col)| {
            let v = col.to_vec();
            let mean = drum_core::data::mean(&v);
            let sd = drum_core::data::sample_variance(&v).sqrt();
            let mut distinct = v.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            ColumnScale {
                column: name.clone(),
                mean,
                sd,
                applied: enabled && distinct.len() > 2 && sd > 0.0,
            }
        })
        .collect()
}

fn apply_scales(scales: &[ColumnScale], m: &mut Array2<f64>) {
    assert_eq!(scales.len(), m.ncols(), "standardizer width");
    for (s, mut col) in scales.iter().zip(m.columns_mut()) {
        if s.applied {
            col.mapv_inplace(|v| (v - s.mean) / s.sd);
        }
    }
}

impl Standardizer {
    pub fn fit(frame: &SourceFrame, enabled: bool) -> Standardizer {
        Standardizer {
            x: fit_scales(&frame.x_columns, &frame.x, enabled),
            a: fit_scales(&frame.a_columns, &frame.a, enabled),
        }
    }

    pub fn apply_x(&self, x: &mut Array2<f64>) {
        apply_scales(&self.x, x)
    }

    pub fn apply_a(&self, a: &mut Array2<f64>) {
        apply_scales(&self.a, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> ColumnSchema {
        toml::from_str(
            r#"
            task = "binary"
            [columns]
            age = "stable_x"
            sex = "stable_x"
            dispatch = "missing_A"
            survived = "outcome_y"
            note = "ignore"
            "#,
        )
        .unwrap()
    }

    fn file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn source_split_by_role_in_header_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(
            &dir,
            "s.csv",
            "sex,age,note,dispatch,survived\n1,60,a,3.5,1\n0,71,b,2.0,0\n0,55,c,1.0,0\n",
        );
        let f = load_source(&p, &schema()).unwrap();
        assert_eq!(f.x_columns, ["sex", "age"]);
        assert_eq!(f.a_columns, ["dispatch"]);
        assert_eq!(f.x.row(1).to_vec(), vec![0.0, 71.0]);
        assert_eq!(f.y.to_vec(), vec![1.0, 0.0, 0.0]);
        let st = Standardizer::fit(&f, true);
        assert!(!st.x[0].applied, "indicator left alone");
        assert!(st.x[1].applied);
        let mut x = f.x.clone();
        st.apply_x(&mut x);
        assert!(x.column(1).sum().abs() < 1e-12);
    }

    #[test]
    fn violations_name_the_column() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema();
        let p = file(&dir, "s.csv", "sex,age,dispatch,survived\n1,60,3.5,2\n");
        let e = load_source(&p, &s).err().unwrap().to_string();
        assert!(e.contains("survived") && e.contains("0/1"), "{e}");
        let p = file(&dir, "s2.csv", "sex,age,survived\n1,60,1\n");
        assert!(load_source(&p, &s).err().unwrap().to_string().contains("dispatch"));
        let p = file(&dir, "s3.csv", "sex,age,dispatch,survived,extra\n1,60,3.5,1,9\n");
        assert!(load_source(&p, &s).err().unwrap().to_string().contains("extra"));
        let xs = vec!["sex".to_string(), "age".to_string()];
        let p = file(&dir, "t.csv", "sex,age,survived\n1,60,1\n");
        let e = load_target(&p, &s, &xs).err().unwrap().to_string();
        assert!(e.contains("survived"), "{e}");
        let p = file(&dir, "t2.csv", "sex,age,note\n1,60,anything\n");
        assert_eq!(load_target(&p, &s, &xs).unwrap().row(0).to_vec(), vec![1.0, 60.0]);
        let p = file(&dir, "e.csv", "sex,age\n1,60\n");
        let e = load_labeled(&p, Task::Binary, &xs, "survived")
            .err()
            .unwrap()
            .to_string();
        assert!(e.contains("label column"), "{e}");
    }

    #[test]
    fn schema_needs_one_outcome() {
        let s: ColumnSchema = toml::from_str("[columns]\nx1 = \"stable_x\"\n").unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn numeric_csv_round_trips_floats() {
        let v = ndarray::array![0.1, 1.0 / 3.0, -2.5e-12];
        let bytes = numeric_csv(&["v".into()], &[v.view()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(load_features(&p, &["v".into()]).unwrap().column(0).to_vec(), v.to_vec());
    }
}
