//! Column schema, CSV ingestion and row filtering.
//!
//! Data are stored row-major in flat buffers: `x` is `n × k`, `z` is `n × p`.
//! Continuous columns may be standardized on load; the record of
//! `(mean, sd)` pairs is kept so predicates and exports work on the original
//! scale.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind,
        }
    }
}

/// Names and kinds of the covariates `x`, the initial observations `z`, and
/// the time, decision and outcome columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub x: Vec<ColumnSpec>,
    pub z: Vec<ColumnSpec>,
    pub t: String,
    pub a: String,
    pub y: String,
}

/// Location of a named column within a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRef {
    X(usize),
    Z(usize),
    T,
    A,
    Y,
}

impl ColumnSchema {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: ColumnSchema = serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::Schema("at least one x column is required".into()));
        }
        if self.z.is_empty() {
            return Err(Error::Schema("at least one z column is required".into()));
        }
        let mut seen = HashSet::new();
        for name in self.all_names() {
            if name.is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate column name '{name}'")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.x.len()
    }

    pub fn p(&self) -> usize {
        self.z.len()
    }

    pub fn z_kinds(&self) -> Vec<ColumnKind> {
        self.z.iter().map(|c| c.kind).collect()
    }

    fn all_names(&self) -> impl Iterator<Item = &str> {
        self.x
            .iter()
            .chain(&self.z)
            .map(|c| c.name.as_str())
            .chain([self.t.as_str(), self.a.as_str(), self.y.as_str()])
    }

    pub fn lookup(&self, name: &str) -> Result<ColumnRef> {
        if let Some(j) = self.x.iter().position(|c| c.name == name) {
            return Ok(ColumnRef::X(j));
        }
        if let Some(j) = self.z.iter().position(|c| c.name == name) {
            return Ok(ColumnRef::Z(j));
        }
        if name == self.t {
            Ok(ColumnRef::T)
        } else if name == self.a {
            Ok(ColumnRef::A)
        } else if name == self.y {
            Ok(ColumnRef::Y)
        } else {
            Err(Error::Schema(format!("unknown column '{name}'")))
        }
    }
}

/// `(mean, sd)` applied to one continuous column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Counts reported by [`load_csv`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub cells_imputed: usize,
    pub rows_clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    pub impute_median: bool,
    pub standardize: bool,
    pub t_floor: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            impute_median: false,
            standardize: false,
            t_floor: 1e-4,
        }
    }
}

/// One observation viewed through a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub t: f64,
    pub a: u8,
    pub y: u8,
}

/// Pre-treatment projection of a [`Dataset`]: covariates and initial
/// observations without decision, time or outcome.
#[derive(Debug, Clone, Copy)]
pub struct Pretreatment<'a> {
    x: &'a [f64],
    z: &'a [f64],
    k: usize,
    p: usize,
}

impl<'a> Pretreatment<'a> {
    pub fn n(&self) -> usize {
        if self.k > 0 {
            self.x.len() / self.k
        } else {
            self.z.len() / self.p.max(1)
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&'a [f64], &'a [f64]) {
        (&self.x[i * self.k..(i + 1) * self.k], &self.z[i * self.p..(i + 1) * self.p])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: ColumnSchema,
    x: Vec<f64>,
    z: Vec<f64>,
    t: Vec<f64>,
    a: Vec<u8>,
    y: Vec<u8>,
    x_std: Vec<Option<Standardization>>,
    z_std: Vec<Option<Standardization>>,
    report: LoadReport,
}

fn check_binary(v: f64, row: usize, col: &str) -> Result<()> {
    if v == 0.0 || v == 1.0 {
        Ok(())
    } else {
        Err(Error::Validation {
            row,
            message: format!("column '{col}' must be 0 or 1, got {v}"),
        })
    }
}

impl Dataset {
    /// Build from row-major buffers on the model scale (no standardization).
    pub fn from_columns(
        schema: ColumnSchema,
        x: Vec<f64>,
        z: Vec<f64>,
        t: Vec<f64>,
        a: Vec<u8>,
        y: Vec<u8>,
    ) -> Result<Self> {
        schema.validate()?;
        let n = t.len();
        let (k, p) = (schema.k(), schema.p());
        if n == 0 {
            return Err(Error::Shape("dataset must have at least one row".into()));
        }
        if x.len() != n * k || z.len() != n * p || a.len() != n || y.len() != n {
            return Err(Error::Shape(format!(
                "buffers do not match n={n}, k={k}, p={p}"
            )));
        }
        for i in 0..n {
            if !(t[i] > 0.0 && t[i].is_finite()) {
                return Err(Error::Validation {
                    row: i,
                    message: format!("time must be positive and finite, got {}", t[i]),
                });
            }
            check_binary(a[i] as f64, i, &schema.a)?;
            check_binary(y[i] as f64, i, &schema.y)?;
            for (j, c) in schema.x.iter().enumerate() {
                let v = x[i * k + j];
                if !v.is_finite() {
                    return Err(Error::Validation {
                        row: i,
                        message: format!("column '{}' is not finite", c.name),
                    });
                }
                if c.kind == ColumnKind::Binary {
                    check_binary(v, i, &c.name)?;
                }
            }
            for (j, c) in schema.z.iter().enumerate() {
                let v = z[i * p + j];
                if !v.is_finite() {
                    return Err(Error::Validation {
                        row: i,
                        message: format!("column '{}' is not finite", c.name),
                    });
                }
                if c.kind == ColumnKind::Binary {
                    check_binary(v, i, &c.name)?;
                }
            }
        }
        Ok(Dataset {
            x_std: vec![None; k],
            z_std: vec![None; p],
            report: LoadReport {
                rows_read: n,
                ..Default::default()
            },
            schema,
            x,
            z,
            t,
            a,
            y,
        })
    }

    pub fn schema(&self) -> &ColumnSchema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn k(&self) -> usize {
        self.schema.k()
    }

    pub fn p(&self) -> usize {
        self.schema.p()
    }

    pub fn report(&self) -> LoadReport {
        self.report
    }

    pub fn x_standardization(&self) -> &[Option<Standardization>] {
        &self.x_std
    }

    pub fn z_standardization(&self) -> &[Option<Standardization>] {
        &self.z_std
    }

    #[inline]
    pub fn row(&self, i: usize) -> Row<'_> {
        let (k, p) = (self.k(), self.p());
        Row {
            x: &self.x[i * k..(i + 1) * k],
            z: &self.z[i * p..(i + 1) * p],
            t: self.t[i],
            a: self.a[i],
            y: self.y[i],
        }
    }

    /// The `(X, Z)` columns alone.
    pub fn pretreatment(&self) -> Pretreatment<'_> {
        Pretreatment {
            x: &self.x,
            z: &self.z,
            k: self.k(),
            p: self.p(),
        }
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    /// Value of a column for row `i` on the original (unstandardized) scale.
    pub fn original_value(&self, i: usize, col: ColumnRef) -> f64 {
        match col {
            ColumnRef::X(j) => {
                let v = self.x[i * self.k() + j];
                self.x_std[j].map_or(v, |s| s.invert(v))
            }
            ColumnRef::Z(j) => {
                let v = self.z[i * self.p() + j];
                self.z_std[j].map_or(v, |s| s.invert(v))
            }
            ColumnRef::T => self.t[i],
            ColumnRef::A => self.a[i] as f64,
            ColumnRef::Y => self.y[i] as f64,
        }
    }

    /// Copy of the rows at `idx`, keeping schema and standardization record.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Shape("row selection is empty".into()));
        }
        let (k, p) = (self.k(), self.p());
        let mut out = Dataset {
            schema: self.schema.clone(),
            x: Vec::with_capacity(idx.len() * k),
            z: Vec::with_capacity(idx.len() * p),
            t: Vec::with_capacity(idx.len()),
            a: Vec::with_capacity(idx.len()),
            y: Vec::with_capacity(idx.len()),
            x_std: self.x_std.clone(),
            z_std: self.z_std.clone(),
            report: self.report,
        };
        for &i in idx {
            let r = self.row(i);
            out.x.extend_from_slice(r.x);
            out.z.extend_from_slice(r.z);
            out.t.push(r.t);
            out.a.push(r.a);
            out.y.push(r.y);
        }
        Ok(out)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.schema != other.schema || self.x_std != other.x_std || self.z_std != other.z_std {
            return Err(Error::Shape("datasets differ in schema or standardization".into()));
        }
        let mut out = self.clone();
        out.x.extend_from_slice(&other.x);
        out.z.extend_from_slice(&other.z);
        out.t.extend_from_slice(&other.t);
        out.a.extend_from_slice(&other.a);
        out.y.extend_from_slice(&other.y);
        Ok(out)
    }

    /// Write the data on the original scale with the schema's column names.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let header: Vec<&str> = self.schema.all_names().collect();
        wtr.write_record(&header)?;
        let (k, p) = (self.k(), self.p());
        let mut rec = Vec::with_capacity(k + p + 3);
        for i in 0..self.n() {
            rec.clear();
            for j in 0..k {
                rec.push(fmt_value(self.original_value(i, ColumnRef::X(j))));
            }
            for j in 0..p {
                rec.push(fmt_value(self.original_value(i, ColumnRef::Z(j))));
            }
            rec.push(fmt_value(self.t[i]));
            rec.push(self.a[i].to_string());
            rec.push(self.y[i].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Sample median; `values` is reordered.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Mean and sample sd (`n - 1` denominator). A constant or single-value
/// column gets `sd = 1` so the transform stays invertible.
fn mean_sd(values: &[f64]) -> Standardization {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let sd = if values.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    Standardization {
        mean,
        sd: if sd > 0.0 { sd } else { 1.0 },
    }
}

pub fn load_csv(path: &Path, schema: &ColumnSchema, options: &LoadOptions) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?, schema, options)
}

pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema, options: &LoadOptions) -> Result<Dataset> {
    schema.validate()?;
    if !(options.t_floor > 0.0 && options.t_floor.is_finite()) {
        return Err(Error::Config(format!("t_floor must be positive, got {}", options.t_floor)));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let x_pos: Vec<usize> = schema.x.iter().map(|c| position(&c.name)).collect::<Result<_>>()?;
    let z_pos: Vec<usize> = schema.z.iter().map(|c| position(&c.name)).collect::<Result<_>>()?;
    let (t_pos, a_pos, y_pos) = (position(&schema.t)?, position(&schema.a)?, position(&schema.y)?);

    let (k, p) = (schema.k(), schema.p());
    let mut x: Vec<Option<f64>> = Vec::new();
    let mut z: Vec<Option<f64>> = Vec::new();
    let (mut t, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let mut report = LoadReport::default();

    let parse = |s: &str, row: usize, name: &str| -> Result<Option<f64>> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>().map(Some).map_err(|_| Error::Validation {
            row,
            message: format!("column '{name}': cannot parse '{s}'"),
        })
    };
    let required = |v: Option<f64>, row: usize, name: &str| -> Result<f64> {
        v.ok_or_else(|| Error::Validation {
            row,
            message: format!("column '{name}' is missing"),
        })
    };
    let binary = |v: f64, row: usize, name: &str| -> Result<u8> {
        check_binary(v, row, name)?;
        Ok(v as u8)
    };

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |pos: usize| rec.get(pos).unwrap_or("");
        for (spec, &pos) in schema.x.iter().zip(&x_pos).chain(schema.z.iter().zip(&z_pos)) {
            let v = parse(cell(pos), row, &spec.name)?;
            match (spec.kind, v) {
                (ColumnKind::Binary, None) => {
                    return Err(Error::Validation {
                        row,
                        message: format!("binary column '{}' is missing", spec.name),
                    })
                }
                (ColumnKind::Binary, Some(v)) => check_binary(v, row, &spec.name)?,
                (ColumnKind::Continuous, None) if !options.impute_median => {
                    return Err(Error::Validation {
                        row,
                        message: format!("column '{}' is missing", spec.name),
                    })
                }
                (ColumnKind::Continuous, Some(v)) if !v.is_finite() => {
                    return Err(Error::Validation {
                        row,
                        message: format!("column '{}' is not finite", spec.name),
                    })
                }
                _ => {}
            }
        }
        for &pos in &x_pos {
            x.push(parse(cell(pos), row, "")?);
        }
        for &pos in &z_pos {
            z.push(parse(cell(pos), row, "")?);
        }
        let tv = required(parse(cell(t_pos), row, &schema.t)?, row, &schema.t)?;
        if !(tv >= 0.0 && tv.is_finite()) {
            return Err(Error::Validation {
                row,
                message: format!("time must be nonnegative and finite, got {tv}"),
            });
        }
        if tv < options.t_floor {
            report.rows_clamped += 1;
            log::warn!("row {row}: time {tv} clamped to {}", options.t_floor);
            t.push(options.t_floor);
        } else {
            t.push(tv);
        }
        a.push(binary(required(parse(cell(a_pos), row, &schema.a)?, row, &schema.a)?, row, &schema.a)?);
        y.push(binary(required(parse(cell(y_pos), row, &schema.y)?, row, &schema.y)?, row, &schema.y)?);
    }
    let n = t.len();
    if n == 0 {
        return Err(Error::Shape("no data rows".into()));
    }
    report.rows_read = n;

    let mut finish = |buf: Vec<Option<f64>>, width: usize, specs: &[ColumnSpec]| -> Result<(Vec<f64>, Vec<Option<Standardization>>)> {
        let mut out: Vec<f64> = buf.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let mut stds = vec![None; width];
        for (j, spec) in specs.iter().enumerate() {
            if spec.kind != ColumnKind::Continuous {
                continue;
            }
            let mut present: Vec<f64> = (0..n).filter_map(|i| buf[i * width + j]).collect();
            if present.len() < n {
                if present.is_empty() {
                    return Err(Error::Validation {
                        row: 0,
                        message: format!("column '{}' has no observed values to impute from", spec.name),
                    });
                }
                let med = median(&mut present);
                for i in 0..n {
                    if buf[i * width + j].is_none() {
                        out[i * width + j] = med;
                        report.cells_imputed += 1;
                    }
                }
            }
            if options.standardize {
                let col: Vec<f64> = (0..n).map(|i| out[i * width + j]).collect();
                let s = mean_sd(&col);
                for i in 0..n {
                    out[i * width + j] = s.apply(out[i * width + j]);
                }
                stds[j] = Some(s);
            }
        }
        Ok((out, stds))
    };
    let (x, x_std) = finish(x, k, &schema.x)?;
    let (z, z_std) = finish(z, p, &schema.z)?;
    Ok(Dataset {
        schema: schema.clone(),
        x,
        z,
        t,
        a,
        y,
        x_std,
        z_std,
        report,
    })
}

/// Comparison operators for [`RowPredicate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Row filter over named columns, evaluated on the original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum RowPredicate {
    All,
    Compare { column: String, cmp: CmpOp, value: f64 },
    And { of: Vec<RowPredicate> },
    Or { of: Vec<RowPredicate> },
    Not { of: Box<RowPredicate> },
}

enum Compiled {
    All,
    Compare(ColumnRef, CmpOp, f64),
    And(Vec<Compiled>),
    Or(Vec<Compiled>),
    Not(Box<Compiled>),
}

impl RowPredicate {
    pub fn compare(column: &str, cmp: CmpOp, value: f64) -> Self {
        RowPredicate::Compare {
            column: column.to_string(),
            cmp,
            value,
        }
    }

    pub fn and(self, other: RowPredicate) -> Self {
        RowPredicate::And { of: vec![self, other] }
    }

    fn compile(&self, schema: &ColumnSchema) -> Result<Compiled> {
        Ok(match self {
            RowPredicate::All => Compiled::All,
            RowPredicate::Compare { column, cmp, value } => Compiled::Compare(schema.lookup(column)?, *cmp, *value),
            RowPredicate::And { of } => Compiled::And(of.iter().map(|p| p.compile(schema)).collect::<Result<_>>()?),
            RowPredicate::Or { of } => Compiled::Or(of.iter().map(|p| p.compile(schema)).collect::<Result<_>>()?),
            RowPredicate::Not { of } => Compiled::Not(Box::new(of.compile(schema)?)),
        })
    }
}

impl Compiled {
    fn eval(&self, ds: &Dataset, i: usize) -> bool {
        match self {
            Compiled::All => true,
            Compiled::Compare(col, cmp, value) => {
                let v = ds.original_value(i, *col);
                match cmp {
                    CmpOp::Eq => v == *value,
                    CmpOp::Ne => v != *value,
                    CmpOp::Lt => v < *value,
                    CmpOp::Le => v <= *value,
                    CmpOp::Gt => v > *value,
                    CmpOp::Ge => v >= *value,
                }
            }
            Compiled::And(ps) => ps.iter().all(|p| p.eval(ds, i)),
            Compiled::Or(ps) => ps.iter().any(|p| p.eval(ds, i)),
            Compiled::Not(p) => !p.eval(ds, i),
        }
    }
}

/// Rows satisfying `pred`, preserving schema and standardization record.
pub fn filter_rows(ds: &Dataset, pred: &RowPredicate) -> Result<Dataset> {
    let compiled = pred.compile(&ds.schema)?;
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| compiled.eval(ds, i)).collect();
    ds.subset(&idx)
}
