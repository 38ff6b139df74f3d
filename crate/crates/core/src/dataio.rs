//! CSV ingestion, lag features for daily series, centering, chronological
//! splits, and the model file.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::centering::Centering;
use crate::error::{Error, Result};
use crate::gate::{GateDiagnostics, LogisticGate, OutlierRegion};
use crate::linalg::{Matrix, Vector};
use crate::predictors::{Imputer, LinearPredictor, PredictorKind};
use crate::robust::RobustModel;

/// Column-major table of numeric cells; `None` marks a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Vec<Vec<Option<f64>>>,
    pub date_column: Option<String>,
    pub dates: Option<Vec<NaiveDate>>,
}

/// Which columns to read and how.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableSchema {
    /// ISO-8601 (`YYYY-MM-DD`) date column.
    pub date_column: Option<String>,
    /// Numeric columns to keep; `None` keeps every non-date column.
    pub numeric: Option<Vec<String>>,
}

impl Table {
    pub fn nrows(&self) -> usize {
        self.data.first().map_or_else(|| self.dates.as_ref().map_or(0, Vec::len), Vec::len)
    }

    pub fn column(&self, name: &str) -> Result<&[Option<f64>]> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|j| self.data[j].as_slice())
            .ok_or_else(|| Error::Validation(format!("column '{name}' not found; available: {}", self.columns.join(", "))))
    }

    /// Table from complete numeric columns.
    pub fn from_columns(columns: Vec<String>, data: Vec<Vec<f64>>) -> Result<Self> {
        if columns.len() != data.len() {
            return Err(Error::shape("Table (columns)", columns.len(), data.len()));
        }
        if let Some(first) = data.first() {
            if let Some(bad) = data.iter().position(|c| c.len() != first.len()) {
                return Err(Error::shape("Table (column length)", first.len(), data[bad].len()));
            }
        }
        Ok(Table {
            columns,
            data: data.into_iter().map(|c| c.into_iter().map(Some).collect()).collect(),
            date_column: None,
            dates: None,
        })
    }

    pub fn with_dates(mut self, name: &str, dates: Vec<NaiveDate>) -> Result<Self> {
        if !self.data.is_empty() && dates.len() != self.nrows() {
            return Err(Error::shape("Table (dates)", self.nrows(), dates.len()));
        }
        self.date_column = Some(name.to_owned());
        self.dates = Some(dates);
        Ok(self)
    }
}

fn parse_cell(raw: &str) -> std::result::Result<Option<f64>, String> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map_err(|_| format!("cannot parse '{s}' as a number"))
        .and_then(|v| if v.is_finite() { Ok(Some(v)) } else { Err(format!("non-finite value '{s}'")) })
}

/// Reads a comma-separated file with a header row. Rows are numbered as in
/// the file, so the first data row is row 2. Empty and `NA` cells are gaps.
pub fn read_csv(path: &Path, schema: &TableSchema) -> Result<Table> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("{}: no column named '{name}'", path.display())))
    };
    let date_idx = schema.date_column.as_deref().map(find).transpose()?;
    let numeric_idx: Vec<usize> = match &schema.numeric {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&j| Some(j) != date_idx).collect(),
    };

    let mut data = vec![Vec::new(); numeric_idx.len()];
    let mut dates = date_idx.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |j: usize, message: String| Error::Parse {
            path: path.to_owned(),
            row,
            column: headers[j].clone(),
            message,
        };
        if let (Some(j), Some(ds)) = (date_idx, dates.as_mut()) {
            let cell = rec[j].trim();
            let d = NaiveDate::parse_from_str(cell, "%Y-%m-%d").map_err(|e| parse_err(j, format!("bad date '{cell}': {e}")))?;
            ds.push(d);
        }
        for (k, &j) in numeric_idx.iter().enumerate() {
            data[k].push(parse_cell(&rec[j]).map_err(|m| parse_err(j, m))?);
        }
    }
    Ok(Table {
        columns: numeric_idx.iter().map(|&j| headers[j].clone()).collect(),
        data,
        date_column: schema.date_column.clone(),
        dates,
    })
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the table with the date column first. Gaps become empty cells.
pub fn write_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::new();
    if let Some(name) = &table.date_column {
        header.push(name);
    }
    header.extend(table.columns.iter().map(String::as_str));
    w.write_record(&header)?;
    for i in 0..table.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ds) = &table.dates {
            rec.push(ds[i].format("%Y-%m-%d").to_string());
        }
        rec.extend(table.data.iter().map(|c| c[i].map(fmt_f64).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Regression data with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub z: Matrix,
    pub y: Vector,
    /// Means removed from the data; all zeros until centered.
    pub means: Centering,
    pub centered: bool,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub y_name: String,
    /// Date of each row (the outcome day for lagged data).
    pub dates: Option<Vec<NaiveDate>>,
    /// Rows left out because a needed cell was a gap.
    pub dropped: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn new(x: Matrix, z: Matrix, y: Vector) -> Result<Self> {
        if x.nrows() != y.len() || z.nrows() != y.len() {
            return Err(Error::shape("Dataset (rows)", y.len(), format!("X: {}, Z: {}", x.nrows(), z.nrows())));
        }
        let (d, q) = (x.ncols(), z.ncols());
        Ok(Dataset {
            means: Centering::identity(d, q),
            x,
            z,
            y,
            centered: false,
            x_names: (1..=d).map(|j| format!("x{j}")).collect(),
            z_names: (1..=q).map(|j| format!("z{j}")).collect(),
            y_name: "y".into(),
            dates: None,
            dropped: 0,
        })
    }

    fn select_rows(&self, rows: std::ops::Range<usize>) -> Dataset {
        let (start, len) = (rows.start, rows.len());
        Dataset {
            x: self.x.rows(start, len).into_owned(),
            z: self.z.rows(start, len).into_owned(),
            y: self.y.rows(start, len).into_owned(),
            means: self.means.clone(),
            centered: self.centered,
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
            y_name: self.y_name.clone(),
            dates: self.dates.as_ref().map(|d| d[rows].to_vec()),
            dropped: 0,
        }
    }

    /// The dataset as a table (raw scale if centered).
    pub fn to_table(&self) -> Table {
        let mut columns = Vec::new();
        let mut data = Vec::new();
        let (x, z, y) = self.raw();
        for (j, name) in self.x_names.iter().enumerate() {
            columns.push(name.clone());
            data.push(x.column(j).iter().map(|&v| Some(v)).collect());
        }
        for (j, name) in self.z_names.iter().enumerate() {
            columns.push(name.clone());
            data.push(z.column(j).iter().map(|&v| Some(v)).collect());
        }
        columns.push(self.y_name.clone());
        data.push(y.iter().map(|&v| Some(v)).collect());
        Table {
            columns,
            data,
            date_column: self.dates.as_ref().map(|_| "date".to_owned()),
            dates: self.dates.clone(),
        }
    }

    fn raw(&self) -> (Matrix, Matrix, Vector) {
        if !self.centered {
            return (self.x.clone(), self.z.clone(), self.y.clone());
        }
        let mut x = self.x.clone();
        let mut z = self.z.clone();
        for (j, mut c) in x.column_iter_mut().enumerate() {
            c.add_scalar_mut(self.means.x[j]);
        }
        for (j, mut c) in z.column_iter_mut().enumerate() {
            c.add_scalar_mut(self.means.z[j]);
        }
        (x, z, self.y.add_scalar(self.means.y))
    }
}

/// Column roles for tabular data.
#[derive(Debug, Clone, PartialEq)]
pub struct Roles {
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub y: String,
}

impl Roles {
    /// `x*` columns as features, `z*` as the missing block, `y` as outcome.
    pub fn infer(columns: &[String]) -> Result<Self> {
        let pick = |p: char| columns.iter().filter(|c| c.starts_with(p)).cloned().collect::<Vec<_>>();
        let roles = Roles {
            x: pick('x'),
            z: pick('z'),
            y: "y".into(),
        };
        if roles.x.is_empty() || !columns.contains(&roles.y) {
            return Err(Error::Validation(format!(
                "cannot infer column roles from [{}]; pass the feature, missing and outcome columns explicitly",
                columns.join(", ")
            )));
        }
        Ok(roles)
    }
}

/// Selects role columns, dropping rows with a gap in any of them. `z` may be
/// empty (prediction inputs).
pub fn dataset_from_table(table: &Table, roles: &Roles, need_outcome: bool) -> Result<Dataset> {
    let xs = roles.x.iter().map(|c| table.column(c)).collect::<Result<Vec<_>>>()?;
    let zs = roles.z.iter().map(|c| table.column(c)).collect::<Result<Vec<_>>>()?;
    let ys = if need_outcome { Some(table.column(&roles.y)?) } else { None };
    let keep: Vec<usize> = (0..table.nrows())
        .filter(|&i| xs.iter().chain(&zs).chain(ys.iter()).all(|c| c[i].is_some()))
        .collect();
    let n = keep.len();
    let x = Matrix::from_fn(n, xs.len(), |i, j| xs[j][keep[i]].unwrap());
    let z = Matrix::from_fn(n, zs.len(), |i, j| zs[j][keep[i]].unwrap());
    let y = match ys {
        Some(c) => Vector::from_fn(n, |i, _| c[keep[i]].unwrap()),
        None => Vector::zeros(n),
    };
    let mut ds = Dataset::new(x, z, y)?;
    ds.x_names = roles.x.clone();
    ds.z_names = roles.z.clone();
    ds.y_name = roles.y.clone();
    ds.dates = table.dates.as_ref().map(|d| keep.iter().map(|&i| d[i]).collect());
    ds.dropped = table.nrows() - n;
    Ok(ds)
}

/// Lag layout for next-day NO_x prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LagSpec {
    pub lags: usize,
    pub nox_column: String,
    pub o3_column: String,
}

impl LagSpec {
    pub fn new(lags: usize) -> Self {
        LagSpec {
            lags,
            nox_column: "nox".into(),
            o3_column: "o3".into(),
        }
    }
}

/// Row `t` gets `x = (nox_{t−1}, o3_{t−1}, …, nox_{t−L}, o3_{t−L})`,
/// `z = o3_t` and `y = nox_t`. Windows containing a gap are dropped and
/// counted in `dropped`.
pub fn build_lagged(table: &Table, spec: &LagSpec) -> Result<Dataset> {
    let l = spec.lags;
    if l == 0 {
        return Err(Error::Validation("the number of lags must be at least 1".into()));
    }
    let nox = table.column(&spec.nox_column)?;
    let o3 = table.column(&spec.o3_column)?;
    let n_rows = table.nrows();
    if n_rows <= l {
        return Err(Error::Validation(format!("{n_rows} rows are too few for {l} lags")));
    }
    let mut rows = Vec::new();
    let mut dropped = 0;
    for t in l..n_rows {
        let mut x = Vec::with_capacity(2 * l);
        for k in 1..=l {
            x.push(nox[t - k]);
            x.push(o3[t - k]);
        }
        match (x.iter().copied().collect::<Option<Vec<f64>>>(), o3[t], nox[t]) {
            (Some(x), Some(z), Some(y)) => rows.push((t, x, z, y)),
            _ => dropped += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("no complete {l}-day window in {n_rows} rows")));
    }
    let n = rows.len();
    let x = Matrix::from_fn(n, 2 * l, |i, j| rows[i].1[j]);
    let z = Matrix::from_fn(n, 1, |i, _| rows[i].2);
    let y = Vector::from_fn(n, |i, _| rows[i].3);
    let mut ds = Dataset::new(x, z, y)?;
    ds.x_names = (1..=l)
        .flat_map(|k| [format!("{}_lag{k}", spec.nox_column), format!("{}_lag{k}", spec.o3_column)])
        .collect();
    ds.z_names = vec![spec.o3_column.clone()];
    ds.y_name = spec.nox_column.clone();
    ds.dates = table.dates.as_ref().map(|d| rows.iter().map(|r| d[r.0]).collect());
    ds.dropped = dropped;
    Ok(ds)
}

/// Centers the dataset with its own means and stores them.
pub fn center_fit(ds: &Dataset) -> Result<Dataset> {
    if ds.centered {
        return Err(Error::Validation("dataset is already centered".into()));
    }
    let means = Centering::fit(&ds.x, &ds.z, &ds.y);
    center_apply(ds, &means)
}

/// Centers the dataset with previously fitted (training) means.
pub fn center_apply(ds: &Dataset, means: &Centering) -> Result<Dataset> {
    if ds.centered {
        return Err(Error::Validation("dataset is already centered".into()));
    }
    let mut out = ds.clone();
    out.x = means.center_x(&ds.x)?;
    out.z = means.center_z(&ds.z)?;
    out.y = means.center_y(&ds.y);
    out.means = means.clone();
    out.centered = true;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitAt {
    /// Share of rows in the training prefix.
    Fraction(f64),
    /// First date of the test suffix.
    Date(NaiveDate),
}

/// Order-preserving prefix/suffix split.
pub fn split_chronological(ds: &Dataset, at: SplitAt) -> Result<(Dataset, Dataset)> {
    let n = ds.n();
    let cut = match at {
        SplitAt::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Validation(format!("split fraction must lie in (0, 1), got {f}")));
            }
            (f * n as f64).round() as usize
        }
        SplitAt::Date(b) => {
            let dates = ds
                .dates
                .as_ref()
                .ok_or_else(|| Error::Validation("a date split needs a dated dataset".into()))?;
            if dates.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Validation("dates are not in chronological order".into()));
            }
            dates.partition_point(|d| *d < b)
        }
    };
    if cut == 0 || cut == n {
        return Err(Error::Validation(format!(
            "split leaves an empty {} set ({n} rows)",
            if cut == 0 { "training" } else { "test" }
        )));
    }
    Ok((ds.select_rows(0..cut), ds.select_rows(cut..n)))
}

/// Current model file version.
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Means {
    x: Vec<f64>,
    z: Vec<f64>,
    y: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GateFile {
    b0: f64,
    b1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta0: Option<f64>,
}

/// Names of the columns a model was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelColumns {
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub y: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Diagnostics {
    n_outliers: usize,
    n_inliers: usize,
    gate_cross_entropy: f64,
    gate_iterations: usize,
    gate_converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    constraint_residual: Option<f64>,
    constraint_infeasible: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    alpha: f64,
    d: usize,
    q: usize,
    means: Means,
    w_opt: Vec<f64>,
    w_con: Vec<f64>,
    /// Imputer `G`, one array per row.
    gmat: Vec<Vec<f64>>,
    minv: Vec<Vec<f64>>,
    gate: GateFile,
    #[serde(skip_serializing_if = "Option::is_none")]
    columns: Option<ModelColumns>,
    diagnostics: Diagnostics,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::CorruptModel(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector_of(v: &[f64], len: usize, what: &str) -> Result<Vector> {
    if v.len() != len {
        return Err(Error::CorruptModel(format!("{what} has length {}, expected {len}", v.len())));
    }
    Ok(Vector::from_column_slice(v))
}

/// Serializes the model to TOML text.
pub fn model_to_string(model: &RobustModel, columns: Option<&ModelColumns>) -> Result<String> {
    let file = ModelFile {
        version: MODEL_VERSION,
        alpha: model.alpha,
        d: model.d(),
        q: model.q(),
        means: Means {
            x: model.centering.x.clone(),
            z: model.centering.z.clone(),
            y: model.centering.y,
        },
        w_opt: model.w_opt.weights.iter().copied().collect(),
        w_con: model.w_con.weights.iter().copied().collect(),
        gmat: rows_of(&model.imputer.gmat),
        minv: rows_of(&model.region.minv),
        gate: GateFile {
            b0: model.gate.b0,
            b1: model.gate.b1,
            kappa: model.gate.kappa,
            delta0: model.gate.delta0,
        },
        columns: columns.cloned(),
        diagnostics: Diagnostics {
            n_outliers: model.label_counts.0,
            n_inliers: model.label_counts.1,
            gate_cross_entropy: model.gate.diagnostics.cross_entropy,
            gate_iterations: model.gate.diagnostics.iterations,
            gate_converged: model.gate.diagnostics.converged,
            constraint_residual: model.w_con.constraint_residual,
            constraint_infeasible: model.w_con.constraint_infeasible,
        },
    };
    toml::to_string(&file).map_err(|e| Error::Validation(format!("cannot serialize model: {e}")))
}

/// Parses a model file; the version is checked before anything else.
pub fn model_from_str(text: &str) -> Result<(RobustModel, Option<ModelColumns>)> {
    let doc: toml::Table = text.parse().map_err(|e| Error::CorruptModel(format!("{e}")))?;
    let version = doc
        .get("version")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| Error::CorruptModel("missing integer 'version'".into()))?;
    if version != i64::from(MODEL_VERSION) {
        return Err(Error::ModelVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: MODEL_VERSION,
        });
    }
    let f: ModelFile = doc.try_into().map_err(|e: toml::de::Error| Error::CorruptModel(e.message().to_owned()))?;
    let (d, q) = (f.d, f.q);
    let alpha = f.alpha;

    let centering = Centering {
        x: vector_of(&f.means.x, d, "means.x")?.as_slice().to_vec(),
        z: vector_of(&f.means.z, q, "means.z")?.as_slice().to_vec(),
        y: f.means.y,
    };
    let predictor = |w: &[f64], kind, what| -> Result<LinearPredictor> {
        Ok(LinearPredictor {
            weights: vector_of(w, d, what)?,
            kind,
            x_mean: Vector::from_column_slice(&centering.x),
            y_mean: centering.y,
            constraint_residual: None,
            constraint_infeasible: false,
        })
    };
    let w_opt = predictor(&f.w_opt, PredictorKind::Optimistic, "w_opt")?;
    let mut w_con = predictor(&f.w_con, PredictorKind::Conservative, "w_con")?;
    w_con.constraint_residual = f.diagnostics.constraint_residual;
    w_con.constraint_infeasible = f.diagnostics.constraint_infeasible;

    let minv = matrix_of(&f.minv, q, q, "minv")?;
    let region = OutlierRegion {
        minv,
        alpha,
        threshold: q as f64 / alpha,
        z_mean: Vector::from_column_slice(&centering.z),
    };
    // rebuilt through the same constructor so kappa and delta0 agree with the logits
    let mut gate = LogisticGate::from_logits(f.gate.b0, f.gate.b1);
    gate.diagnostics = GateDiagnostics {
        cross_entropy: f.diagnostics.gate_cross_entropy,
        iterations: f.diagnostics.gate_iterations,
        converged: f.diagnostics.gate_converged,
    };
    let model = RobustModel {
        w_opt,
        w_con,
        imputer: Imputer {
            gmat: matrix_of(&f.gmat, q, d, "gmat")?,
        },
        region,
        gate,
        alpha,
        centering,
        label_counts: (f.diagnostics.n_outliers, f.diagnostics.n_inliers),
    };
    let finite = model.w_opt.weights.iter().chain(model.w_con.weights.iter()).all(|v| v.is_finite())
        && model.imputer.gmat.iter().chain(model.region.minv.iter()).all(|v| v.is_finite())
        && model.gate.b0.is_finite()
        && model.gate.b1.is_finite()
        && alpha > 0.0
        && alpha <= 1.0;
    if !finite {
        return Err(Error::CorruptModel("non-finite parameter or alpha outside (0, 1]".into()));
    }
    Ok((model, f.columns))
}

pub fn save_model(path: &Path, model: &RobustModel, columns: Option<&ModelColumns>) -> Result<()> {
    fs::write(path, model_to_string(model, columns)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(RobustModel, Option<ModelColumns>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}
