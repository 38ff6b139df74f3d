//! Command-line surface: `simulate`, `fit`, `predict`, `evaluate` and
//! `experiment`.
//!
//! Every setting can come from a flat `key = value` file (`--config`) or a
//! flag of the same name; flags win. Each command writes the effective
//! settings to `config.txt` in its output directory.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 numerical
//! failure (including single-class outlier labels).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    build_lagged, dataset_from_table, fmt_f64, load_model, read_csv, save_model, split_chronological, write_csv,
    Dataset, LagSpec, ModelColumns, Roles, SplitAt, Table, TableSchema,
};
use crate::datagen::{generate_daily_series, DailySeriesConfig, PolyConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    delta_pct, evaluate, run_mc_experiment, EvalReport, FeatureMap, McResult, McSpec, Process, Summary, ZBins,
    PREDICTORS, TABLE_PREDICTORS,
};
use crate::robust::{fit_robust, RobustModel};

pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Debug, Parser)]
#[command(name = "robust-missing", version, about = "Linear prediction robust to features missing at test time")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw synthetic train/test data (or a daily NOx/O3 series).
    Simulate(SimulateArgs),
    /// Fit the robust predictor on a training CSV.
    Fit(FitArgs),
    /// Predict outcomes for a feature CSV.
    Predict(PredictArgs),
    /// Evaluate a fitted model on labelled test data.
    Evaluate(EvaluateArgs),
    /// Monte Carlo experiment or the synthetic air-quality pipeline.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProcessArgs {
    /// linear, poly or air-quality.
    #[arg(long)]
    pub process: Option<String>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub nu_z: Option<f64>,
    #[arg(long)]
    pub nu_u: Option<f64>,
    #[arg(long)]
    pub noise_x_var: Option<f64>,
    #[arg(long)]
    pub noise_y_var: Option<f64>,
    /// Linear coefficient of z in the polynomial process.
    #[arg(long)]
    pub w0: Option<f64>,
    /// Quadratic coefficient of z in the polynomial process.
    #[arg(long)]
    pub w1: Option<f64>,
    /// Predictor features for the polynomial process: linear or quadratic.
    #[arg(long)]
    pub feature_map: Option<String>,
    /// Length of the daily series.
    #[arg(long)]
    pub days: Option<usize>,
    /// Per-cell gap probability of the daily series.
    #[arg(long)]
    pub gap_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// Comma-separated feature columns.
    #[arg(long)]
    pub x_cols: Option<String>,
    /// Comma-separated missing-feature columns.
    #[arg(long)]
    pub z_cols: Option<String>,
    #[arg(long)]
    pub y_col: Option<String>,
    #[arg(long)]
    pub date_col: Option<String>,
    /// Build lagged NOx/O3 features with this many past days.
    #[arg(long)]
    pub lag: Option<usize>,
    #[arg(long)]
    pub nox_col: Option<String>,
    #[arg(long)]
    pub o3_col: Option<String>,
    /// First day of the test period (YYYY-MM-DD).
    #[arg(long)]
    pub split_date: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub process: ProcessArgs,
    /// Training rows.
    #[arg(long)]
    pub n: Option<usize>,
    /// Test rows.
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Training CSV.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Model file path (default: <out>/model.toml).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Feature CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test CSV.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Outlier level for the evaluation buckets (default: the model's).
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub process: ProcessArgs,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of z bins for the conditional-MSE curves.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub z_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub z_max: Option<f64>,
    /// Comma-separated lag lengths for the air-quality pipeline.
    #[arg(long)]
    pub lags: Option<String>,
    #[arg(long)]
    pub split_date: Option<String>,
}

const COMMON_KEYS: &[&str] = &["seed", "out"];
const PROCESS_KEYS: &[&str] = &[
    "process",
    "rho",
    "nu-z",
    "nu-u",
    "noise-x-var",
    "noise-y-var",
    "w0",
    "w1",
    "feature-map",
    "days",
    "gap-rate",
];
const SCHEMA_KEYS: &[&str] = &["x-cols", "z-cols", "y-col", "date-col", "lag", "nox-col", "o3-col", "split-date"];

/// Merged settings: config file first, then flags. Keys use dashes.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('_', "-")
}

impl Settings {
    /// Parses a flat `key = value` file; `#` starts a comment line.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut unknown = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("config line {}: expected key = value", i + 1)))?;
            let k = normalize_key(k);
            if !allowed.contains(&k.as_str()) {
                unknown.push(k.clone());
            }
            values.insert(k, v.trim().to_owned());
        }
        if !unknown.is_empty() {
            return Err(Error::Validation(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(Settings { values })
    }

    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        match path {
            Some(p) => Settings::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?, allowed),
            None => Ok(Settings::default()),
        }
    }

    fn flag<T: Display>(&mut self, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.values.insert(key.to_owned(), v.to_string());
        }
    }

    fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
    where
        T::Err: Display,
    {
        raw.parse()
            .map_err(|e| Error::Validation(format!("setting '{key}': cannot parse '{raw}': {e}")))
    }

    /// Value of `key`, recording `default` as effective when unset.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            Some(raw) => Self::parse_value(key, raw),
            None => {
                self.values.insert(key.to_owned(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.values.get(key).map(|raw| Self::parse_value(key, raw)).transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get_opt(key)?
            .ok_or_else(|| Error::Validation(format!("missing required setting '{key}'")))
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.values
            .get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect())
    }

    pub fn render(&self, command: &str) -> String {
        let mut s = format!("# robust-missing {command}\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

impl CommonArgs {
    fn settings(&self, extra: &[&[&str]]) -> Result<Settings> {
        let allowed: Vec<&str> = COMMON_KEYS.iter().chain(extra.iter().flat_map(|k| k.iter())).copied().collect();
        let mut s = Settings::load(self.config.as_deref(), &allowed)?;
        s.flag("seed", &self.seed);
        s.flag("out", &self.out.as_ref().map(|p| p.display().to_string()));
        Ok(s)
    }
}

impl ProcessArgs {
    fn apply(&self, s: &mut Settings) {
        s.flag("process", &self.process);
        s.flag("rho", &self.rho);
        s.flag("nu-z", &self.nu_z);
        s.flag("nu-u", &self.nu_u);
        s.flag("noise-x-var", &self.noise_x_var);
        s.flag("noise-y-var", &self.noise_y_var);
        s.flag("w0", &self.w0);
        s.flag("w1", &self.w1);
        s.flag("feature-map", &self.feature_map);
        s.flag("days", &self.days);
        s.flag("gap-rate", &self.gap_rate);
    }
}

impl SchemaArgs {
    fn apply(&self, s: &mut Settings) {
        s.flag("x-cols", &self.x_cols);
        s.flag("z-cols", &self.z_cols);
        s.flag("y-col", &self.y_col);
        s.flag("date-col", &self.date_col);
        s.flag("lag", &self.lag);
        s.flag("nox-col", &self.nox_col);
        s.flag("o3-col", &self.o3_col);
        s.flag("split-date", &self.split_date);
    }
}

fn out_dir(s: &mut Settings) -> Result<PathBuf> {
    let dir: PathBuf = s.get("out", "out".to_owned())?.into();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, s: &Settings, command: &str) -> Result<()> {
    write_text(&dir.join("config.txt"), &s.render(command))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn synthetic_config(s: &mut Settings, nu_z: f64) -> Result<SyntheticConfig> {
    let d = SyntheticConfig::default();
    Ok(SyntheticConfig {
        rho: s.get("rho", d.rho)?,
        nu_z: s.get("nu-z", nu_z)?,
        nu_u: s.get("nu-u", d.nu_u)?,
        noise_x_var: s.get("noise-x-var", d.noise_x_var)?,
        noise_y_var: s.get("noise-y-var", d.noise_y_var)?,
        seed: s.get("seed", 0u64)?,
        ..d
    })
}

fn feature_map(s: &mut Settings) -> Result<FeatureMap> {
    match s.get("feature-map", "quadratic".to_owned())?.as_str() {
        "quadratic" => Ok(FeatureMap::Quadratic),
        "linear" => Ok(FeatureMap::Linear),
        other => Err(Error::Validation(format!("feature-map must be linear or quadratic, got '{other}'"))),
    }
}

fn process(s: &mut Settings) -> Result<Process> {
    match s.get("process", "linear".to_owned())?.as_str() {
        "linear" => {
            let cfg = synthetic_config(s, 3.0)?;
            cfg.validate()?;
            Ok(Process::Linear(cfg))
        }
        "poly" => {
            let d = PolyConfig::default();
            let base = synthetic_config(s, d.base.nu_z)?;
            let cfg = PolyConfig {
                base,
                wz: [s.get("w0", d.wz[0])?, s.get("w1", d.wz[1])?],
                ..d
            };
            cfg.validate()?;
            Ok(Process::Poly(cfg, feature_map(s)?))
        }
        other => Err(Error::Validation(format!(
            "process must be linear, poly or air-quality, got '{other}'"
        ))),
    }
}

fn daily_config(s: &mut Settings) -> Result<DailySeriesConfig> {
    let d = DailySeriesConfig::default();
    Ok(DailySeriesConfig {
        days: s.get("days", d.days)?,
        gap_rate: s.get("gap-rate", d.gap_rate)?,
        seed: s.get("seed", 0u64)?,
        ..d
    })
}

fn series_table(cfg: &DailySeriesConfig) -> Result<Table> {
    let series = generate_daily_series(cfg)?;
    Table {
        columns: vec!["nox".into(), "o3".into()],
        data: vec![series.nox, series.o3],
        date_column: None,
        dates: None,
    }
    .with_dates("date", series.dates)
}

fn sample_table(x: &crate::Matrix, z: &crate::Matrix, y: &crate::Vector) -> Result<Table> {
    Ok(Dataset::new(x.clone(), z.clone(), y.clone())?.to_table())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Experiment(a) => cmd_experiment(&a),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut s = a.common.settings(&[PROCESS_KEYS, &["n", "n-test"]])?;
    a.process.apply(&mut s);
    s.flag("n", &a.n);
    s.flag("n-test", &a.n_test);
    let dir = out_dir(&mut s)?;

    if s.get_opt::<String>("process")?.as_deref() == Some("air-quality") {
        let cfg = daily_config(&mut s)?;
        write_csv(&dir.join("series.csv"), &series_table(&cfg)?)?;
        log::info!("wrote {} days to {}", cfg.days, dir.display());
        return echo_config(&dir, &s, "simulate");
    }
    let proc = process(&mut s)?;
    let n: usize = s.get("n", 1000)?;
    let n_test: usize = s.get("n-test", n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.require("seed")?);
    let train = proc.draw(n, &mut rng)?;
    let test = proc.draw(n_test, &mut rng)?;
    write_csv(&dir.join("train.csv"), &sample_table(&train.x, &train.z, &train.y)?)?;
    write_csv(&dir.join("test.csv"), &sample_table(&test.x, &test.z, &test.y)?)?;
    echo_config(&dir, &s, "simulate")
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Train,
    Test,
}

fn csv_list(v: Option<Vec<String>>) -> Option<Vec<String>> {
    v.filter(|l| !l.is_empty())
}

/// Loads the modelling rows of a CSV according to the schema settings.
fn load_dataset(s: &mut Settings, path: &Path, part: Part, need_outcome: bool, model_cols: Option<&ModelColumns>) -> Result<Dataset> {
    let split = s
        .get_opt::<String>("split-date")?
        .map(|d| {
            NaiveDate::parse_from_str(&d, "%Y-%m-%d")
                .map_err(|e| Error::Validation(format!("split-date '{d}': {e}")))
        })
        .transpose()?;
    let ds = if let Some(lag) = s.get_opt::<usize>("lag")? {
        let date_col = s.get("date-col", "date".to_owned())?;
        let spec = LagSpec {
            lags: lag,
            nox_column: s.get("nox-col", "nox".to_owned())?,
            o3_column: s.get("o3-col", "o3".to_owned())?,
        };
        let schema = TableSchema {
            date_column: Some(date_col),
            numeric: Some(vec![spec.nox_column.clone(), spec.o3_column.clone()]),
        };
        build_lagged(&read_csv(path, &schema)?, &spec)?
    } else {
        let date_col = s.get_opt::<String>("date-col")?;
        let table = read_csv(
            path,
            &TableSchema {
                date_column: date_col,
                numeric: None,
            },
        )?;
        let inferred = match model_cols {
            Some(c) => Roles {
                x: c.x.clone(),
                z: c.z.clone(),
                y: c.y.clone(),
            },
            None => Roles::infer(&table.columns)?,
        };
        let roles = Roles {
            x: csv_list(s.list("x-cols")).unwrap_or(inferred.x),
            z: if need_outcome {
                csv_list(s.list("z-cols")).unwrap_or(inferred.z)
            } else {
                Vec::new()
            },
            y: s.get_opt("y-col")?.unwrap_or(inferred.y),
        };
        dataset_from_table(&table, &roles, need_outcome)?
    };
    if ds.dropped > 0 {
        log::warn!("dropped {} rows with gaps", ds.dropped);
    }
    match split {
        Some(b) => {
            let dropped = ds.dropped;
            let (train, test) = split_chronological(&ds, SplitAt::Date(b))?;
            let mut chosen = if part == Part::Train { train } else { test };
            chosen.dropped = dropped;
            Ok(chosen)
        }
        None => Ok(ds),
    }
}

fn fit_report(model: &RobustModel, ds: &Dataset) -> Vec<Vec<String>> {
    let g = &model.gate;
    let rows: Vec<(&str, String)> = vec![
        ("alpha", fmt_f64(model.alpha)),
        ("n", ds.n().to_string()),
        ("d", model.d().to_string()),
        ("q", model.q().to_string()),
        ("dropped_rows", ds.dropped.to_string()),
        ("n_outliers", model.label_counts.0.to_string()),
        ("n_inliers", model.label_counts.1.to_string()),
        ("gate_b0", fmt_f64(g.b0)),
        ("gate_b1", fmt_f64(g.b1)),
        ("gate_kappa", opt(g.kappa)),
        ("gate_delta0", opt(g.delta0)),
        ("gate_converged", g.diagnostics.converged.to_string()),
        ("gate_iterations", g.diagnostics.iterations.to_string()),
        ("gate_cross_entropy", fmt_f64(g.diagnostics.cross_entropy)),
        ("constraint_residual", opt(model.w_con.constraint_residual)),
        ("constraint_infeasible", model.w_con.constraint_infeasible.to_string()),
    ];
    rows.into_iter().map(|(k, v)| vec![k.to_owned(), v]).collect()
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let mut s = a.common.settings(&[SCHEMA_KEYS, &["train", "alpha", "model-out"]])?;
    a.schema.apply(&mut s);
    s.flag("train", &a.train.as_ref().map(|p| p.display().to_string()));
    s.flag("alpha", &a.alpha);
    s.flag("model-out", &a.model_out.as_ref().map(|p| p.display().to_string()));
    let dir = out_dir(&mut s)?;
    let train: PathBuf = s.require::<String>("train")?.into();
    let alpha = s.get("alpha", 0.1)?;
    let model_path: PathBuf = s.get("model-out", dir.join("model.toml").display().to_string())?.into();

    let ds = load_dataset(&mut s, &train, Part::Train, true, None)?;
    if ds.z.ncols() == 0 {
        return Err(Error::Validation("no missing-feature columns selected".into()));
    }
    let model = fit_robust(&ds.x, &ds.z, &ds.y, alpha)?;
    let cols = ModelColumns {
        x: ds.x_names.clone(),
        z: ds.z_names.clone(),
        y: ds.y_name.clone(),
    };
    save_model(&model_path, &model, Some(&cols))?;
    write_rows(&dir.join("fit_report.csv"), &["key", "value"], &fit_report(&model, &ds))?;
    echo_config(&dir, &s, "fit")
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let mut s = a.common.settings(&[SCHEMA_KEYS, &["model", "input"]])?;
    a.schema.apply(&mut s);
    s.flag("model", &a.model.as_ref().map(|p| p.display().to_string()));
    s.flag("input", &a.input.as_ref().map(|p| p.display().to_string()));
    let dir = out_dir(&mut s)?;
    let (model, cols) = load_model(Path::new(&s.require::<String>("model")?))?;
    let input: PathBuf = s.require::<String>("input")?.into();
    let lagged = s.get_opt::<usize>("lag")?.is_some();
    let ds = load_dataset(&mut s, &input, Part::Test, lagged, cols.as_ref())?;
    if ds.x.ncols() != model.d() {
        return Err(Error::shape("predict (feature columns)", model.d(), ds.x.ncols()));
    }
    let mut header = vec!["y_hat", "p_outlier", "delta"];
    if ds.dates.is_some() {
        header.insert(0, "date");
    }
    let mut rows = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let r = model.predict_detailed(&ds.x.row(i).transpose())?;
        let mut row = vec![fmt_f64(r.value), fmt_f64(r.p_outlier), fmt_f64(r.delta)];
        if let Some(d) = &ds.dates {
            row.insert(0, d[i].format("%Y-%m-%d").to_string());
        }
        rows.push(row);
    }
    write_rows(&dir.join("predictions.csv"), &header, &rows)?;
    echo_config(&dir, &s, "predict")
}

const REPORT_HEADER: [&str; 9] = [
    "predictor",
    "n",
    "n_in",
    "n_out",
    "mse",
    "mse_in",
    "mse_out",
    "delta_in_pct",
    "delta_out_pct",
];

fn report_rows(reports: &[EvalReport]) -> Vec<Vec<String>> {
    let base = reports[0];
    let delta = |v: Option<f64>, b: Option<f64>| match (v, b) {
        (Some(v), Some(b)) => fmt_f64(delta_pct(v, b)),
        _ => String::new(),
    };
    reports
        .iter()
        .zip(PREDICTORS)
        .map(|(r, name)| {
            vec![
                name.to_owned(),
                (r.n_in + r.n_out).to_string(),
                r.n_in.to_string(),
                r.n_out.to_string(),
                fmt_f64(r.mse),
                opt(r.mse_in),
                opt(r.mse_out),
                delta(r.mse_in, base.mse_in),
                delta(r.mse_out, base.mse_out),
            ]
        })
        .collect()
}

/// Reports for the optimistic, conservative and robust predictors.
pub fn evaluate_model(model: &RobustModel, ds: &Dataset, alpha: f64) -> Result<Vec<EvalReport>> {
    if ds.x.ncols() != model.d() || ds.z.ncols() != model.q() {
        return Err(Error::shape(
            "evaluate (model dimensions)",
            format!("d = {}, q = {}", model.d(), model.q()),
            format!("d = {}, q = {}", ds.x.ncols(), ds.z.ncols()),
        ));
    }
    let region = model.region.with_alpha(alpha)?;
    Ok(vec![
        evaluate(|x, _| model.w_opt.predict(x), &ds.x, &ds.z, &ds.y, &region)?,
        evaluate(|x, _| model.w_con.predict(x), &ds.x, &ds.z, &ds.y, &region)?,
        evaluate(|x, _| model.predict(x), &ds.x, &ds.z, &ds.y, &region)?,
    ])
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut s = a.common.settings(&[SCHEMA_KEYS, &["model", "test", "alpha"]])?;
    a.schema.apply(&mut s);
    s.flag("model", &a.model.as_ref().map(|p| p.display().to_string()));
    s.flag("test", &a.test.as_ref().map(|p| p.display().to_string()));
    s.flag("alpha", &a.alpha);
    let dir = out_dir(&mut s)?;
    let (model, cols) = load_model(Path::new(&s.require::<String>("model")?))?;
    let test: PathBuf = s.require::<String>("test")?.into();
    let alpha = s.get("alpha", model.alpha)?;
    let ds = load_dataset(&mut s, &test, Part::Test, true, cols.as_ref())?;
    let reports = evaluate_model(&model, &ds, alpha)?;
    write_rows(&dir.join("evaluation.csv"), &REPORT_HEADER, &report_rows(&reports))?;
    echo_config(&dir, &s, "evaluate")
}

pub fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let mut s = a.common.settings(&[
        PROCESS_KEYS,
        &["n-train", "n-test", "runs", "alpha", "bins", "z-min", "z-max", "lags", "split-date"],
    ])?;
    a.process.apply(&mut s);
    s.flag("n-train", &a.n_train);
    s.flag("n-test", &a.n_test);
    s.flag("runs", &a.runs);
    s.flag("alpha", &a.alpha);
    s.flag("bins", &a.bins);
    s.flag("z-min", &a.z_min);
    s.flag("z-max", &a.z_max);
    s.flag("lags", &a.lags);
    s.flag("split-date", &a.split_date);
    let dir = out_dir(&mut s)?;
    if s.get_opt::<String>("process")?.as_deref() == Some("air-quality") {
        air_quality_experiment(&mut s, &dir)?;
    } else {
        mc_experiment(&mut s, &dir)?;
    }
    echo_config(&dir, &s, "experiment")
}

fn summary_cells(s: Option<&Summary>) -> Vec<String> {
    match s {
        Some(s) => vec![fmt_f64(s.mean), fmt_f64(s.q1), fmt_f64(s.median), fmt_f64(s.q3)],
        None => vec![String::new(); 4],
    }
}

fn mc_experiment(s: &mut Settings, dir: &Path) -> Result<McResult> {
    let process = process(s)?;
    let bins = s.get("bins", 32usize)?;
    let z_min = s.get("z-min", -8.0)?;
    let z_max = s.get("z-max", 8.0)?;
    let spec = McSpec {
        process,
        n_train: s.get("n-train", 100)?,
        n_test: s.get("n-test", 100_000)?,
        n_runs: s.get("runs", 50)?,
        alpha: s.get("alpha", 0.1)?,
        master_seed: s.get("seed", 0)?,
        curve_bins: if bins > 0 { Some(ZBins::new(z_min, z_max, bins)?) } else { None },
        gate_override: None,
    };
    let res = run_mc_experiment(&spec)?;
    write_mc_outputs(&res, dir)?;
    Ok(res)
}

/// Writes `delta_table.csv`, `runs.csv`, `failed_runs.csv` and, for a
/// scalar missing feature, `curves.csv`.
pub fn write_mc_outputs(res: &McResult, dir: &Path) -> Result<()> {
    let t = &res.table;
    let mut header = vec![
        "predictor",
        "delta_in_pct",
        "delta_out_pct",
        "mean_mse_in",
        "mean_mse_out",
        "runs_used",
    ];
    header.extend([
        "run_delta_in_mean",
        "run_delta_in_q1",
        "run_delta_in_median",
        "run_delta_in_q3",
        "run_delta_out_mean",
        "run_delta_out_q1",
        "run_delta_out_median",
        "run_delta_out_q3",
    ]);
    let rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.predictor.to_owned(),
                fmt_f64(r.delta_in),
                fmt_f64(r.delta_out),
                fmt_f64(r.mean_mse_in),
                fmt_f64(r.mean_mse_out),
                t.runs_used.to_string(),
            ];
            row.extend(summary_cells(r.per_run_in.as_ref()));
            row.extend(summary_cells(r.per_run_out.as_ref()));
            row
        })
        .collect();
    write_rows(&dir.join("delta_table.csv"), &header, &rows)?;

    let mut run_rows = Vec::new();
    for r in &res.runs {
        for (p, rep) in r.reports.iter().enumerate() {
            run_rows.push(vec![
                r.run.to_string(),
                r.seed.to_string(),
                PREDICTORS[p].to_owned(),
                rep.n_in.to_string(),
                rep.n_out.to_string(),
                fmt_f64(rep.mse),
                opt(rep.mse_in),
                opt(rep.mse_out),
                r.train_labels.0.to_string(),
                fmt_f64(r.gate.b0),
                fmt_f64(r.gate.b1),
            ]);
        }
    }
    write_rows(
        &dir.join("runs.csv"),
        &["run", "seed", "predictor", "n_in", "n_out", "mse", "mse_in", "mse_out", "train_outliers", "gate_b0", "gate_b1"],
        &run_rows,
    )?;
    let failed: Vec<Vec<String>> = res.failed_runs.iter().map(|(r, e)| vec![r.to_string(), e.clone()]).collect();
    write_rows(&dir.join("failed_runs.csv"), &["run", "error"], &failed)?;

    if let Some(curves) = &res.curves {
        let rows: Vec<Vec<String>> = curves
            .iter()
            .map(|c| {
                let mut row = vec![
                    c.predictor.to_owned(),
                    fmt_f64(c.center),
                    c.total_count.to_string(),
                    c.mse.as_ref().map_or(0, |m| m.count).to_string(),
                ];
                row.extend(summary_cells(c.mse.as_ref()));
                row
            })
            .collect();
        write_rows(
            &dir.join("curves.csv"),
            &["predictor", "z_center", "count", "runs", "mse_mean", "mse_q1", "mse_median", "mse_q3"],
            &rows,
        )?;
    }
    Ok(())
}

/// Output of the synthetic air-quality pipeline for one lag length.
#[derive(Debug, Clone)]
pub struct AirQualityResult {
    pub lags: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dropped: usize,
    pub model: RobustModel,
    pub train: Dataset,
    pub test: Dataset,
    pub reports: Vec<EvalReport>,
}

/// Series → lag features → chronological split → fit → evaluate.
pub fn air_quality_pipeline(table: &Table, lags: usize, split: NaiveDate, alpha: f64) -> Result<AirQualityResult> {
    let ds = build_lagged(table, &LagSpec::new(lags))?;
    let (train, test) = split_chronological(&ds, SplitAt::Date(split))?;
    let model = fit_robust(&train.x, &train.z, &train.y, alpha)?;
    let reports = evaluate_model(&model, &test, alpha)?;
    Ok(AirQualityResult {
        lags,
        n_train: train.n(),
        n_test: test.n(),
        dropped: ds.dropped,
        model,
        train,
        test,
        reports,
    })
}

fn air_quality_experiment(s: &mut Settings, dir: &Path) -> Result<()> {
    let cfg = daily_config(s)?;
    let alpha = s.get("alpha", 0.3)?;
    let split_raw = s.get("split-date", "2013-01-01".to_owned())?;
    let split = NaiveDate::parse_from_str(&split_raw, "%Y-%m-%d")
        .map_err(|e| Error::Validation(format!("split-date '{split_raw}': {e}")))?;
    let lags: Vec<usize> = s
        .get("lags", "7,28".to_owned())?
        .split(',')
        .map(|l| Settings::parse_value("lags", l.trim()))
        .collect::<Result<_>>()?;
    let table = series_table(&cfg)?;
    write_csv(&dir.join("series.csv"), &table)?;

    let mut rows = Vec::new();
    for l in lags {
        let r = air_quality_pipeline(&table, l, split, alpha)?;
        for (p, rep) in r.reports.iter().enumerate().take(TABLE_PREDICTORS) {
            let base = r.reports[0];
            rows.push(vec![
                l.to_string(),
                PREDICTORS[p].to_owned(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                r.dropped.to_string(),
                rep.n_in.to_string(),
                rep.n_out.to_string(),
                opt(rep.mse_in),
                opt(rep.mse_out),
                opt(rep.mse_in.zip(base.mse_in).map(|(v, b)| delta_pct(v, b))),
                opt(rep.mse_out.zip(base.mse_out).map(|(v, b)| delta_pct(v, b))),
            ]);
        }
    }
    write_rows(
        &dir.join("air_quality_report.csv"),
        &[
            "lags",
            "predictor",
            "n_train",
            "n_test",
            "dropped",
            "n_in",
            "n_out",
            "mse_in",
            "mse_out",
            "delta_in_pct",
            "delta_out_pct",
        ],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_file_and_overrides() {
        let mut s = Settings::parse("# comment\nrho = 0.5\nnu_z=4\n\n", &["rho", "nu-z", "seed"]).unwrap();
        assert_eq!(s.get("rho", 0.7).unwrap(), 0.5);
        s.flag("rho", &Some(0.3));
        assert_eq!(s.get("rho", 0.7).unwrap(), 0.3);
        assert_eq!(s.get("nu-z", 3.0).unwrap(), 4.0);
        assert_eq!(s.get("seed", 9u64).unwrap(), 9);
        assert_eq!(s.render("x"), "# robust-missing x\nnu-z = 4\nrho = 0.3\nseed = 9\n");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Settings::parse("rho = 1\nbogus = 2\nother=3\n", &["rho"]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("other"), "{msg}");
        assert!(Settings::parse("no equals sign", &[]).is_err());
        let s = Settings::parse("rho = abc", &["rho"]).unwrap();
        assert!(s.get_opt::<f64>("rho").unwrap_err().to_string().contains("rho"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(exit_code(&Error::Validation("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::CorruptModel("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        let single = Error::SingleClass {
            n_outliers: 0,
            n: 5,
            alpha: None,
        };
        assert_eq!(exit_code(&single), EXIT_NUMERICAL);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["robust-missing", "experiment", "--z-min", "-6", "--runs", "2"]).unwrap();
        match c.command {
            Command::Experiment(a) => {
                assert_eq!(a.z_min, Some(-6.0));
                assert_eq!(a.runs, Some(2));
            }
            _ => panic!("wrong subcommand"),
        }
    }
}
