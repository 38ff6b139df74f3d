//! Evaluation: MSE split by the tail region, conditional-MSE curves, the
//! Monte Carlo harness behind the ΔMSE tables, and the excess-MSE
//! decomposition check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::centering::Centering;
use crate::datagen::{feature_map_quadratic, generate_linear_with, generate_poly_with, PolyConfig, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gate::{LogisticGate, OutlierRegion};
use crate::linalg::{accumulate_moments, pseudoinverse, rank, Matrix, SecondMoments, Vector, DEFAULT_PINV_TOL};
use crate::predictors::fit_oracle;
use crate::robust::{fit_robust, RobustModel};

/// Test-set MSE split into the outlier (`z ∈ Z_α`) and inlier buckets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    /// `None` when no test sample fell in the bucket.
    pub mse_out: Option<f64>,
    pub mse_in: Option<f64>,
    pub n_out: usize,
    pub n_in: usize,
    pub alpha: f64,
}

impl EvalReport {
    pub fn from_errors(sq_err: &[f64], outlier: &[bool], alpha: f64) -> Result<Self> {
        if sq_err.len() != outlier.len() {
            return Err(Error::shape("EvalReport (labels)", sq_err.len(), outlier.len()));
        }
        if sq_err.is_empty() {
            return Err(Error::Validation("cannot evaluate on an empty test set".into()));
        }
        let (mut s_out, mut s_in, mut n_out, mut n_in) = (0.0, 0.0, 0usize, 0usize);
        for (&e, &o) in sq_err.iter().zip(outlier) {
            if o {
                s_out += e;
                n_out += 1;
            } else {
                s_in += e;
                n_in += 1;
            }
        }
        let mean = |s: f64, k: usize| (k > 0).then(|| s / k as f64);
        Ok(EvalReport {
            mse: (s_out + s_in) / sq_err.len() as f64,
            mse_out: mean(s_out, n_out),
            mse_in: mean(s_in, n_in),
            n_out,
            n_in,
            alpha,
        })
    }

    /// `|mse − (n_out·mse_out + n_in·mse_in)/(n_out + n_in)|`.
    pub fn decomposition_gap(&self) -> f64 {
        let total = (self.n_out + self.n_in) as f64;
        let recombined = (self.n_out as f64 * self.mse_out.unwrap_or(0.0) + self.n_in as f64 * self.mse_in.unwrap_or(0.0)) / total;
        (self.mse - recombined).abs()
    }
}

/// Outlier labels of the test rows. `z` holds raw rows; the region carries
/// the training mean.
pub fn outlier_labels(region: &OutlierRegion, z: &Matrix) -> Result<Vec<bool>> {
    (0..z.nrows()).map(|i| region.is_outlier(&z.row(i).transpose())).collect()
}

fn squared_errors<F>(mut predict_fn: F, x: &Matrix, z: &Matrix, y: &Vector) -> Result<Vec<f64>>
where
    F: FnMut(&Vector, &Vector) -> Result<f64>,
{
    if x.nrows() != y.len() || z.nrows() != y.len() {
        return Err(Error::shape("evaluate (rows)", y.len(), format!("X: {}, Z: {}", x.nrows(), z.nrows())));
    }
    (0..y.len())
        .map(|i| {
            let p = predict_fn(&x.row(i).transpose(), &z.row(i).transpose())?;
            Ok((y[i] - p).powi(2))
        })
        .collect()
}

/// Evaluates a predictor `f(x, z)` on raw test rows. Predictors that cannot
/// see `z` simply ignore the second argument. The region should be the one
/// fitted on training data.
pub fn evaluate<F>(predict_fn: F, x: &Matrix, z: &Matrix, y: &Vector, region: &OutlierRegion) -> Result<EvalReport>
where
    F: FnMut(&Vector, &Vector) -> Result<f64>,
{
    let errs = squared_errors(predict_fn, x, z, y)?;
    let labels = outlier_labels(region, z)?;
    EvalReport::from_errors(&errs, &labels, region.alpha)
}

/// `100 · (variant − baseline) / baseline`.
pub fn delta_pct(variant: f64, baseline: f64) -> f64 {
    100.0 * (variant - baseline) / baseline
}

/// Uniform bins over a scalar missing feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ZBins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl ZBins {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(hi > lo) || count == 0 {
            return Err(Error::Validation(format!("invalid z bins [{lo}, {hi}] x {count}")));
        }
        Ok(ZBins { lo, hi, count })
    }

    fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width()
    }

    /// Bin of `z`; values outside `[lo, hi]` fall in no bin.
    pub fn index(&self, z: f64) -> Option<usize> {
        if !(z >= self.lo && z <= self.hi) {
            return None;
        }
        Some((((z - self.lo) / self.width()) as usize).min(self.count - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub center: f64,
    pub mse: Option<f64>,
    pub count: usize,
}

fn curve_from_errors(sq_err: &[f64], zs: impl Iterator<Item = f64>, bins: &ZBins) -> Vec<CurvePoint> {
    let mut sums = vec![0.0; bins.count];
    let mut counts = vec![0usize; bins.count];
    for (e, z) in sq_err.iter().zip(zs) {
        if let Some(k) = bins.index(z) {
            sums[k] += e;
            counts[k] += 1;
        }
    }
    (0..bins.count)
        .map(|k| CurvePoint {
            center: bins.center(k),
            mse: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
            count: counts[k],
        })
        .collect()
}

/// Mean squared error per bin of the scalar missing feature.
pub fn conditional_mse_curve<F>(predict_fn: F, x: &Matrix, z: &Matrix, y: &Vector, bins: &ZBins) -> Result<Vec<CurvePoint>>
where
    F: FnMut(&Vector, &Vector) -> Result<f64>,
{
    if z.ncols() != 1 {
        return Err(Error::Validation(format!(
            "conditional MSE curves need a scalar missing feature, got q = {}",
            z.ncols()
        )));
    }
    let errs = squared_errors(predict_fn, x, z, y)?;
    Ok(curve_from_errors(&errs, z.column(0).iter().copied(), bins))
}

/// Both sides of the excess-MSE identity
/// `MSE(w) − MSE⋆ = ‖Γ(α − w) + β‖²_{E[zzᵀ]} + ‖α − w‖²_{E[x̃x̃ᵀ]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessMseCheck {
    pub lhs: f64,
    /// z-dispersion term; zero on the conservative constraint set.
    pub term_z: f64,
    /// residual-feature term.
    pub term_resid: f64,
    pub rhs: f64,
    /// `Γ = (E[zzᵀ])⁻¹ E[zxᵀ]`, `q × d`.
    pub gamma: Matrix,
    /// `E[x̃ x̃ᵀ]` with `x̃ = x − Γᵀz`.
    pub resid_moment: Matrix,
    /// `‖Γ(α − w) + β‖∞`.
    pub constraint_gap: f64,
}

pub fn excess_mse_check(pop: &SecondMoments, w: &Vector) -> Result<ExcessMseCheck> {
    let (d, q) = (pop.d(), pop.q());
    if w.len() != d {
        return Err(Error::shape("excess_mse_check (w)", d, w.len()));
    }
    if rank(&pop.szz, DEFAULT_PINV_TOL) < q {
        return Err(Error::Numerical("E[z zᵀ] is singular; Γ is undefined".into()));
    }
    let szz_inv = pseudoinverse(&pop.szz, DEFAULT_PINV_TOL)?;
    let oracle = fit_oracle(pop)?;
    let gamma = &szz_inv * &pop.szx;
    let resid_moment = &pop.sxx - pop.szx.transpose() * &szz_inv * &pop.szx;
    let mse_star = pop.syy - oracle.alpha.dot(&pop.sxy) - oracle.beta.dot(&pop.szy);
    let lhs = pop.mse(w) - mse_star;

    let diff = &oracle.alpha - w;
    let tz = &gamma * &diff + &oracle.beta;
    let term_z = (&pop.szz * &tz).dot(&tz);
    let term_resid = (&resid_moment * &diff).dot(&diff);
    Ok(ExcessMseCheck {
        lhs,
        term_z,
        term_resid,
        rhs: term_z + term_resid,
        gamma,
        resid_moment,
        constraint_gap: tz.amax(),
    })
}

/// Second moments of a centered sample, for use as population moments.
pub fn centered_moments(sample: &Sample) -> Result<SecondMoments> {
    let c = Centering::fit(&sample.x, &sample.z, &sample.y);
    accumulate_moments(&c.center_x(&sample.x)?, &c.center_z(&sample.z)?, &c.center_y(&sample.y))
}

/// Data-generating process for a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Process {
    Linear(SyntheticConfig),
    /// Polynomial process with the predictor's feature map: `Quadratic` uses
    /// `φ(x)` with `ψ(z)` missing, `Linear` uses raw `x` with `z` missing.
    Poly(PolyConfig, FeatureMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    Linear,
    Quadratic,
}

impl Process {
    /// Draws `n` rows ready for fitting: features and missing block already
    /// passed through the feature maps.
    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        match self {
            Process::Linear(cfg) => generate_linear_with(cfg, n, rng),
            Process::Poly(cfg, map) => {
                let s = generate_poly_with(cfg, n, rng)?;
                Ok(match map {
                    FeatureMap::Quadratic => Sample {
                        x: feature_map_quadratic(&s.x)?,
                        z: s.z,
                        y: s.y,
                    },
                    FeatureMap::Linear => Sample {
                        x: s.x,
                        z: s.z.columns(0, 1).into_owned(),
                        y: s.y,
                    },
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSpec {
    pub process: Process,
    pub n_train: usize,
    pub n_test: usize,
    pub n_runs: usize,
    pub alpha: f64,
    /// Run `r` draws train then test data from a generator seeded with
    /// `master_seed + r`.
    pub master_seed: u64,
    pub curve_bins: Option<ZBins>,
    /// Replaces the fitted gate in every run (degenerate-gate checks).
    pub gate_override: Option<LogisticGate>,
}

impl McSpec {
    /// Desk-scale defaults: the linear process with `ρ = 0.7`, `ν_z = 3`,
    /// `n = 100` training samples, `10⁵` test samples, 50 runs, `α = 0.1`.
    pub fn desk_defaults(process: Process) -> Self {
        McSpec {
            process,
            n_train: 100,
            n_test: 100_000,
            n_runs: 50,
            alpha: 0.1,
            master_seed: 0,
            curve_bins: None,
            gate_override: None,
        }
    }
}

/// Predictors compared in every run; the first is the Δ baseline.
pub const PREDICTORS: [&str; 4] = ["optimistic", "conservative", "robust", "oracle"];
/// Predictors that appear in the Δ table.
pub const TABLE_PREDICTORS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// One report per entry of [`PREDICTORS`].
    pub reports: Vec<EvalReport>,
    pub gate: LogisticGate,
    pub train_labels: (usize, usize),
    /// Per predictor, per bin.
    pub curves: Option<Vec<Vec<CurvePoint>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub count: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Summary {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub predictor: &'static str,
    /// Change of the run-averaged inlier MSE relative to the baseline, in %.
    pub delta_in: f64,
    /// Change of the run-averaged outlier MSE relative to the baseline, in %.
    pub delta_out: f64,
    /// Spread of the per-run changes.
    pub per_run_in: Option<Summary>,
    pub per_run_out: Option<Summary>,
    pub mean_mse_in: f64,
    pub mean_mse_out: f64,
}

/// ΔMSE table relative to the optimistic predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    pub alpha: f64,
    pub rows: Vec<DeltaRow>,
    pub runs_used: usize,
}

impl DeltaTable {
    pub fn row(&self, predictor: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.predictor == predictor)
    }

    /// Builds the table from per-run reports. Runs with an empty bucket for
    /// any predictor are left out.
    pub fn from_runs(runs: &[RunRecord], alpha: f64) -> Result<Self> {
        let usable: Vec<&RunRecord> = runs
            .iter()
            .filter(|r| r.reports.iter().all(|e| e.mse_in.is_some() && e.mse_out.is_some()))
            .collect();
        if usable.is_empty() {
            return Err(Error::Numerical("no run produced both outlier and inlier test samples".into()));
        }
        let k = usable.len() as f64;
        let avg = |p: usize, out: bool| {
            usable
                .iter()
                .map(|r| if out { r.reports[p].mse_out.unwrap() } else { r.reports[p].mse_in.unwrap() })
                .sum::<f64>()
                / k
        };
        let (base_in, base_out) = (avg(0, false), avg(0, true));
        let rows = (0..TABLE_PREDICTORS)
            .map(|p| {
                let per_in: Vec<f64> = usable
                    .iter()
                    .map(|r| delta_pct(r.reports[p].mse_in.unwrap(), r.reports[0].mse_in.unwrap()))
                    .collect();
                let per_out: Vec<f64> = usable
                    .iter()
                    .map(|r| delta_pct(r.reports[p].mse_out.unwrap(), r.reports[0].mse_out.unwrap()))
                    .collect();
                let (m_in, m_out) = (avg(p, false), avg(p, true));
                DeltaRow {
                    predictor: PREDICTORS[p],
                    delta_in: if p == 0 { 0.0 } else { delta_pct(m_in, base_in) },
                    delta_out: if p == 0 { 0.0 } else { delta_pct(m_out, base_out) },
                    per_run_in: Summary::of(&per_in),
                    per_run_out: Summary::of(&per_out),
                    mean_mse_in: m_in,
                    mean_mse_out: m_out,
                }
            })
            .collect();
        Ok(DeltaTable {
            alpha,
            rows,
            runs_used: usable.len(),
        })
    }
}

/// MC summary of one predictor's conditional-MSE curve at one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    pub predictor: &'static str,
    pub center: f64,
    /// Over the runs in which the bin was populated.
    pub mse: Option<Summary>,
    pub total_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub table: DeltaTable,
    pub runs: Vec<RunRecord>,
    pub failed_runs: Vec<(usize, String)>,
    pub curves: Option<Vec<CurveSummary>>,
}

/// Fits and evaluates every predictor on one train/test draw.
pub fn run_once(spec: &McSpec, run: usize) -> Result<RunRecord> {
    let seed = spec.master_seed.wrapping_add(run as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = spec.process.draw(spec.n_train, &mut rng)?;
    let test = spec.process.draw(spec.n_test, &mut rng)?;

    let mut model = fit_robust(&train.x, &train.z, &train.y, spec.alpha)?;
    if let Some(g) = spec.gate_override {
        model.gate = g;
    }
    let oracle = oracle_for(&model, &train)?;
    evaluate_run(&model, &oracle, &test, spec.curve_bins.as_ref()).map(|(reports, curves)| RunRecord {
        run,
        seed,
        reports,
        gate: model.gate,
        train_labels: model.label_counts,
        curves,
    })
}

fn oracle_for(model: &RobustModel, train: &Sample) -> Result<crate::predictors::OraclePredictor> {
    let c = &model.centering;
    let m = accumulate_moments(&c.center_x(&train.x)?, &c.center_z(&train.z)?, &c.center_y(&train.y))?;
    Ok(fit_oracle(&m)?.with_centering(&c.x, &c.z, c.y))
}

type RunEval = (Vec<EvalReport>, Option<Vec<Vec<CurvePoint>>>);

fn evaluate_run(
    model: &RobustModel,
    oracle: &crate::predictors::OraclePredictor,
    test: &Sample,
    bins: Option<&ZBins>,
) -> Result<RunEval> {
    let labels = outlier_labels(&model.region, &test.z)?;
    let errs = [
        squared_errors(|x, _| model.w_opt.predict(x), &test.x, &test.z, &test.y)?,
        squared_errors(|x, _| model.w_con.predict(x), &test.x, &test.z, &test.y)?,
        squared_errors(|x, _| model.predict(x), &test.x, &test.z, &test.y)?,
        squared_errors(|x, z| oracle.predict(x, z), &test.x, &test.z, &test.y)?,
    ];
    let reports = errs
        .iter()
        .map(|e| EvalReport::from_errors(e, &labels, model.alpha))
        .collect::<Result<Vec<_>>>()?;
    let curves = match bins {
        Some(b) if test.z.ncols() == 1 => Some(
            errs.iter()
                .map(|e| curve_from_errors(e, test.z.column(0).iter().copied(), b))
                .collect(),
        ),
        _ => None,
    };
    Ok((reports, curves))
}

/// Runs the Monte Carlo experiment. Runs execute in parallel; results are
/// ordered by run index, so output does not depend on scheduling.
pub fn run_mc_experiment(spec: &McSpec) -> Result<McResult> {
    if spec.n_runs == 0 {
        return Err(Error::Validation("n_runs must be at least 1".into()));
    }
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Validation("n_train and n_test must be positive".into()));
    }
    let outcomes: Vec<Result<RunRecord>> = (0..spec.n_runs).into_par_iter().map(|r| run_once(spec, r)).collect();
    let mut runs = Vec::new();
    let mut failed_runs = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => runs.push(rec),
            Err(e) => {
                log::warn!("run {r} failed: {e}");
                failed_runs.push((r, e.to_string()));
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::Numerical(format!(
            "all {} runs failed; first error: {}",
            spec.n_runs, failed_runs[0].1
        )));
    }
    let table = DeltaTable::from_runs(&runs, spec.alpha)?;
    let curves = spec.curve_bins.as_ref().and_then(|b| summarize_curves(&runs, b));
    Ok(McResult {
        table,
        runs,
        failed_runs,
        curves,
    })
}

fn summarize_curves(runs: &[RunRecord], bins: &ZBins) -> Option<Vec<CurveSummary>> {
    let mut out = Vec::new();
    for (p, name) in PREDICTORS.iter().enumerate() {
        for k in 0..bins.count {
            let mut vals = Vec::new();
            let mut total = 0;
            for r in runs {
                let pt = r.curves.as_ref()?[p][k];
                total += pt.count;
                if let Some(m) = pt.mse {
                    vals.push(m);
                }
            }
            out.push(CurveSummary {
                predictor: name,
                center: bins.center(k),
                mse: Summary::of(&vals),
                total_count: total,
            });
        }
    }
    Some(out)
}
