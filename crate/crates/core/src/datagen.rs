//! Seeded synthetic data: the linear heavy-tailed process, its polynomial
//! variant, and an air-quality-like daily series for the lagged pipeline.
//!
//! Linear process, per sample:
//!
//! ```text
//! z ~ t(0, 1, ν_z),  u ~ t(0, Σ_u, ν_u)
//! x = 1ρz + u + ε_x ∈ R³
//! y = z + 1ᵀx + ε_y
//! ```
//!
//! With `unit_variance_t` set (the default) every t draw with `ν > 2` is
//! divided by `sqrt(ν / (ν − 2))` so it has the variance of its scale matrix.
//! Together with the default `Σ_u = (1 − ρ²) I₃` this makes `ρ` the
//! correlation between `z` and each `x_j` when `ε_x` is switched off.
//!
//! Parallel trials derive their seeds as `master_seed + trial_index`.

use chrono::{Datelike, NaiveDate};
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub rho: f64,
    pub nu_z: f64,
    pub nu_u: f64,
    /// `None` selects `(1 − ρ²) I₃`.
    pub sigma_u: Option<Matrix>,
    pub noise_x_var: f64,
    pub noise_y_var: f64,
    pub unit_variance_t: bool,
    pub n: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            rho: 0.7,
            nu_z: 3.0,
            nu_u: 5.0,
            sigma_u: None,
            noise_x_var: 0.01,
            noise_y_var: 0.01,
            unit_variance_t: true,
            n: 1000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn sigma_u(&self) -> Matrix {
        self.sigma_u
            .clone()
            .unwrap_or_else(|| Matrix::identity(3, 3) * (1.0 - self.rho * self.rho))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::Validation(format!("rho must lie in [-1, 1], got {}", self.rho)));
        }
        for (name, nu) in [("nu_z", self.nu_z), ("nu_u", self.nu_u)] {
            if !(nu >= 1.0) || !nu.is_finite() {
                return Err(Error::Validation(format!("{name} must be >= 1, got {nu}")));
            }
        }
        for (name, v) in [("noise_x_var", self.noise_x_var), ("noise_y_var", self.noise_y_var)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be a nonnegative variance, got {v}")));
            }
        }
        let s = self.sigma_u();
        if s.shape() != (3, 3) {
            return Err(Error::shape("sigma_u", "3x3", format!("{}x{}", s.nrows(), s.ncols())));
        }
        scale_factor(&s)?;
        Ok(())
    }
}

/// Polynomial variant: `y = w_zᵀψ(z) + w_xᵀφ(x) + ε_y` with `ψ(z) = [z, z²]`
/// and `φ(x) = [x₁, x₂, x₃, x₁², x₂², x₃²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyConfig {
    pub base: SyntheticConfig,
    /// `[w₀, w₁]`; `w₁` weights the nonlinear effect of `z`.
    pub wz: [f64; 2],
    pub wx: [f64; 6],
}

impl Default for PolyConfig {
    fn default() -> Self {
        PolyConfig {
            base: SyntheticConfig {
                nu_z: 5.0,
                nu_u: 5.0,
                ..SyntheticConfig::default()
            },
            wz: [1.0, 0.1],
            wx: [1.0; 6],
        }
    }
}

impl PolyConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.base.nu_z < 5.0 || self.base.nu_u < 5.0 {
            return Err(Error::Validation(format!(
                "polynomial process needs nu_z >= 5 and nu_u >= 5 so the quadratic terms have finite variance \
                 (got nu_z = {}, nu_u = {})",
                self.base.nu_z, self.base.nu_u
            )));
        }
        Ok(())
    }
}

/// One draw of `(X, Z, y)`. For the polynomial process `z` holds `ψ(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Matrix,
    pub z: Matrix,
    pub y: Vector,
}

/// Symmetric square root style factor `L` with `L Lᵀ = scale`.
fn scale_factor(scale: &Matrix) -> Result<Matrix> {
    let k = scale.nrows();
    if scale.ncols() != k {
        return Err(Error::shape("t scale", "square", format!("{}x{}", k, scale.ncols())));
    }
    if k == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let amax = scale.amax();
    if (scale - scale.transpose()).amax() > 1e-12 * (1.0 + amax) {
        return Err(Error::Validation("t scale matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(scale.clone());
    let floor = -1e-10 * amax.max(1.0);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < floor) {
        return Err(Error::Validation(format!(
            "t scale matrix is not positive semidefinite (eigenvalue {bad:e})"
        )));
    }
    let sqrt_l = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&sqrt_l))
}

struct TSampler {
    factor: Matrix,
    chi: ChiSquared<f64>,
    dof: f64,
    /// Multiplier applied to every draw (1 or the unit-variance normalizer).
    norm: f64,
}

impl TSampler {
    fn new(dof: f64, scale: &Matrix, unit_variance: bool) -> Result<Self> {
        if !(dof > 0.0) || !dof.is_finite() {
            return Err(Error::Validation(format!("t degrees of freedom must be positive, got {dof}")));
        }
        let chi = ChiSquared::new(dof).map_err(|e| Error::Validation(e.to_string()))?;
        let norm = if unit_variance && dof > 2.0 {
            ((dof - 2.0) / dof).sqrt()
        } else {
            1.0
        };
        Ok(TSampler {
            factor: scale_factor(scale)?,
            chi,
            dof,
            norm,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let k = self.factor.nrows();
        let g: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let w: f64 = self.chi.sample(rng);
        let scale = self.norm / (w / self.dof).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, gj) in g.iter().enumerate() {
                s += self.factor[(i, j)] * gj;
            }
            *o = s * scale;
        }
    }
}

/// `n` rows of a multivariate t with the given scale: a Gaussian with that
/// covariance divided by an independent `sqrt(χ²_ν / ν)` per row.
pub fn sample_t(dof: f64, scale: &Matrix, n: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_t_with(dof, scale, n, &mut rng)
}

pub fn sample_t_with<R: Rng + ?Sized>(dof: f64, scale: &Matrix, n: usize, rng: &mut R) -> Result<Matrix> {
    let sampler = TSampler::new(dof, scale, false)?;
    let k = scale.nrows();
    let mut out = Matrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        sampler.draw(rng, &mut row);
        for j in 0..k {
            out[(i, j)] = row[j];
        }
    }
    Ok(out)
}

/// Rows of `(x, z)` shared by both processes: returns `(X, raw z)`.
fn draw_features<R: Rng + ?Sized>(cfg: &SyntheticConfig, n: usize, rng: &mut R, y_noise: &mut Vec<f64>) -> Result<(Matrix, Vec<f64>)> {
    cfg.validate()?;
    let zs = TSampler::new(cfg.nu_z, &Matrix::identity(1, 1), cfg.unit_variance_t)?;
    let us = TSampler::new(cfg.nu_u, &cfg.sigma_u(), cfg.unit_variance_t)?;
    let sx = cfg.noise_x_var.sqrt();
    let sy = cfg.noise_y_var.sqrt();
    let mut x = Matrix::zeros(n, 3);
    let mut z = Vec::with_capacity(n);
    y_noise.clear();
    let mut zbuf = [0.0];
    let mut ubuf = [0.0; 3];
    for i in 0..n {
        zs.draw(rng, &mut zbuf);
        us.draw(rng, &mut ubuf);
        for j in 0..3 {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = cfg.rho * zbuf[0] + ubuf[j] + sx * e;
        }
        let e: f64 = rng.sample(StandardNormal);
        y_noise.push(sy * e);
        z.push(zbuf[0]);
    }
    Ok((x, z))
}

pub fn generate_linear(cfg: &SyntheticConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_linear_with(cfg, cfg.n, &mut rng)
}

pub fn generate_linear_with<R: Rng + ?Sized>(cfg: &SyntheticConfig, n: usize, rng: &mut R) -> Result<Sample> {
    let mut noise = Vec::new();
    let (x, z) = draw_features(cfg, n, rng, &mut noise)?;
    let y = Vector::from_fn(n, |i, _| z[i] + (x[(i, 0)] + x[(i, 1)] + x[(i, 2)]) + noise[i]);
    Ok(Sample {
        x,
        z: Matrix::from_column_slice(n, 1, &z),
        y,
    })
}

/// Polynomial process. Returns raw `x` and the missing block `ψ(z) = [z, z²]`.
pub fn generate_poly(cfg: &PolyConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base.seed);
    generate_poly_with(cfg, cfg.base.n, &mut rng)
}

pub fn generate_poly_with<R: Rng + ?Sized>(cfg: &PolyConfig, n: usize, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let mut noise = Vec::new();
    let (x, z) = draw_features(&cfg.base, n, rng, &mut noise)?;
    let phi = feature_map_quadratic(&x)?;
    let psi = Matrix::from_fn(n, 2, |i, j| if j == 0 { z[i] } else { z[i] * z[i] });
    let y = Vector::from_fn(n, |i, _| {
        let mut v = cfg.wz[0] * psi[(i, 0)] + cfg.wz[1] * psi[(i, 1)];
        for (j, w) in cfg.wx.iter().enumerate() {
            v += w * phi[(i, j)];
        }
        v + noise[i]
    });
    Ok(Sample { x, z: psi, y })
}

/// `φ(x) = [x₁, x₂, x₃, x₁², x₂², x₃²]` row by row.
pub fn feature_map_quadratic(x: &Matrix) -> Result<Matrix> {
    if x.ncols() != 3 {
        return Err(Error::shape("feature_map_quadratic (columns)", 3, x.ncols()));
    }
    Ok(Matrix::from_fn(x.nrows(), 6, |i, j| {
        if j < 3 {
            x[(i, j)]
        } else {
            x[(i, j - 3)] * x[(i, j - 3)]
        }
    }))
}

/// Settings for an air-quality-like daily series of NO_x and O_3 averages.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeriesConfig {
    pub start: NaiveDate,
    pub days: usize,
    /// Per-cell probability that a daily value is missing.
    pub gap_rate: f64,
    /// Degrees of freedom of the same-day weather shock shared by both series.
    pub shock_dof: f64,
    pub seed: u64,
}

impl Default for DailySeriesConfig {
    fn default() -> Self {
        DailySeriesConfig {
            start: NaiveDate::from_ymd_opt(2006, 1, 1).expect("valid date"),
            // 2006-01-01 through 2015-12-31
            days: 3652,
            gap_rate: 0.0,
            shock_dof: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub dates: Vec<NaiveDate>,
    pub nox: Vec<Option<f64>>,
    pub o3: Vec<Option<f64>>,
}

/// Seasonal NO_x and O_3 with persistent anomalies and a heavy-tailed
/// same-day shock that raises O_3 and lowers NO_x. The shock is invisible
/// in the previous days' values, so same-day O_3 carries information about
/// the next NO_x value that lagged features cannot supply.
pub fn generate_daily_series(cfg: &DailySeriesConfig) -> Result<DailySeries> {
    if !(0.0..1.0).contains(&cfg.gap_rate) {
        return Err(Error::Validation(format!("gap_rate must lie in [0, 1), got {}", cfg.gap_rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shock = TSampler::new(cfg.shock_dof, &Matrix::identity(1, 1), true)?;
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let mut out = DailySeries {
        dates: Vec::with_capacity(cfg.days),
        nox: Vec::with_capacity(cfg.days),
        o3: Vec::with_capacity(cfg.days),
    };
    let mut w = [0.0];
    for t in 0..cfg.days {
        let date = cfg.start + chrono::Days::new(t as u64);
        let phase = 2.0 * std::f64::consts::PI * f64::from(date.ordinal0()) / 365.25;
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        a = 0.7 * a + e1;
        b = 0.5 * b + e2;
        shock.draw(&mut rng, &mut w);
        let nox = 40.0 + 15.0 * phase.cos() + 6.0 * a - 8.0 * w[0];
        let o3 = 50.0 - 20.0 * phase.cos() + 5.0 * b - 2.0 * a + 8.0 * w[0];
        let gap_nox = rng.random::<f64>() < cfg.gap_rate;
        let gap_o3 = rng.random::<f64>() < cfg.gap_rate;
        out.dates.push(date);
        out.nox.push((!gap_nox).then_some(nox));
        out.o3.push((!gap_o3).then_some(o3));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_gives_zero_samples() {
        let s = sample_t(3.0, &Matrix::zeros(2, 2), 50, 1).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let scale = Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        assert_eq!(sample_t(4.0, &scale, 100, 9).unwrap(), sample_t(4.0, &scale, 100, 9).unwrap());
        assert_ne!(sample_t(4.0, &scale, 100, 9).unwrap(), sample_t(4.0, &scale, 100, 10).unwrap());
        let cfg = SyntheticConfig::default();
        assert_eq!(generate_linear(&cfg).unwrap(), generate_linear(&cfg).unwrap());
    }

    #[test]
    fn rejects_bad_scale() {
        let not_psd = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sample_t(3.0, &not_psd, 10, 0).is_err());
        assert!(sample_t(0.0, &Matrix::identity(1, 1), 10, 0).is_err());
    }

    #[test]
    fn t_variance_matches_moment() {
        // ν/(ν−2) = 3 for ν = 3; the fourth moment is infinite, hence the slack.
        let s = sample_t(3.0, &Matrix::identity(1, 1), 1_000_000, 21).unwrap();
        let var = s.iter().map(|v| v * v).sum::<f64>() / s.nrows() as f64;
        assert!((var - 3.0).abs() <= 0.3, "variance {var}");
    }

    #[test]
    fn linear_process_identities() {
        let cfg = SyntheticConfig {
            rho: 0.0,
            sigma_u: Some(Matrix::zeros(3, 3)),
            noise_x_var: 0.0,
            n: 200,
            ..SyntheticConfig::default()
        };
        let s = generate_linear(&cfg).unwrap();
        assert!(s.x.iter().all(|&v| v == 0.0));

        let cfg = SyntheticConfig {
            noise_y_var: 0.0,
            n: 500,
            ..SyntheticConfig::default()
        };
        let s = generate_linear(&cfg).unwrap();
        for i in 0..500 {
            let r = s.y[i] - s.z[(i, 0)] - s.x.row(i).sum();
            assert!(r.abs() <= 1e-12 * (1.0 + s.y[i].abs()));
        }
    }

    #[test]
    fn correlation_equals_rho() {
        let cfg = SyntheticConfig {
            n: 1_000_000,
            seed: 3,
            ..SyntheticConfig::default()
        };
        let s = generate_linear(&cfg).unwrap();
        let n = cfg.n as f64;
        let z = s.z.column(0);
        let zm = z.mean();
        let zv = z.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n;
        for j in 0..3 {
            let x = s.x.column(j);
            let xm = x.mean();
            let xv = x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
            let c = z.iter().zip(x.iter()).map(|(a, b)| (a - zm) * (b - xm)).sum::<f64>() / n;
            let corr = c / (zv * xv).sqrt();
            assert!((corr - 0.7).abs() <= 0.03, "corr(z, x{j}) = {corr}");
        }
    }

    #[test]
    fn heavy_tails_exceed_gaussian() {
        let cfg = SyntheticConfig {
            n: 1_000_000,
            seed: 5,
            ..SyntheticConfig::default()
        };
        let s = generate_linear(&cfg).unwrap();
        let z = s.z.column(0);
        let sd = (z.iter().map(|v| v * v).sum::<f64>() / cfg.n as f64).sqrt();
        let frac = z.iter().filter(|v| v.abs() > 4.0 * sd).count() as f64 / cfg.n as f64;
        // two-sided Gaussian tail beyond 4σ
        let gaussian = 6.334e-5;
        assert!(frac >= 5.0 * gaussian, "tail fraction {frac}");
    }

    #[test]
    fn quadratic_map() {
        let x = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let phi = feature_map_quadratic(&x).unwrap();
        assert_eq!(phi.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 1.0, 4.0, 9.0]);
        assert!(phi.row(1).iter().all(|&v| v == 0.0));
        let r = Matrix::from_row_slice(1, 3, &[-0.5, 1.25, 7.0]);
        let phi = feature_map_quadratic(&r).unwrap();
        for j in 0..3 {
            assert_eq!(phi[(0, j)], r[(0, j)]);
            assert_eq!(phi[(0, j + 3)], r[(0, j)] * r[(0, j)]);
        }
        assert!(feature_map_quadratic(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn poly_process() {
        let mut cfg = PolyConfig::default();
        cfg.base.n = 300;
        cfg.wz = [0.0, 0.0];
        cfg.wx = [0.0; 6];
        cfg.base.noise_y_var = 0.0;
        let s = generate_poly(&cfg).unwrap();
        assert!(s.y.iter().all(|&v| v == 0.0));
        assert_eq!(s.z.ncols(), 2);
        for i in 0..300 {
            assert_eq!(s.z[(i, 1)], s.z[(i, 0)] * s.z[(i, 0)]);
        }

        // w1 = 0: the z contribution is w0 z only
        let mut cfg = PolyConfig::default();
        cfg.base.n = 300;
        cfg.base.noise_y_var = 0.0;
        cfg.wz = [2.0, 0.0];
        cfg.wx = [0.0; 6];
        let s = generate_poly(&cfg).unwrap();
        for i in 0..300 {
            assert!((s.y[i] - 2.0 * s.z[(i, 0)]).abs() <= 1e-12);
        }

        cfg.base.nu_z = 3.0;
        assert!(matches!(generate_poly(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn daily_series_shape() {
        let cfg = DailySeriesConfig {
            gap_rate: 0.01,
            ..DailySeriesConfig::default()
        };
        let s = generate_daily_series(&cfg).unwrap();
        assert_eq!(s.dates.len(), 3652);
        assert_eq!(*s.dates.last().unwrap(), NaiveDate::from_ymd_opt(2015, 12, 31).unwrap());
        let gaps = s.nox.iter().filter(|v| v.is_none()).count();
        assert!(gaps > 0 && gaps < 100);
        assert_eq!(generate_daily_series(&cfg).unwrap(), s);
    }
}
