//! Tail region of the missing block, the predictive statistic `δ(x)`, and
//! the logistic model of the conditional outlier probability.
//!
//! The tail region is `Z_α = { z : zᵀ M z ≥ q/α }` with `M = (E_n[z zᵀ])†`.
//! A Chebyshev-type argument bounds its probability by `α`. The gate models
//! `Pr{z ∈ Z_α | x}` as a logistic function of
//! `δ(x) = ‖ẑ(x)‖_M`, fitted by minimizing the empirical cross-entropy.
//!
//! The parameters `(κ, δ₀)` of `1 / (1 + exp κ(δ − δ₀))` are kept
//! alongside the affine logit `b0 + b1·δ`, with `b1 = −κ` and `b0 = κ δ₀`.
//! The affine form is what gets fitted: it is convex and stays well defined
//! at `κ = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pseudoinverse, Matrix, Vector, DEFAULT_PINV_TOL};
use crate::predictors::Imputer;

/// Newton iteration cap for [`fit_gate`].
pub const GATE_MAX_ITER: usize = 500;
/// Gradient-norm convergence tolerance for [`fit_gate`].
pub const GATE_GRAD_TOL: f64 = 1e-8;
/// Bound on `max(|b0|, |b1|)`; reached only under perfect separation.
pub const GATE_PARAM_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierRegion {
    /// Mahalanobis metric `(E_n[z zᵀ])†`.
    pub minv: Matrix,
    pub alpha: f64,
    pub threshold: f64,
    /// Training mean of `z`, subtracted before the quadratic form.
    pub z_mean: Vector,
}

impl OutlierRegion {
    /// Region from the (centered) second moment of `z`.
    pub fn from_second_moment(szz: &Matrix, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if szz.nrows() != szz.ncols() {
            return Err(Error::shape("outlier region metric", "square", format!("{}x{}", szz.nrows(), szz.ncols())));
        }
        let p = pseudoinverse(szz, DEFAULT_PINV_TOL)?;
        let minv = (&p + p.transpose()) * 0.5;
        let q = szz.nrows();
        Ok(OutlierRegion {
            minv,
            alpha,
            threshold: q as f64 / alpha,
            z_mean: Vector::zeros(q),
        })
    }

    pub fn with_center(mut self, z_mean: &[f64]) -> Self {
        assert_eq!(z_mean.len(), self.q(), "region center dimension");
        self.z_mean = Vector::from_column_slice(z_mean);
        self
    }

    /// Same metric, different level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let mut r = self.clone();
        r.alpha = alpha;
        r.threshold = self.q() as f64 / alpha;
        Ok(r)
    }

    pub fn q(&self) -> usize {
        self.minv.nrows()
    }

    /// `vᵀ M v` for an already centered vector.
    pub fn quadratic_form(&self, v: &Vector) -> Result<f64> {
        if v.len() != self.q() {
            return Err(Error::shape("quadratic form (z length)", self.q(), v.len()));
        }
        Ok((&self.minv * v).dot(v))
    }

    /// Mahalanobis statistic of a raw `z`.
    pub fn mahalanobis_stat(&self, z: &Vector) -> Result<f64> {
        if z.len() != self.q() {
            return Err(Error::shape("mahalanobis_stat (z length)", self.q(), z.len()));
        }
        let zc = z - &self.z_mean;
        Ok(self.quadratic_form(&zc)?.max(0.0))
    }

    /// Membership in the tail region. Boundary points count as outliers.
    pub fn is_outlier(&self, z: &Vector) -> Result<bool> {
        Ok(self.mahalanobis_stat(z)? >= self.threshold)
    }

    /// `δ(x) = sqrt(ẑ(x)ᵀ M ẑ(x))` for a centered `x`.
    pub fn delta_stat(&self, imputer: &Imputer, xc: &Vector) -> Result<f64> {
        let zhat = imputer.impute(xc)?;
        let qf = self.quadratic_form(&zhat)?;
        let slack = 1e-12 * (1.0f64).max(zhat.norm_squared() * self.minv.amax());
        if qf < -slack {
            return Err(Error::Numerical(format!(
                "negative quadratic form {qf:e} in delta statistic"
            )));
        }
        Ok(qf.max(0.0).sqrt())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDiagnostics {
    pub cross_entropy: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticGate {
    pub b0: f64,
    pub b1: f64,
    /// `−b1`, when `|b1| > 1e-12`.
    pub kappa: Option<f64>,
    /// `−b0 / b1`, when `|b1| > 1e-12`.
    pub delta0: Option<f64>,
    pub diagnostics: GateDiagnostics,
}

impl LogisticGate {
    pub fn from_logits(b0: f64, b1: f64) -> Self {
        let (kappa, delta0) = if b1.abs() > 1e-12 {
            (Some(-b1), Some(-b0 / b1))
        } else {
            (None, None)
        };
        LogisticGate {
            b0,
            b1,
            kappa,
            delta0,
            diagnostics: GateDiagnostics {
                cross_entropy: f64::NAN,
                iterations: 0,
                converged: true,
            },
        }
    }

    /// Gate in the `1 / (1 + exp κ(δ − δ₀))` parameterization.
    pub fn from_kappa_delta0(kappa: f64, delta0: f64) -> Self {
        Self::from_logits(kappa * delta0, -kappa)
    }

    /// `P̂{outlier | δ}`, always strictly inside `(0, 1)`.
    pub fn prob_outlier(&self, delta: f64) -> f64 {
        let p = sigmoid(self.b0 + self.b1 * delta);
        p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Mean cross-entropy of `sigmoid(b0 + b1 δ)` against the outlier labels.
pub fn cross_entropy(pairs: &[(f64, bool)], b0: f64, b1: f64) -> f64 {
    let n = pairs.len().max(1) as f64;
    pairs
        .iter()
        .map(|&(delta, label)| {
            let t = b0 + b1 * delta;
            softplus(t) - if label { t } else { 0.0 }
        })
        .sum::<f64>()
        / n
}

fn gradient_hessian(pairs: &[(f64, bool)], b: [f64; 2]) -> ([f64; 2], [f64; 3]) {
    let n = pairs.len() as f64;
    let mut g = [0.0; 2];
    let mut h = [0.0; 3]; // h00, h01, h11
    for &(delta, label) in pairs {
        let p = sigmoid(b[0] + b[1] * delta);
        let r = p - if label { 1.0 } else { 0.0 };
        let w = p * (1.0 - p);
        g[0] += r;
        g[1] += r * delta;
        h[0] += w;
        h[1] += w * delta;
        h[2] += w * delta * delta;
    }
    (g.map(|v| v / n), h.map(|v| v / n))
}

/// Fits the affine-logit gate to `(δ(x_i), I(z_i ∈ Z_α))` pairs by Newton's
/// method with step halving.
pub fn fit_gate(pairs: &[(f64, bool)]) -> Result<LogisticGate> {
    if let Some(&(d, _)) = pairs.iter().find(|(d, _)| !d.is_finite() || *d < 0.0) {
        return Err(Error::Validation(format!("gate inputs must be finite and nonnegative, got {d}")));
    }
    let n = pairs.len();
    let n_pos = pairs.iter().filter(|(_, l)| *l).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass {
            n_outliers: n_pos,
            n,
            alpha: None,
        });
    }

    let frac = n_pos as f64 / n as f64;
    let mut b = [(frac / (1.0 - frac)).ln(), 0.0];
    let mut loss = cross_entropy(pairs, b[0], b[1]);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < GATE_MAX_ITER {
        let (g, h) = gradient_hessian(pairs, b);
        if g[0].hypot(g[1]) <= GATE_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;

        let det = h[0] * h[2] - h[1] * h[1];
        let step = if det > 1e-300 && det.is_finite() {
            [(h[2] * g[0] - h[1] * g[1]) / det, (h[0] * g[1] - h[1] * g[0]) / det]
        } else {
            g
        };

        let mut t = 1.0;
        let mut next = b;
        let mut next_loss = f64::INFINITY;
        while t > 1e-12 {
            next = [b[0] - t * step[0], b[1] - t * step[1]];
            next_loss = cross_entropy(pairs, next[0], next[1]);
            if next_loss <= loss {
                break;
            }
            t *= 0.5;
        }
        if next_loss > loss {
            // No descent left at machine precision.
            break;
        }

        let size = next[0].abs().max(next[1].abs());
        if size > GATE_PARAM_CAP {
            let s = GATE_PARAM_CAP / size;
            b = [next[0] * s, next[1] * s];
            loss = cross_entropy(pairs, b[0], b[1]);
            log::warn!("gate labels look perfectly separable; logit parameters capped at {GATE_PARAM_CAP}");
            break;
        }
        b = next;
        loss = next_loss;
    }

    let mut gate = LogisticGate::from_logits(b[0], b[1]);
    gate.diagnostics = GateDiagnostics {
        cross_entropy: loss,
        iterations,
        converged,
    };
    Ok(gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StudentT};

    fn unit_region(alpha: f64) -> OutlierRegion {
        OutlierRegion::from_second_moment(&Matrix::identity(1, 1), alpha).unwrap()
    }

    #[test]
    fn mahalanobis_examples() {
        let r = unit_region(0.1);
        assert_eq!(r.mahalanobis_stat(&Vector::zeros(1)).unwrap(), 0.0);
        assert_eq!(r.mahalanobis_stat(&Vector::from_vec(vec![3.0])).unwrap(), 9.0);
        assert!(r.mahalanobis_stat(&Vector::zeros(2)).is_err());
    }

    #[test]
    fn mahalanobis_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let szz = &a * a.transpose() + Matrix::identity(2, 2) * 0.1;
        let r = OutlierRegion::from_second_moment(&szz, 0.2).unwrap();
        for _ in 0..50 {
            let z = Vector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    s += z[i] * r.minv[(i, j)] * z[j];
                }
            }
            assert!((r.mahalanobis_stat(&z).unwrap() - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn threshold_and_ties() {
        let r = unit_region(0.1);
        assert_eq!(r.threshold, 10.0);
        assert!(!r.is_outlier(&Vector::from_vec(vec![3.0])).unwrap());
        assert!(r.is_outlier(&Vector::from_vec(vec![10f64.sqrt()])).unwrap());
        let r = OutlierRegion::from_second_moment(&Matrix::identity(1, 1), 1.0)
            .unwrap()
            .with_center(&[5.0]);
        assert!(r.is_outlier(&Vector::from_vec(vec![6.0])).unwrap());
        assert!(!r.is_outlier(&Vector::from_vec(vec![5.5])).unwrap());
        assert!(OutlierRegion::from_second_moment(&Matrix::identity(1, 1), 0.0).is_err());
        assert!(OutlierRegion::from_second_moment(&Matrix::identity(1, 1), 1.5).is_err());
    }

    #[test]
    fn tail_frequency_respects_chebyshev_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let t3 = StudentT::new(3.0).unwrap();
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| t3.sample(&mut rng)).collect();
        let m2 = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
        for alpha in [0.05, 0.1, 0.3] {
            let r = OutlierRegion::from_second_moment(&Matrix::from_element(1, 1, m2), alpha).unwrap();
            let hits = draws.iter().filter(|&&z| r.is_outlier(&Vector::from_element(1, z)).unwrap()).count();
            let rate = hits as f64 / n as f64;
            assert!(rate <= alpha + 3.0 * (alpha * (1.0 - alpha) / n as f64).sqrt(), "alpha {alpha}: {rate}");
        }
    }

    #[test]
    fn delta_stat_cases() {
        let r = unit_region(0.1);
        let zero = Imputer { gmat: Matrix::zeros(1, 3) };
        assert_eq!(r.delta_stat(&zero, &Vector::from_vec(vec![1.0, 2.0, 3.0])).unwrap(), 0.0);
        let copy = Imputer {
            gmat: Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
        };
        assert_eq!(r.delta_stat(&copy, &Vector::from_vec(vec![4.0, -1.0, 2.0])).unwrap(), 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let r = OutlierRegion::from_second_moment(&(&a * a.transpose()), 0.1).unwrap();
        let imp = Imputer {
            gmat: Matrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0)),
        };
        for _ in 0..50 {
            let x = Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let d = r.delta_stat(&imp, &x).unwrap();
            let m = r.mahalanobis_stat(&imp.impute(&x).unwrap()).unwrap();
            assert!((d * d - m).abs() <= 1e-10 * (1.0 + m));
        }
    }

    #[test]
    fn prob_outlier_examples() {
        let g = LogisticGate::from_kappa_delta0(-1.78, 4.21);
        assert!((g.prob_outlier(4.21) - 0.5).abs() <= 1e-15);
        assert!((g.kappa.unwrap() + 1.78).abs() <= 1e-15);
        assert!((g.delta0.unwrap() - 4.21).abs() <= 1e-12);
        assert!(g.prob_outlier(8.0) > g.prob_outlier(2.0));
        let flat = LogisticGate::from_logits(0.0, 0.0);
        assert_eq!(flat.prob_outlier(123.0), 0.5);
        assert!(flat.kappa.is_none());
        let sharp = LogisticGate::from_logits(-1e3, 1e3);
        let hi = sharp.prob_outlier(100.0);
        let lo = sharp.prob_outlier(0.0);
        assert!(hi < 1.0 && hi > 0.0 && lo > 0.0 && lo < 1.0);
    }

    #[test]
    fn fit_recovers_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<(f64, bool)> = (0..20_000)
            .map(|_| {
                let d: f64 = rng.random_range(0.0..10.0);
                let p = 1.0 / (1.0 + (-(2.0 * (d - 5.0))).exp());
                (d, rng.random::<f64>() < p)
            })
            .collect();
        let g = fit_gate(&pairs).unwrap();
        assert!(g.diagnostics.converged);
        assert!((g.delta0.unwrap() - 5.0).abs() < 0.1, "{g:?}");
        assert!(g.kappa.unwrap() < 0.0);
        assert!(g.diagnostics.cross_entropy <= cross_entropy(&pairs, 0.0, 0.0));
    }

    #[test]
    fn fit_null_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<(f64, bool)> = (0..20_000)
            .map(|_| (rng.random_range(0.0..5.0), rng.random::<bool>()))
            .collect();
        let g = fit_gate(&pairs).unwrap();
        let frac = pairs.iter().filter(|p| p.1).count() as f64 / pairs.len() as f64;
        assert!(g.b1.abs() < 0.05);
        assert!((g.prob_outlier(2.5) - frac).abs() < 0.02);
        let entropy = -(frac * frac.ln() + (1.0 - frac) * (1.0 - frac).ln());
        assert!((g.diagnostics.cross_entropy - entropy).abs() < 1e-3);
    }

    #[test]
    fn fit_beats_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(f64, bool)> = (0..500)
            .map(|_| {
                let d: f64 = rng.random_range(0.0..6.0);
                (d, rng.random::<f64>() < d / 8.0)
            })
            .collect();
        let g = fit_gate(&pairs).unwrap();
        let best = cross_entropy(&pairs, g.b0, g.b1);
        for _ in 0..100 {
            let (b0, b1) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            assert!(best <= cross_entropy(&pairs, b0, b1));
        }
        for d in [0.0, 1.0, 3.0, 50.0] {
            let p = g.prob_outlier(d);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn fit_single_class_and_separation() {
        let pairs = vec![(1.0, false), (2.0, false)];
        assert!(matches!(fit_gate(&pairs), Err(Error::SingleClass { n_outliers: 0, n: 2, .. })));
        let pairs: Vec<(f64, bool)> = (0..100).map(|i| (i as f64 / 10.0, i >= 50)).collect();
        let g = fit_gate(&pairs).unwrap();
        assert!(!g.diagnostics.converged);
        assert!(g.b0.abs().max(g.b1.abs()) <= GATE_PARAM_CAP + 1e-9);
        assert!(g.b1 > 0.0);
        assert!(g.prob_outlier(9.0) > 0.99 && g.prob_outlier(1.0) < 0.01);
        assert!(fit_gate(&[(f64::NAN, true), (1.0, false)]).is_err());
    }
}
