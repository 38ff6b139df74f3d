//! The adaptive predictor: optimistic and conservative weights mixed by the
//! learned outlier probability,
//! `ŵ(x) = (1 − p̂(x)) ŵ_o + p̂(x) ŵ_c`.

use crate::centering::Centering;
use crate::error::{Error, Result};
use crate::gate::{fit_gate, LogisticGate, OutlierRegion};
use crate::linalg::{accumulate_moments, Matrix, Vector};
use crate::predictors::{fit_conservative, fit_imputer, fit_optimistic, Imputer, LinearPredictor};

/// Everything produced by one training pass. Immutable after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustModel {
    pub w_opt: LinearPredictor,
    pub w_con: LinearPredictor,
    pub imputer: Imputer,
    pub region: OutlierRegion,
    pub gate: LogisticGate,
    pub alpha: f64,
    pub centering: Centering,
    /// Training labels `I(z_i ∈ Z_α)`: (outliers, inliers).
    pub label_counts: (usize, usize),
}

/// Per-sample quantities behind a robust prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustPrediction {
    pub value: f64,
    pub p_outlier: f64,
    pub delta: f64,
}

/// Fits optimistic and conservative weights, the imputer, the tail region and
/// the logistic gate from raw training data.
pub fn fit_robust(x: &Matrix, z: &Matrix, y: &Vector, alpha: f64) -> Result<RobustModel> {
    let (n, d, q) = (x.nrows(), x.ncols(), z.ncols());
    if z.nrows() != n || y.len() != n {
        return Err(Error::shape("fit_robust (rows)", n, format!("Z: {}, y: {}", z.nrows(), y.len())));
    }
    if n < d + q {
        log::warn!("only {n} training samples for d + q = {} features", d + q);
    }
    let centering = Centering::fit(x, z, y);
    let xc = centering.center_x(x)?;
    let zc = centering.center_z(z)?;
    let yc = centering.center_y(y);
    let moments = accumulate_moments(&xc, &zc, &yc)?;

    let w_opt = fit_optimistic(&moments)?.with_centering(&centering.x, centering.y);
    let w_con = fit_conservative(&moments)?.with_centering(&centering.x, centering.y);
    let imputer = fit_imputer(&moments)?;
    let region = OutlierRegion::from_second_moment(&moments.szz, alpha)?;

    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let xi = xc.row(i).transpose();
        let zi = zc.row(i).transpose();
        let delta = region.delta_stat(&imputer, &xi)?;
        pairs.push((delta, region.quadratic_form(&zi)? >= region.threshold));
    }
    let n_out = pairs.iter().filter(|p| p.1).count();
    let gate = fit_gate(&pairs).map_err(|e| match e {
        Error::SingleClass { n_outliers, n, .. } => Error::SingleClass {
            n_outliers,
            n,
            alpha: Some(alpha),
        },
        other => other,
    })?;
    if !gate.diagnostics.converged {
        log::warn!("outlier gate did not converge; using the capped parameters");
    }

    let region = region.with_center(&centering.z);
    Ok(RobustModel {
        w_opt,
        w_con,
        imputer,
        region,
        gate,
        alpha,
        centering,
        label_counts: (n_out, n - n_out),
    })
}

impl RobustModel {
    pub fn d(&self) -> usize {
        self.w_opt.dim()
    }

    pub fn q(&self) -> usize {
        self.region.q()
    }

    /// `δ(x)` for a raw feature vector.
    pub fn delta(&self, x: &Vector) -> Result<f64> {
        let xc = self.centering.center_x_row(x)?;
        self.region.delta_stat(&self.imputer, &xc)
    }

    pub fn p_outlier(&self, x: &Vector) -> Result<f64> {
        Ok(self.gate.prob_outlier(self.delta(x)?))
    }

    /// `ŵ(x)`, a point on the segment between the two weight vectors.
    pub fn adaptive_weights(&self, x: &Vector) -> Result<Vector> {
        let p = self.p_outlier(x)?;
        Ok(&self.w_opt.weights * (1.0 - p) + &self.w_con.weights * p)
    }

    pub fn predict_detailed(&self, x: &Vector) -> Result<RobustPrediction> {
        let delta = self.delta(x)?;
        let p = self.gate.prob_outlier(delta);
        let opt = self.w_opt.predict(x)?;
        let con = self.w_con.predict(x)?;
        Ok(RobustPrediction {
            value: (1.0 - p) * opt + p * con,
            p_outlier: p,
            delta,
        })
    }

    pub fn predict(&self, x: &Vector) -> Result<f64> {
        Ok(self.predict_detailed(x)?.value)
    }
}
