//! Optimistic, conservative and oracle linear predictors, and the linear
//! imputer of the missing block.
//!
//! Every fit takes [`SecondMoments`] of centered data. The returned
//! predictors carry zero centering; attach training means with
//! [`LinearPredictor::with_centering`] before predicting on raw features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    minimize_quadratic_on_affine, null_space_projector, pseudoinverse, rank, Matrix, SecondMoments,
    Vector, DEFAULT_PINV_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Optimistic,
    Conservative,
    /// The `x`-part of the oracle, used with `z` dropped.
    OracleRestricted,
}

/// `ŷ(x) = ȳ + wᵀ(x − x̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub weights: Vector,
    pub kind: PredictorKind,
    pub x_mean: Vector,
    pub y_mean: f64,
    /// `‖E_n[z xᵀ] w − E_n[z y]‖∞` at fit time (conservative only).
    pub constraint_residual: Option<f64>,
    /// Set when `E_n[z xᵀ]` is rank deficient and the constraint set may be empty.
    pub constraint_infeasible: bool,
}

impl LinearPredictor {
    fn new(weights: Vector, kind: PredictorKind) -> Self {
        let d = weights.len();
        LinearPredictor {
            weights,
            kind,
            x_mean: Vector::zeros(d),
            y_mean: 0.0,
            constraint_residual: None,
            constraint_infeasible: false,
        }
    }

    pub fn with_centering(mut self, x_mean: &[f64], y_mean: f64) -> Self {
        assert_eq!(x_mean.len(), self.weights.len(), "centering dimension");
        self.x_mean = Vector::from_column_slice(x_mean);
        self.y_mean = y_mean;
        self
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Prediction for a raw (uncentered) feature vector.
    pub fn predict(&self, x: &Vector) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape("predict (x length)", self.dim(), x.len()));
        }
        Ok(self.y_mean + self.weights.dot(&(x - &self.x_mean)))
    }

    /// Prediction for a feature vector that is already centered.
    pub fn predict_centered(&self, xc: &Vector) -> f64 {
        self.y_mean + self.weights.dot(xc)
    }
}

/// `ŷ⋆(x, z) = αᵀx + βᵀz` on centered features, plus the outcome mean.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePredictor {
    pub alpha: Vector,
    pub beta: Vector,
    pub x_mean: Vector,
    pub z_mean: Vector,
    pub y_mean: f64,
}

impl OraclePredictor {
    pub fn with_centering(mut self, x_mean: &[f64], z_mean: &[f64], y_mean: f64) -> Self {
        self.x_mean = Vector::from_column_slice(x_mean);
        self.z_mean = Vector::from_column_slice(z_mean);
        self.y_mean = y_mean;
        self
    }

    pub fn predict(&self, x: &Vector, z: &Vector) -> Result<f64> {
        if x.len() != self.alpha.len() {
            return Err(Error::shape("oracle predict (x length)", self.alpha.len(), x.len()));
        }
        if z.len() != self.beta.len() {
            return Err(Error::shape("oracle predict (z length)", self.beta.len(), z.len()));
        }
        Ok(self.y_mean + self.alpha.dot(&(x - &self.x_mean)) + self.beta.dot(&(z - &self.z_mean)))
    }

    pub fn restricted(&self) -> LinearPredictor {
        let mut p = LinearPredictor::new(self.alpha.clone(), PredictorKind::OracleRestricted);
        p.x_mean = self.x_mean.clone();
        p.y_mean = self.y_mean;
        p
    }
}

/// Linear regression imputer `ẑ(x) = G x` with `G = E_n[z xᵀ] (E_n[x xᵀ])†`.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputer {
    pub gmat: Matrix,
}

impl Imputer {
    /// Imputes the missing block from a centered `x`.
    pub fn impute(&self, xc: &Vector) -> Result<Vector> {
        if xc.len() != self.gmat.ncols() {
            return Err(Error::shape("impute (x length)", self.gmat.ncols(), xc.len()));
        }
        Ok(&self.gmat * xc)
    }
}

pub fn fit_optimistic(moments: &SecondMoments) -> Result<LinearPredictor> {
    let w = pseudoinverse(&moments.sxx, DEFAULT_PINV_TOL)? * &moments.sxy;
    Ok(LinearPredictor::new(w, PredictorKind::Optimistic))
}

/// MSE-minimizer over `{w : E_n[z xᵀ] w = E_n[z y]}`.
///
/// When `E_n[z xᵀ]` has rank below `q` the least-squares anchor is used and
/// `constraint_infeasible` is set; the fit still succeeds.
pub fn fit_conservative(moments: &SecondMoments) -> Result<LinearPredictor> {
    let (d, q) = (moments.d(), moments.q());
    if q > 0 && q >= d {
        return Err(Error::Validation(format!(
            "conservative predictor needs more observed than missing features (d = {d}, q = {q})"
        )));
    }
    let anchor = pseudoinverse(&moments.szx, DEFAULT_PINV_TOL)? * &moments.szy;
    let pi = null_space_projector(&moments.szx, DEFAULT_PINV_TOL)?;
    let w = minimize_quadratic_on_affine(moments, &anchor, &pi)?;

    let residual = (&moments.szx * &w - &moments.szy).amax();
    let infeasible = rank(&moments.szx, DEFAULT_PINV_TOL) < q;
    if infeasible {
        log::warn!(
            "E_n[z x^T] is rank deficient; conservative constraint relaxed to least squares (residual {residual:.3e})"
        );
    }
    let mut p = LinearPredictor::new(w, PredictorKind::Conservative);
    p.constraint_residual = Some(residual);
    p.constraint_infeasible = infeasible;
    Ok(p)
}

/// Joint least squares on `[x; z]`. Uses the pseudoinverse of the joint Gram
/// matrix, so it is defined (minimum norm) even when `n < d + q`.
pub fn fit_oracle(moments: &SecondMoments) -> Result<OraclePredictor> {
    let (d, q) = (moments.d(), moments.q());
    let coef = pseudoinverse(&moments.joint_gram(), DEFAULT_PINV_TOL)? * moments.joint_cross();
    Ok(OraclePredictor {
        alpha: coef.rows(0, d).into_owned(),
        beta: coef.rows(d, q).into_owned(),
        x_mean: Vector::zeros(d),
        z_mean: Vector::zeros(q),
        y_mean: 0.0,
    })
}

pub fn fit_imputer(moments: &SecondMoments) -> Result<Imputer> {
    let gmat = &moments.szx * pseudoinverse(&moments.sxx, DEFAULT_PINV_TOL)?;
    Ok(Imputer { gmat })
}
