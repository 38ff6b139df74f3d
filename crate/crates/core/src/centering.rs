//! Column centering with means captured from training data only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Training means of `x`, `z`, and `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: f64,
}

pub(crate) fn column_means(m: &Matrix) -> Vec<f64> {
    let n = m.nrows().max(1) as f64;
    m.column_iter().map(|c| c.sum() / n).collect()
}

fn subtract_columns(m: &Matrix, means: &[f64], what: &'static str) -> Result<Matrix> {
    if m.ncols() != means.len() {
        return Err(Error::shape(what, means.len(), m.ncols()));
    }
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    Ok(out)
}

impl Centering {
    pub fn fit(x: &Matrix, z: &Matrix, y: &Vector) -> Self {
        Centering {
            x: column_means(x),
            z: column_means(z),
            y: if y.is_empty() { 0.0 } else { y.mean() },
        }
    }

    pub fn identity(d: usize, q: usize) -> Self {
        Centering {
            x: vec![0.0; d],
            z: vec![0.0; q],
            y: 0.0,
        }
    }

    pub fn center_x(&self, x: &Matrix) -> Result<Matrix> {
        subtract_columns(x, &self.x, "center x (columns)")
    }

    pub fn center_z(&self, z: &Matrix) -> Result<Matrix> {
        subtract_columns(z, &self.z, "center z (columns)")
    }

    pub fn center_y(&self, y: &Vector) -> Vector {
        y.add_scalar(-self.y)
    }

    pub fn center_x_row(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.x.len() {
            return Err(Error::shape("center x (row)", self.x.len(), x.len()));
        }
        Ok(Vector::from_fn(x.len(), |i, _| x[i] - self.x[i]))
    }

    pub fn center_z_row(&self, z: &Vector) -> Result<Vector> {
        if z.len() != self.z.len() {
            return Err(Error::shape("center z (row)", self.z.len(), z.len()));
        }
        Ok(Vector::from_fn(z.len(), |i, _| z[i] - self.z[i]))
    }
}
