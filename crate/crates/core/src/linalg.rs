//! Dense linear-algebra substrate: empirical second moments, the SVD-based
//! pseudoinverse, null-space projectors, and quadratic minimization over an
//! affine set.
//!
//! Matrices are `nalgebra` dynamic matrices. All operations are pure.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative singular-value cutoff for [`pseudoinverse`] and
/// [`null_space_projector`].
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// Empirical second moments of centered `(x, z, y)` samples, stored blockwise.
///
/// `sxx = E_n[x xᵀ]`, `szx = E_n[z xᵀ]`, `szz = E_n[z zᵀ]`, `sxy = E_n[x y]`,
/// `szy = E_n[z y]`, `syy = E_n[y²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoments {
    pub sxx: Matrix,
    pub szx: Matrix,
    pub szz: Matrix,
    pub sxy: Vector,
    pub szy: Vector,
    pub syy: f64,
    pub n: usize,
}

impl SecondMoments {
    pub fn d(&self) -> usize {
        self.sxx.nrows()
    }

    pub fn q(&self) -> usize {
        self.szz.nrows()
    }

    /// Empirical mean squared error `E_n[(y - wᵀx)²]` of a weight vector,
    /// evaluated from the moments alone.
    pub fn mse(&self, w: &Vector) -> f64 {
        self.syy - 2.0 * w.dot(&self.sxy) + (self.sxx.clone() * w).dot(w)
    }

    /// Joint Gram matrix of the stacked feature `[x; z]`.
    pub fn joint_gram(&self) -> Matrix {
        let (d, q) = (self.d(), self.q());
        let mut g = Matrix::zeros(d + q, d + q);
        g.view_mut((0, 0), (d, d)).copy_from(&self.sxx);
        g.view_mut((d, 0), (q, d)).copy_from(&self.szx);
        g.view_mut((0, d), (d, q)).copy_from(&self.szx.transpose());
        g.view_mut((d, d), (q, q)).copy_from(&self.szz);
        g
    }

    /// Joint cross moment `[E_n[x y]; E_n[z y]]`.
    pub fn joint_cross(&self) -> Vector {
        let (d, q) = (self.d(), self.q());
        let mut c = Vector::zeros(d + q);
        c.rows_mut(0, d).copy_from(&self.sxy);
        c.rows_mut(d, q).copy_from(&self.szy);
        c
    }
}

pub(crate) fn ensure_finite_matrix(m: &Matrix, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % m.nrows().max(1), pos / m.nrows().max(1));
        return Err(Error::Validation(format!(
            "{what} has a non-finite entry at ({r}, {c})"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite_vector(v: &Vector, what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{what} has a non-finite entry at index {i}"
        )));
    }
    Ok(())
}

fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Sample means of the outer products of already centered data.
pub fn accumulate_moments(x: &Matrix, z: &Matrix, y: &Vector) -> Result<SecondMoments> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Validation("no samples to accumulate".into()));
    }
    if z.nrows() != n {
        return Err(Error::shape("accumulate_moments (Z rows)", n, z.nrows()));
    }
    if y.len() != n {
        return Err(Error::shape("accumulate_moments (y length)", n, y.len()));
    }
    ensure_finite_matrix(x, "X")?;
    ensure_finite_matrix(z, "Z")?;
    ensure_finite_vector(y, "y")?;

    let inv_n = 1.0 / n as f64;
    let xt = x.transpose();
    let zt = z.transpose();
    Ok(SecondMoments {
        sxx: symmetrize(&(&xt * x)) * inv_n,
        szx: (&zt * x) * inv_n,
        szz: symmetrize(&(&zt * z)) * inv_n,
        sxy: (&xt * y) * inv_n,
        szy: (&zt * y) * inv_n,
        syy: y.dot(y) * inv_n,
        n,
    })
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ`.
///
/// Columns of `u` belonging to zero singular values are left at zero.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// One-sided (Hestenes) Jacobi. Accurate to working precision even for
    /// rank-deficient input, which is the common case here.
    pub fn new(a: &Matrix) -> Svd {
        let (m, n) = a.shape();
        if m < n {
            let t = Svd::new(&a.transpose());
            return Svd { u: t.v, s: t.s, v: t.u };
        }
        let mut w = a.clone();
        let mut v = Matrix::identity(n, n);
        for _sweep in 0..JACOBI_MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in (p + 1)..n {
                    let alpha = w.column(p).norm_squared();
                    let beta = w.column(q).norm_squared();
                    let gamma = w.column(p).dot(&w.column(q));
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let sn = c * t;
                    rotate_columns(&mut w, p, q, c, sn);
                    rotate_columns(&mut v, p, q, c, sn);
                }
            }
            if !rotated {
                break;
            }
        }
        let s: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
        for (j, mut col) in w.column_iter_mut().enumerate() {
            if s[j] > 0.0 {
                col /= s[j];
            }
        }
        Svd { u: w, s, v }
    }

    pub fn max_singular_value(&self) -> f64 {
        self.s.iter().fold(0.0, |a, &b| a.max(b))
    }

    fn cutoff(&self, rel_tol: f64) -> f64 {
        rel_tol * self.max_singular_value()
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let a = m[(i, p)];
        let b = m[(i, q)];
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

/// Moore–Penrose pseudoinverse via SVD. Singular values at or below
/// `rel_tol · σ_max` are treated as zero.
pub fn pseudoinverse(a: &Matrix, rel_tol: f64) -> Result<Matrix> {
    ensure_finite_matrix(a, "pseudoinverse input")?;
    if !(rel_tol > 0.0) {
        return Err(Error::Validation(format!(
            "pseudoinverse tolerance must be positive, got {rel_tol}"
        )));
    }
    let (m, n) = a.shape();
    let mut out = Matrix::zeros(n, m);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let svd = Svd::new(a);
    let cutoff = svd.cutoff(rel_tol);
    for (k, &s) in svd.s.iter().enumerate() {
        if s > cutoff {
            // out += v_k u_kᵀ / s
            out.ger(1.0 / s, &svd.v.column(k), &svd.u.column(k), 1.0);
        }
    }
    Ok(out)
}

/// Numerical rank with the same relative cutoff as [`pseudoinverse`].
pub fn rank(a: &Matrix, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let svd = Svd::new(a);
    let cutoff = svd.cutoff(rel_tol);
    svd.s.iter().filter(|&&v| v > cutoff).count()
}

/// Orthogonal projector onto the null space of a `q × d` matrix.
pub fn null_space_projector(a: &Matrix, rel_tol: f64) -> Result<Matrix> {
    ensure_finite_matrix(a, "null_space_projector input")?;
    let (q, d) = a.shape();
    if q > d {
        return Err(Error::shape("null_space_projector (rows <= cols)", format!("<= {d} rows"), q));
    }
    let mut pi = Matrix::identity(d, d);
    if q == 0 || d == 0 {
        return Ok(pi);
    }
    let svd = Svd::new(a);
    let cutoff = svd.cutoff(rel_tol);
    for (k, &s) in svd.s.iter().enumerate() {
        if s > cutoff {
            let v = svd.v.column(k);
            pi.ger(-1.0, &v, &v, 1.0);
        }
    }
    Ok(symmetrize(&pi))
}

/// Minimizes the empirical MSE over the affine set `{w0 + Π θ}`.
///
/// `θ̂ = (Π Sxx Π)† Π (sxy − Sxx w0)` and the result is `w0 + Π θ̂`.
pub fn minimize_quadratic_on_affine(moments: &SecondMoments, w0: &Vector, pi: &Matrix) -> Result<Vector> {
    let d = moments.d();
    if w0.len() != d {
        return Err(Error::shape("minimize_quadratic_on_affine (anchor)", d, w0.len()));
    }
    if pi.shape() != (d, d) {
        return Err(Error::shape(
            "minimize_quadratic_on_affine (projector)",
            format!("{d}x{d}"),
            format!("{}x{}", pi.nrows(), pi.ncols()),
        ));
    }
    let reduced = symmetrize(&(pi.transpose() * &moments.sxx * pi));
    let rhs = pi.transpose() * (&moments.sxy - &moments.sxx * w0);
    let theta = pseudoinverse(&reduced, DEFAULT_PINV_TOL)? * rhs;
    Ok(w0 + pi * theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn max_abs(m: &Matrix) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    fn check_penrose(a: &Matrix, p: &Matrix) {
        let scale = 1.0 + max_abs(a).max(max_abs(p));
        let tol = 1e-8 * scale * scale * scale;
        assert!(max_abs(&(a * p * a - a)) <= tol);
        assert!(max_abs(&(p * a * p - p)) <= tol);
        let ap = a * p;
        let pa = p * a;
        assert!(max_abs(&(&ap - ap.transpose())) <= tol);
        assert!(max_abs(&(&pa - pa.transpose())) <= tol);
    }

    #[test]
    fn two_point_moments() {
        let x = Matrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let z = Matrix::from_row_slice(2, 1, &[2.0, -2.0]);
        let y = Vector::from_vec(vec![3.0, -3.0]);
        let m = accumulate_moments(&x, &z, &y).unwrap();
        assert_eq!(m.sxx[(0, 0)], 1.0);
        assert_eq!(m.szx[(0, 0)], 2.0);
        assert_eq!(m.szz[(0, 0)], 4.0);
        assert_eq!(m.sxy[0], 3.0);
        assert_eq!(m.szy[0], 6.0);
        assert_eq!(m.syy, 9.0);
    }

    #[test]
    fn zero_sample_moments() {
        let m = accumulate_moments(&Matrix::zeros(1, 2), &Matrix::zeros(1, 1), &Vector::zeros(1)).unwrap();
        assert!(m.sxx.iter().all(|&v| v == 0.0));
        assert!(m.szx.iter().all(|&v| v == 0.0));
        assert_eq!(m.syy, 0.0);
    }

    #[test]
    fn moments_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d) = (50, 3);
        let x = random_matrix(&mut rng, n, d);
        let z = random_matrix(&mut rng, n, 1);
        let y = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let m = accumulate_moments(&x, &z, &y).unwrap();
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    s += x[(i, a)] * x[(i, b)];
                }
                assert!((m.sxx[(a, b)] - s / n as f64).abs() <= 1e-12);
            }
            let mut sxy = 0.0;
            let mut szx = 0.0;
            for i in 0..n {
                sxy += x[(i, a)] * y[i];
                szx += z[(i, 0)] * x[(i, a)];
            }
            assert!((m.sxy[a] - sxy / n as f64).abs() <= 1e-12);
            assert!((m.szx[(0, a)] - szx / n as f64).abs() <= 1e-12);
        }
        assert_eq!(m.sxx, m.sxx.transpose());
    }

    #[test]
    fn moments_reject_bad_input() {
        let x = Matrix::zeros(3, 2);
        assert!(matches!(
            accumulate_moments(&x, &Matrix::zeros(2, 1), &Vector::zeros(3)),
            Err(Error::Shape { .. })
        ));
        let mut bad = x.clone();
        bad[(1, 1)] = f64::NAN;
        assert!(matches!(
            accumulate_moments(&bad, &Matrix::zeros(3, 1), &Vector::zeros(3)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn pinv_identity_and_diag() {
        let i3 = Matrix::identity(3, 3);
        assert_relative_eq!(pseudoinverse(&i3, DEFAULT_PINV_TOL).unwrap(), i3, epsilon = 1e-15);
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.0]));
        let p = pseudoinverse(&a, DEFAULT_PINV_TOL).unwrap();
        assert_relative_eq!(p, Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 0.0])), epsilon = 1e-15);
    }

    #[test]
    fn pinv_full_column_rank_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 2);
        let p = pseudoinverse(&a, DEFAULT_PINV_TOL).unwrap();
        let ata = a.transpose() * &a;
        let oracle = ata.try_inverse().unwrap() * a.transpose();
        assert!(max_abs(&(p - oracle)) <= 1e-9);
    }

    #[test]
    fn svd_recomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for it in 0..300 {
            let r = 1 + it % 3;
            let (m, n) = if it % 2 == 0 { (5, 4) } else { (3, 6) };
            let a = random_matrix(&mut rng, m, r) * random_matrix(&mut rng, r, n);
            let svd = Svd::new(&a);
            let back = &svd.u * Matrix::from_diagonal(&Vector::from_vec(svd.s.clone())) * svd.v.transpose();
            assert!(max_abs(&(back - &a)) <= 1e-13);
            // right vectors are orthonormal on the nonzero part of the spectrum
            let keep: Vec<usize> = (0..svd.s.len()).filter(|&k| svd.s[k] > 1e-10).collect();
            assert_eq!(keep.len(), r);
            let vk = svd.v.select_columns(&keep);
            assert!(max_abs(&(vk.transpose() * &vk - Matrix::identity(r, r))) <= 1e-13);
        }
    }

    #[test]
    fn pinv_penrose_conditions_on_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = random_matrix(&mut rng, 5, 2);
            let c = random_matrix(&mut rng, 2, 4);
            let a = b * c; // rank 2, 5x4
            let p = pseudoinverse(&a, DEFAULT_PINV_TOL).unwrap();
            check_penrose(&a, &p);
            assert_eq!(rank(&a, DEFAULT_PINV_TOL), 2);
        }
    }

    #[test]
    fn pinv_of_empty_and_zero() {
        assert_eq!(pseudoinverse(&Matrix::zeros(0, 3), 1e-10).unwrap().shape(), (3, 0));
        let z = pseudoinverse(&Matrix::zeros(2, 3), 1e-10).unwrap();
        assert_eq!(z, Matrix::zeros(3, 2));
    }

    #[test]
    fn projector_examples() {
        let a = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let pi = null_space_projector(&a, DEFAULT_PINV_TOL).unwrap();
        assert_relative_eq!(pi, Matrix::from_diagonal(&Vector::from_vec(vec![0.0, 1.0, 1.0])), epsilon = 1e-15);
        let pi = null_space_projector(&Matrix::zeros(1, 3), DEFAULT_PINV_TOL).unwrap();
        assert_eq!(pi, Matrix::identity(3, 3));
        let pi = null_space_projector(&Matrix::zeros(0, 3), DEFAULT_PINV_TOL).unwrap();
        assert_eq!(pi, Matrix::identity(3, 3));
    }

    #[test]
    fn projector_annihilates_row_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 1, 4);
        let pi = null_space_projector(&a, DEFAULT_PINV_TOL).unwrap();
        assert!(max_abs(&(&pi - pi.transpose())) <= 1e-12);
        assert!(max_abs(&(&pi * &pi - &pi)) <= 1e-8);
        assert_eq!(rank(&pi, DEFAULT_PINV_TOL), 3);
        for _ in 0..100 {
            let v = Vector::from_fn(4, |_, _| rng.random_range(-5.0..5.0));
            let pv = &pi * v;
            assert!((&a * pv)[0].abs() <= 1e-8);
        }
    }

    fn random_moments(rng: &mut ChaCha8Rng, n: usize, d: usize, q: usize) -> SecondMoments {
        let x = random_matrix(rng, n, d);
        let z = random_matrix(rng, n, q) + &x.columns(0, q) * 0.5;
        let y = Vector::from_fn(n, |i, _| x.row(i).sum() + z.row(i).sum() + rng.random_range(-0.3..0.3));
        accumulate_moments(&x, &z, &y).unwrap()
    }

    #[test]
    fn affine_minimizer_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_moments(&mut rng, 40, 3, 1);
        let w0 = Vector::from_vec(vec![0.3, -0.2, 1.0]);
        let w = minimize_quadratic_on_affine(&m, &w0, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(w, w0);

        let w = minimize_quadratic_on_affine(&m, &Vector::zeros(3), &Matrix::identity(3, 3)).unwrap();
        let unconstrained = pseudoinverse(&m.sxx, DEFAULT_PINV_TOL).unwrap() * &m.sxy;
        assert_relative_eq!(w, unconstrained, epsilon = 1e-10);
    }

    #[test]
    fn affine_minimizer_beats_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_moments(&mut rng, 60, 4, 1);
        let pi = null_space_projector(&m.szx, DEFAULT_PINV_TOL).unwrap();
        let w0 = pseudoinverse(&m.szx, DEFAULT_PINV_TOL).unwrap() * &m.szy;
        let w = minimize_quadratic_on_affine(&m, &w0, &pi).unwrap();
        let best = m.mse(&w);
        assert!(best <= m.mse(&w0) + 1e-12);
        for _ in 0..1000 {
            let theta = Vector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let probe = &w0 + &pi * theta;
            assert!(best <= m.mse(&probe) + 1e-12);
        }
    }
}
