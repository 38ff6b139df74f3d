use proptest::prelude::*;

use robust_missing::centering::Centering;
use robust_missing::evalkit::EvalReport;
use robust_missing::gate::{LogisticGate, OutlierRegion};
use robust_missing::linalg::{accumulate_moments, null_space_projector, pseudoinverse, DEFAULT_PINV_TOL};
use robust_missing::predictors::{fit_conservative, fit_optimistic};
use robust_missing::{Matrix, Vector};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

/// Product of two factors, so the rank is at most `r`.
fn low_rank(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=rows.min(cols)).prop_flat_map(move |r| (matrix(rows, r), matrix(r, cols)).prop_map(|(a, b)| a * b))
}

fn dataset(n: usize, d: usize, q: usize) -> impl Strategy<Value = (Matrix, Matrix, Vector)> {
    (matrix(n, d), matrix(d, q), matrix(n, q), prop::collection::vec(-5.0f64..5.0, n)).prop_map(
        move |(x, b, e, y)| {
            let z = &x * b + e;
            (x, z, Vector::from_vec(y))
        },
    )
}

fn center(m: &Matrix) -> Matrix {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pseudoinverse_satisfies_penrose(a in low_rank(5, 4)) {
        let p = pseudoinverse(&a, DEFAULT_PINV_TOL).unwrap();
        let scale = 1.0 + a.amax() * a.amax() * p.amax();
        prop_assert!((&a * &p * &a - &a).amax() <= 1e-9 * scale);
        prop_assert!((&p * &a * &p - &p).amax() <= 1e-9 * (1.0 + p.amax() * scale));
        let ap = &a * &p;
        let pa = &p * &a;
        prop_assert!((&ap - ap.transpose()).amax() <= 1e-9 * scale);
        prop_assert!((&pa - pa.transpose()).amax() <= 1e-9 * scale);
    }

    #[test]
    fn projector_is_symmetric_idempotent_and_annihilating(a in low_rank(2, 5)) {
        let pi = null_space_projector(&a, DEFAULT_PINV_TOL).unwrap();
        prop_assert!((&pi * &pi - &pi).amax() <= 1e-10);
        prop_assert!((&pi - pi.transpose()).amax() <= 1e-10);
        prop_assert!((&a * &pi).amax() <= 1e-9 * (1.0 + a.amax()));
    }

    #[test]
    fn conservative_meets_constraint_and_beats_feasible_moves(
        (x, z, y) in dataset(40, 5, 2),
        dir in prop::collection::vec(-1.0f64..1.0, 5),
        step in -3.0f64..3.0,
    ) {
        let m = accumulate_moments(&center(&x), &center(&z), &y.add_scalar(-y.mean())).unwrap();
        let wc = fit_conservative(&m).unwrap();
        let w = &wc.weights;
        let scale = 1.0 + m.szy.amax() + m.szx.amax() * w.amax();
        prop_assert!((&m.szx * w - &m.szy).amax() <= 1e-8 * scale);
        let pi = null_space_projector(&m.szx, DEFAULT_PINV_TOL).unwrap();
        let probe = w + &pi * Vector::from_vec(dir) * step;
        prop_assert!(m.mse(w) <= m.mse(&probe) + 1e-9 * (1.0 + m.syy));
        let wo = fit_optimistic(&m).unwrap();
        prop_assert!(m.mse(&wo.weights) <= m.mse(w) + 1e-9 * (1.0 + m.syy));
    }

    #[test]
    fn gate_probability_is_open_and_monotone(b0 in -50.0f64..50.0, b1 in 0.0f64..50.0, a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let g = LogisticGate::from_logits(b0, b1);
        let (pa, pb) = (g.prob_outlier(a), g.prob_outlier(b));
        prop_assert!(pa > 0.0 && pa < 1.0 && pb > 0.0 && pb < 1.0);
        if a <= b {
            prop_assert!(pa <= pb);
        }
    }

    #[test]
    fn report_buckets_recombine(errs in prop::collection::vec((0.0f64..1e3, any::<bool>()), 1..200)) {
        let e: Vec<f64> = errs.iter().map(|p| p.0).collect();
        let l: Vec<bool> = errs.iter().map(|p| p.1).collect();
        let r = EvalReport::from_errors(&e, &l, 0.1).unwrap();
        prop_assert_eq!(r.n_in + r.n_out, e.len());
        prop_assert!(r.decomposition_gap() <= 1e-10 * (1.0 + r.mse));
    }

    #[test]
    fn tail_region_is_scale_invariant(z in matrix(60, 2), s in 0.1f64..10.0, alpha in 0.05f64..1.0) {
        let zc = center(&z);
        let szz = zc.transpose() * &zc / 60.0;
        let r1 = OutlierRegion::from_second_moment(&szz, alpha).unwrap();
        let r2 = OutlierRegion::from_second_moment(&(&szz * (s * s)), alpha).unwrap();
        for i in 0..60 {
            let v = zc.row(i).transpose();
            let q1 = r1.quadratic_form(&v).unwrap();
            let q2 = r2.quadratic_form(&(&v * s)).unwrap();
            prop_assert!((q1 - q2).abs() <= 1e-8 * (1.0 + q1));
        }
    }

    #[test]
    fn test_data_is_shifted_by_training_means((x, z, y) in dataset(30, 3, 1), shift in -10.0f64..10.0) {
        let c = Centering::fit(&x, &z, &y);
        let test = x.add_scalar(shift);
        let tc = c.center_x(&test).unwrap();
        for j in 0..3 {
            prop_assert!((tc.column(j).mean() - shift).abs() <= 1e-9 * (1.0 + shift.abs() + x.amax()));
        }
    }
}
