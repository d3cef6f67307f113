mod common;

use common::*;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng as _;
use slens::linalg::{acute_angle, canonicalize_sign, DEFAULT_MAX_ITER, DEFAULT_TOL};
use slens::{eigenpair_near, leading_singular_triplets, least_squares_fit, Error};

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn angle_is_symmetric_and_sign_blind((a, b) in (1usize..12).prop_flat_map(|n| (vec_strategy(n), vec_strategy(n)))) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let ab = acute_angle(&a, &b).unwrap();
        let ba = acute_angle(&b, &a).unwrap();
        let neg: Vec<f64> = b.iter().map(|x| -x).collect();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((ab - acute_angle(&a, &neg).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=90.0).contains(&ab));
        prop_assert!((ab - line_angle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn canonical_sign_is_idempotent(v in vec_strategy(8)) {
        let mut a = Array1::from(v.clone());
        let mut b = -Array1::from(v);
        canonicalize_sign(&mut a);
        canonicalize_sign(&mut b);
        prop_assert_eq!(&a, &b);
        let once = a.clone();
        canonicalize_sign(&mut a);
        prop_assert_eq!(a, once);
    }

    #[test]
    fn singular_values_match_jacobi(seed in any::<u64>(), m in 1usize..=16, n in 1usize..=16) {
        let mut r = rng(seed);
        let a = stress_matrix(&mut r, m, n);
        let k = m.min(n);
        let got = leading_singular_triplets(a.view(), k, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let want = jacobi_singular_values(&a);
        let scale = want[0].max(1.0);
        for (t, w) in got.iter().zip(&want) {
            prop_assert!((t.sigma - w).abs() <= 1e-6 * scale, "sigma {} vs {}", t.sigma, w);
            let un = t.u.dot(&t.u).sqrt();
            prop_assert!((un - 1.0).abs() < 1e-9);
        }
        for w in got.windows(2) {
            prop_assert!(w[0].sigma >= w[1].sigma);
        }
    }

    #[test]
    fn eigenpair_matches_jacobi_on_symmetric(seed in any::<u64>(), n in 2usize..=16) {
        let mut r = rng(seed);
        let g = gaussian_matrix(&mut r, n, n);
        let s = (&g + &g.t()) * 0.5;
        let (vals, vecs) = jacobi_eigh(&s);
        let target = r.random_range(0..n);
        // Small perturbation of a true eigenvector, so the target is unambiguous.
        let v0 = unit(&(&vecs.column(target).to_owned() + &(gaussian_vector(&mut r, n) * 1e-3)));
        let pair = eigenpair_near(s.view(), v0.view(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let gap = vals.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, v)| (v - vals[target]).abs()).fold(f64::INFINITY, f64::min);
        prop_assume!(gap > 1e-2);
        prop_assert!((pair.lambda - vals[target]).abs() <= 1e-6 * vals[0].abs().max(vals[n - 1].abs()).max(1.0));
        prop_assert!(line_angle(pair.w.as_slice().unwrap(), vecs.column(target).to_vec().as_slice()) < 1e-3);
    }

    #[test]
    fn lstsq_recovers_exact_map(seed in any::<u64>(), n in 1usize..8, m in 1usize..8) {
        let mut r = rng(seed);
        let j = gaussian_matrix(&mut r, m, n);
        let x = gaussian_matrix(&mut r, n, 4 * n + 8);
        let y = j.dot(&x);
        let fit = least_squares_fit(x.view(), y.view(), 0.0).unwrap();
        let err = (&fit - &j).iter().map(|e| e.abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-8, "max error {err}");
    }
}

#[test]
fn eigenpair_on_nonsymmetric_real_spectrum() {
    let mut r = rng(7);
    for _ in 0..50 {
        let n = 6;
        let s = gaussian_matrix(&mut r, n, n) + Array2::<f64>::eye(n) * 4.0;
        let d: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let sinv = {
            let m = nalgebra::DMatrix::from_fn(n, n, |i, j| s[[i, j]]);
            m.try_inverse().unwrap()
        };
        let a = Array2::from_shape_fn((n, n), |(i, j)| (0..n).map(|k| s[[i, k]] * d[k] * sinv[(k, j)]).sum::<f64>());
        let target = 1;
        let v0 = unit(&s.column(target).to_owned());
        let pair = eigenpair_near(a.view(), v0.view(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((pair.lambda - d[target]).abs() < 1e-6, "{} vs {}", pair.lambda, d[target]);
        assert!(!pair.likely_complex);
    }
}

#[test]
fn rotation_reports_likely_complex() {
    let a = ndarray::array![[0.0, -1.0], [1.0, 0.0]];
    let v0 = ndarray::array![1.0, 0.0];
    let pair = eigenpair_near(a.view(), v0.view(), 1e-7, 200).unwrap();
    assert!(pair.likely_complex);
}

#[test]
fn linalg_errors() {
    let a = Array2::<f64>::eye(3);
    assert!(matches!(leading_singular_triplets(a.view(), 4, 1e-7, 10), Err(Error::Shape(_))));
    let v = ndarray::array![2.0, 0.0, 0.0];
    assert!(matches!(eigenpair_near(a.view(), v.view(), 1e-7, 10), Err(Error::Domain(_))));
    assert!(matches!(acute_angle(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
    let x = Array2::<f64>::zeros((3, 5));
    assert!(matches!(least_squares_fit(x.view(), x.view(), 0.0), Err(Error::IllConditioned { .. })));
}

#[test]
fn tied_singular_values_are_flagged() {
    let a = Array2::<f64>::eye(4) * 2.0;
    let t = leading_singular_triplets(a.view(), 4, 1e-7, 1000).unwrap();
    assert!(t.iter().all(|t| (t.sigma - 2.0).abs() < 1e-9 && t.degenerate));
    // Lowest-index basis rule.
    assert!((t[0].v[0].abs() - 1.0).abs() < 1e-9);
}
