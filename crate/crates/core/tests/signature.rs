mod common;

use common::*;
use ndarray::Array1;
use proptest::prelude::*;
use slens::signature::{distance_matrix, model_distance, ModelSignature};
use slens::synth::perturb;
use slens::Error;

fn random_signature(seed: u64, d: usize, layers: usize) -> ModelSignature {
    let mut r = rng(seed);
    ModelSignature {
        model_id: format!("m{seed}"),
        d,
        preferred_layer: None,
        directions: (0..layers).map(|_| unit(&gaussian_vector(&mut r, d))).collect(),
    }
}

proptest! {
    #[test]
    fn distance_axioms(seed in any::<u64>(), flips in prop::collection::vec(any::<bool>(), 4)) {
        let a = random_signature(seed, 16, 4);
        let b = random_signature(seed.wrapping_add(1), 16, 4);
        prop_assert!(model_distance(&a, &a).unwrap() < 1e-6);
        let mut flipped = a.clone();
        for (v, f) in flipped.directions.iter_mut().zip(&flips) {
            if *f {
                *v = -&*v;
            }
        }
        prop_assert!(model_distance(&a, &flipped).unwrap() < 1e-6);
        let ab = model_distance(&a, &b).unwrap();
        prop_assert!((ab - model_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=90.0).contains(&ab));
    }

    #[test]
    fn file_round_trip_is_fp32_exact(seed in any::<u64>()) {
        let a = random_signature(seed, 8, 3);
        let back = ModelSignature::from_file(&a.to_file()).unwrap();
        for (x, y) in a.directions.iter().zip(&back.directions) {
            prop_assert!(x.iter().zip(y).all(|(p, q)| (*p as f32) as f64 == *q));
        }
    }
}

#[test]
fn mismatched_width_is_incomparable_and_blank_in_matrix() {
    let a = random_signature(1, 8, 2);
    let b = random_signature(2, 9, 2);
    assert!(matches!(model_distance(&a, &b), Err(Error::Incomparable(_))));
    let m = distance_matrix(&[a, b]);
    assert_eq!(m.get(0, 1), None);
    assert!(m.to_csv().lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn self_comparison_is_a_zero_matrix() {
    let a = random_signature(3, 8, 2);
    let m = distance_matrix(&[a]);
    assert_eq!(m.values, vec![vec![Some(0.0)]]);
}

#[test]
fn fine_tuned_copies_stay_close_and_independent_models_are_far() {
    let d = 64;
    let base = family_base(d, 1);
    let other = family_base(d, 2);
    let s_base = synth_signature(&base, "base");
    let s_tuned = synth_signature(&perturb(&base, 0.01, 9).unwrap(), "tuned");
    let s_other = synth_signature(&other, "other");
    let near = model_distance(&s_base, &s_tuned).unwrap();
    let far = model_distance(&s_base, &s_other).unwrap();
    assert!(near <= 10.0, "noise distance {near}");
    assert!(far >= 60.0, "independent distance {far}");
    let m = distance_matrix(&[s_base, s_tuned, s_other]);
    assert_eq!(m.clusters(10.0), vec![vec![0, 1], vec![2]]);
}

#[test]
fn signature_directions_are_unit_and_canonical() {
    let s = synth_signature(&family_base(32, 4), "x");
    for v in &s.directions {
        assert!((v.dot(v) - 1.0).abs() < 1e-9);
        let mut c: Array1<f64> = v.clone();
        slens::linalg::canonicalize_sign(&mut c);
        assert_eq!(&c, v);
    }
}
